//! Named parameter store and per-step forward sessions.
//!
//! `Parameters` owns the trainable tensors and their gradient accumulation
//! buffers (summed across backward calls until the optimizer consumes
//! them). A `Session` wraps one tape, binds parameters lazily as leaves,
//! and routes tape gradients back into the accumulators after backward.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default)]
pub struct Parameters {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Parameters {
        Parameters::default()
    }

    /// Register a parameter under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameter names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Add per-parameter gradients into the accumulation buffers.
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            self.grads[id.0].add_assign(&g);
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all accumulated gradients in place.
    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

enum Mode<'r> {
    Eval,
    Train { dropout: f64, rng: &'r mut ChaCha8Rng },
}

/// One forward (and optionally backward) pass over a fresh tape.
pub struct Session<'p, 'r> {
    pub tape: Tape,
    params: &'p Parameters,
    bound: Vec<Option<Var>>,
    mode: Mode<'r>,
}

impl<'p, 'r> Session<'p, 'r> {
    /// Inference/analysis mode: dropout disabled, gradients still available.
    pub fn eval(params: &'p Parameters) -> Session<'p, 'r> {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode: Mode::Eval,
        }
    }

    /// Training mode: dropout active with the given rate and rng.
    pub fn train(params: &'p Parameters, dropout: f64, rng: &'r mut ChaCha8Rng) -> Session<'p, 'r> {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode: Mode::Train { dropout, rng },
        }
    }

    /// Bind a parameter as a gradient-tracked leaf (cached per session).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.value(id).clone(), true)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Inverted dropout on the rows of `x`; identity in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let (rate, rng) = match &mut self.mode {
            Mode::Eval => return Ok(x),
            Mode::Train { dropout, rng } => (*dropout, rng),
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::new_unchecked(shape, mask))?;
        self.tape.mul(x, m)
    }

    /// Backpropagate from `loss` and hand back (loss value, parameter
    /// gradients) ready for [`Parameters::accumulate`].
    pub fn backward(mut self, loss: Var) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let loss_value = self.tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        self.tape.backward(loss)?;
        let mut grads = Vec::new();
        for (idx, slot) in self.bound.iter().enumerate() {
            if let Some(var) = slot {
                if let Some(g) = self.tape.grad(*var) {
                    grads.push((ParamId(idx), g.clone()));
                }
            }
        }
        Ok((loss_value, grads))
    }
}

/// Glorot/Xavier uniform init for a weight of the given shape.
pub fn xavier_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (fan_in, fan_out) = match shape {
        [r, c] => (*r, *c),
        [n] => (*n, *n),
        _ => panic!("xavier_init on rank {}", shape.len()),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new_unchecked(shape.to_vec(), data)
}

/// Zero-mean normal init with the given standard deviation.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new_unchecked(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, stream_rng, Stream};

    #[test]
    fn param_binding_is_cached_and_grads_flow() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::scalar(3.0));
        let mut sess = Session::eval(&params);
        let a = sess.param(w).unwrap();
        let b = sess.param(w).unwrap();
        assert_eq!(a, b);
        let y = sess.tape.square(a).unwrap();
        let (loss, grads) = sess.backward(y).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.item(), 6.0);
    }

    #[test]
    fn dropout_identity_in_eval_and_scales_in_train() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::filled(&[4, 4], 1.0));

        let mut sess = Session::eval(&params);
        let x = sess.param(w).unwrap();
        let y = sess.dropout(x).unwrap();
        assert_eq!(x, y);

        let mut rng = seeded(11);
        let mut sess = Session::train(&params, 0.5, &mut rng);
        let x = sess.param(w).unwrap();
        let y = sess.dropout(x).unwrap();
        let vals = sess.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(vals.iter().any(|&v| v == 0.0));
        assert!(vals.iter().any(|&v| v == 2.0));
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::filled(&[8, 8], 1.0));
        let run = |seed: u64| {
            let mut rng = stream_rng(seed, Stream::Dropout);
            let mut sess = Session::train(&params, 0.3, &mut rng);
            let x = sess.param(w).unwrap();
            let y = sess.dropout(x).unwrap();
            sess.value(y).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn accumulate_sums_gradients() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::scalar(1.0));
        params.accumulate(vec![(w, Tensor::scalar(2.0))]);
        params.accumulate(vec![(w, Tensor::scalar(3.0))]);
        assert_eq!(params.grad(w).item(), 5.0);
        params.zero_grads();
        assert_eq!(params.grad(w).item(), 0.0);
    }
}
