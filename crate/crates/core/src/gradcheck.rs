//! Finite-difference verification of tape gradients.
//!
//! Central differences in double precision: perturb one parameter
//! coordinate by ±eps, re-run the forward pass, and compare
//! `(f(x+eps) - f(x-eps)) / 2eps` against the analytic gradient.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{ParamId, Parameters, Session};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Coordinates where both sides are below this are treated as zero.
const NEGLIGIBLE: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Forward-only loss evaluation with the current parameter values.
pub fn loss_value<F>(params: &Parameters, build: &F) -> Result<f64>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::eval(params);
    let loss = build(&mut s)?;
    Ok(s.value(loss).item())
}

/// Loss value plus analytic gradients from one backward pass.
pub fn analytic_grads<F>(params: &Parameters, build: &F) -> Result<(f64, Vec<(ParamId, Tensor)>)>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::eval(params);
    let loss = build(&mut s)?;
    s.backward(loss)
}

fn rel_error(a: f64, n: f64) -> f64 {
    if a.abs() < NEGLIGIBLE && n.abs() < NEGLIGIBLE {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

/// Compare supplied per-parameter gradients against central differences on
/// up to `max_coords_per_param` sampled coordinates per parameter.
/// Returns the maximum relative error over all checked coordinates.
pub fn compare_to_finite_difference<F>(
    params: &mut Parameters,
    build: &F,
    analytic: &[(ParamId, Tensor)],
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for (id, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            (0..max_coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let original = params.value(*id).data()[c];
            params.value_mut(*id).data_mut()[c] = original + eps;
            let plus = loss_value(params, build)?;
            params.value_mut(*id).data_mut()[c] = original - eps;
            let minus = loss_value(params, build)?;
            params.value_mut(*id).data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(grad.data()[c], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{}]", params.name(*id), c);
            }
        }
    }
    Ok(report)
}

/// Full check: compute analytic gradients of the scalar loss built by
/// `build`, then verify them against central finite differences.
pub fn grad_check<F>(
    params: &mut Parameters,
    build: F,
    eps: f64,
    max_coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(params, &build)?;
    compare_to_finite_difference(params, &build, &analytic, eps, max_coords_per_param, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_init;

    #[test]
    fn linear_function_checks_to_machine_precision() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap());
        let report = grad_check(
            &mut params,
            move |s| {
                let wv = s.param(w)?;
                let c = s.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())?;
                let prod = s.tape.mul(wv, c)?;
                s.tape.sum_all(prod)
            },
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn nonlinear_composite_passes() {
        let mut params = Parameters::new();
        let mut rng = stream_rng(4, Stream::ParamInit);
        let w = params.register("w", normal_init(&mut rng, &[4, 4], 0.7));
        let x0 = normal_init(&mut rng, &[2, 4], 1.0);
        let report = grad_check(
            &mut params,
            move |s| {
                let wv = s.param(w)?;
                let x = s.constant(x0.clone())?;
                let h = s.tape.matmul(x, wv)?;
                let h = s.tape.gelu(h)?;
                let p = s.tape.softmax_rows(h, None)?;
                let sq = s.tape.square(p)?;
                s.tape.mean_all(sq)
            },
            1e-5,
            16,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut params = Parameters::new();
        let w = params.register("w", Tensor::from_vec(&[2], vec![0.9, -0.4]).unwrap());
        let build = move |s: &mut Session| {
            let wv = s.param(w)?;
            let sq = s.tape.square(wv)?;
            s.tape.sum_all(sq)
        };
        let (_, mut analytic) = analytic_grads(&params, &build).unwrap();
        analytic[0].1.data_mut()[0] *= 1.5; // deliberate corruption
        let report =
            compare_to_finite_difference(&mut params, &build, &analytic, 1e-5, 8, 2).unwrap();
        assert!(report.max_rel_error > 1e-2, "corruption went undetected");
    }
}
