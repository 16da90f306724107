//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward op appends one node holding its value and enough saved
//! state to run its backward rule. `backward` walks the tape once in
//! reverse, accumulating gradients into nodes whose subgraph contains a
//! gradient-requiring leaf. A tape lives for exactly one forward/backward
//! pass; re-using it afterwards is a [`Error::Graph`].
//!
//! Node granularity is tensor-level (one node per matmul, softmax, ...)
//! so tape overhead stays negligible next to the kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    /// `a · bᵀ`
    MatmulNt(usize, usize),
    Sqrt(usize),
    Square(usize),
    Gelu(usize),
    Sigmoid(usize),
    /// Row-wise softmax; positions where `keep == 0` get probability 0,
    /// and a fully dropped row yields an all-zero row. The saved output is
    /// all backward needs, so the mask itself is not retained.
    SoftmaxRows { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f64>, rstd: Vec<f64> },
    /// Rows of `table` selected by token id.
    Gather { table: usize, ids: Vec<usize> },
    /// Rows of a 2-D tensor selected by row index.
    GatherRows { x: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    AddBias { x: usize, bias: usize },
    SumAll(usize),
    MeanAll(usize),
    CrossEntropy { logits: usize, targets: Vec<u32>, pad: u32, probs: Tensor, n_active: usize },
    BceWithLogits { logits: usize, targets: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of `v`, present after `backward` if `v` needed one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("tape already consumed by backward".into()));
        }
        self.nodes.push(Node { value, grad: None, requires, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x / y)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::Div(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let r = self.req(a.0);
        self.push(v, r, Op::AddScalar(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.nodes[a.0].value.scale(c);
        let r = self.req(a.0);
        self.push(v, r, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::Matmul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        self.push(v, r, Op::MatmulNt(a.0, b.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        let r = self.req(a.0);
        self.push(v, r, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x * x);
        let r = self.req(a.0);
        self.push(v, r, Op::Square(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(gelu);
        let r = self.req(a.0);
        self.push(v, r, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(sigmoid);
        let r = self.req(a.0);
        self.push(v, r, Op::Sigmoid(a.0))
    }

    /// Row-wise stable softmax over a 2-D tensor, with an optional 0/1 keep
    /// mask of the same shape. A row whose keeps are all zero becomes an
    /// all-zero row instead of NaN.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<Tensor>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if let Some(k) = &keep {
            if k.shape() != x.shape() {
                return Err(Error::shape(format!(
                    "softmax keep mask {:?} vs input {:?}",
                    k.shape(),
                    x.shape()
                )));
            }
        }
        let v = softmax_rows_masked(x, keep.as_ref());
        let r = self.req(a.0);
        self.push(v, r, Op::SoftmaxRows { x: a.0 })
    }

    /// Row-wise layer normalization with affine parameters, `eps` inside
    /// the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (m, n) = (xv.rows(), xv.cols());
        if n == 0 {
            return Err(Error::shape("layer_norm on zero-width rows"));
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape(format!(
                "layer_norm affine [{}]/[{}] vs width {}",
                gv.len(),
                bv.len(),
                n
            )));
        }
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        let r = self.req(x.0) || self.req(gain.0) || self.req(bias.0);
        self.push(
            Tensor::new_unchecked(vec![m, n], out),
            r,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds },
        )
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::shape(format!("token id {id} outside table of {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let r = self.req(table.0);
        self.push(
            Tensor::new_unchecked(vec![ids.len(), d], out),
            r,
            Op::Gather { table: table.0, ids: ids.iter().map(|&i| i as usize).collect() },
        )
    }

    /// Select rows of a 2-D tensor by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (m, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            if i >= m {
                return Err(Error::shape(format!("row {i} outside tensor of {m} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let r = self.req(x.0);
        self.push(
            Tensor::new_unchecked(vec![rows.len(), d], out),
            r,
            Op::GatherRows { x: x.0, ids: rows.to_vec() },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} outside width {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let r = self.req(x.0);
        self.push(Tensor::new_unchecked(vec![m, len], out), r, Op::SliceCols { x: x.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of nothing"));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut width = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != m {
                return Err(Error::shape("concat_cols with differing row counts"));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let r = parts.iter().any(|p| self.req(p.0));
        self.push(
            Tensor::new_unchecked(vec![m, width], out),
            r,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        )
    }

    /// `[m,n] + [n]` broadcast add.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let b = &self.nodes[bias.0].value;
        let (m, n) = (t.rows(), t.cols());
        if b.len() != n {
            return Err(Error::shape(format!("bias [{}] vs width {n}", b.len())));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (v, bb) in t.row(i).iter().zip(b.data()) {
                out.push(v + bb);
            }
        }
        let r = self.req(x.0) || self.req(bias.0);
        self.push(Tensor::new_unchecked(vec![m, n], out), r, Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        let r = self.req(a.0);
        self.push(v, r, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let r = self.req(a.0);
        self.push(v, r, Op::MeanAll(a.0))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `pad`. All rows padded
    /// yields loss 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad: u32) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (m, vsize) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(Error::shape(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id != pad && id as usize >= vsize) {
            return Err(Error::shape(format!("target id {bad} outside vocab {vsize}")));
        }
        let probs = softmax_rows_masked(t, None);
        let mut n_active = 0usize;
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            n_active += 1;
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[target as usize];
        }
        let loss = if n_active == 0 { 0.0 } else { total / n_active as f64 };
        let r = self.req(logits.0);
        self.push(
            Tensor::scalar(loss),
            r,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), pad, probs, n_active },
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in
    /// [0,1], computed in the numerically stable logits form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "bce targets {:?} vs logits {:?}",
                targets.shape(),
                t.shape()
            )));
        }
        if t.is_empty() {
            return Err(Error::EmptyInput("bce on empty logits".into()));
        }
        let mut total = 0.0;
        for (&z, &y) in t.data().iter().zip(targets.data()) {
            total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let loss = total / t.len() as f64;
        let r = self.req(logits.0);
        self.push(Tensor::scalar(loss), r, Op::BceWithLogits { logits: logits.0, targets })
    }

    /// Run reverse-mode accumulation from a scalar `loss`. Consumes the
    /// tape: any further op or a second call is a graph error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on one tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward from non-scalar of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, delta: Tensor) {
        if !self.nodes[node].requires {
            return;
        }
        match &mut self.nodes[node].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.mul(&self.nodes[b].value).expect("shape");
                let db = g.mul(&self.nodes[a].value).expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let bv = &self.nodes[b].value;
                let da = g.zip_map(bv, |gg, y| gg / y).expect("shape");
                let y = &self.nodes[i].value;
                let gy = g.mul(y).expect("shape");
                let db = gy.zip_map(bv, |n, d| -n / d).expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, g.scale(c));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul_nt(&self.nodes[b].value).expect("shape");
                let db = self.nodes[a].value.matmul_tn(&g).expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::MatmulNt(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul(&self.nodes[b].value).expect("shape");
                let db = g.matmul_tn(&self.nodes[a].value).expect("shape");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                // subgradient 0 at the origin keeps singleton clusters NaN-free
                let da = g.zip_map(y, |gg, yy| if yy > 0.0 { 0.5 * gg / yy } else { 0.0 })
                    .expect("shape");
                self.accumulate(a, da);
            }
            Op::Square(a) => {
                let a = *a;
                let da = g.zip_map(&self.nodes[a].value, |gg, x| 2.0 * gg * x).expect("shape");
                self.accumulate(a, da);
            }
            Op::Gelu(a) => {
                let a = *a;
                let da = g.zip_map(&self.nodes[a].value, |gg, x| gg * gelu_deriv(x)).expect("shape");
                self.accumulate(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[i].value;
                let da = g.zip_map(y, |gg, yy| gg * yy * (1.0 - yy)).expect("shape");
                self.accumulate(a, da);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let p = &self.nodes[i].value;
                let (m, n) = (p.rows(), p.cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let prow = p.row(r);
                    let grow = g.row(r);
                    let dot: f64 = prow.iter().zip(grow).map(|(pp, gg)| pp * gg).sum();
                    for c in 0..n {
                        dx[r * n + c] = prow[c] * (grow[c] - dot);
                    }
                }
                self.accumulate(x, Tensor::new_unchecked(vec![m, n], dx));
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let xv = &self.nodes[x].value;
                let gv = &self.nodes[gain].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let xrow = xv.row(r);
                    let grow = g.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        xhat[c] = (xrow[c] - mean[r]) * rstd[r];
                        dxhat[c] = grow[c] * gv.data()[c];
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                        mean_dxhat += dxhat[c];
                        mean_dxhat_xhat += dxhat[c] * xhat[c];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for c in 0..n {
                        dx[r * n + c] =
                            rstd[r] * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(x, Tensor::new_unchecked(vec![m, n], dx));
                self.accumulate(gain, Tensor::new_unchecked(vec![n], dgain));
                self.accumulate(bias, Tensor::new_unchecked(vec![n], dbias));
            }
            Op::Gather { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let tv = &self.nodes[table].value;
                let (v, d) = (tv.rows(), tv.cols());
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    let grow = g.row(r);
                    for (slot, &gg) in dt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *slot += gg;
                    }
                }
                self.accumulate(table, Tensor::new_unchecked(vec![v, d], dt));
            }
            Op::GatherRows { x, ids } => {
                let (x, ids) = (*x, ids.clone());
                let xv = &self.nodes[x].value;
                let (m, d) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; m * d];
                for (r, &id) in ids.iter().enumerate() {
                    let grow = g.row(r);
                    for (slot, &gg) in dx[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *slot += gg;
                    }
                }
                self.accumulate(x, Tensor::new_unchecked(vec![m, d], dx));
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let xv = &self.nodes[x].value;
                let (m, n) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let grow = g.row(r);
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                self.accumulate(x, Tensor::new_unchecked(vec![m, n], dx));
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(p, Tensor::new_unchecked(vec![m, w], dp));
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let db = g.col_sums();
                self.accumulate(x, g);
                self.accumulate(bias, db);
            }
            Op::SumAll(a) => {
                let a = *a;
                let shape = self.nodes[a].value.shape().to_vec();
                self.accumulate(a, Tensor::filled(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a].value.len() as f64;
                let shape = self.nodes[a].value.shape().to_vec();
                self.accumulate(a, Tensor::filled(&shape, g.item() / n));
            }
            Op::CrossEntropy { logits, targets, pad, probs, n_active } => {
                let (logits, targets, pad, n_active) = (*logits, targets.clone(), *pad, *n_active);
                let probs = probs.clone();
                let (m, v) = (probs.rows(), probs.cols());
                let mut dl = vec![0.0; m * v];
                if n_active > 0 {
                    let scale = g.item() / n_active as f64;
                    for (r, &target) in targets.iter().enumerate() {
                        if target == pad {
                            continue;
                        }
                        let prow = probs.row(r);
                        for c in 0..v {
                            dl[r * v + c] = prow[c] * scale;
                        }
                        dl[r * v + target as usize] -= scale;
                    }
                }
                self.accumulate(logits, Tensor::new_unchecked(vec![m, v], dl));
            }
            Op::BceWithLogits { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let z = &self.nodes[logits].value;
                let n = z.len() as f64;
                let scale = g.item() / n;
                let dz = z
                    .zip_map(&targets, |zz, yy| (sigmoid(zz) - yy) * scale)
                    .expect("shape");
                self.accumulate(logits, dz);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows_masked(x: &Tensor, keep: Option<&Tensor>) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = x.row(r);
        let kept: Vec<usize> = match keep {
            Some(k) => (0..n).filter(|&c| k.row(r)[c] != 0.0).collect(),
            None => (0..n).collect(),
        };
        if kept.is_empty() {
            continue;
        }
        let max = kept.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &c in &kept {
            let e = (row[c] - max).exp();
            out[r * n + c] = e;
            sum += e;
        }
        for &c in &kept {
            out[r * n + c] /= sum;
        }
    }
    Tensor::new_unchecked(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_twice_is_graph_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Graph(_))));
        assert!(matches!(tape.square(x), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_from_non_scalar_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), false)
            .unwrap();
        let p = tape.softmax_rows(x, None).unwrap();
        let got = tape.value(p).data();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_7, 0.665_240_955_774_821_8];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![1000.0, 1000.0]).unwrap(), false)
            .unwrap();
        let p = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[2, 2], vec![5.0, 1.0, 3.0, 3.0]).unwrap(), false)
            .unwrap();
        let keep = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = tape.softmax_rows(x, Some(keep)).unwrap();
        assert_eq!(tape.value(p).row(0), &[0.0, 0.0]);
        assert_eq!(tape.value(p).row(1), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_hand_case() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap(), false)
            .unwrap();
        let gain = tape.leaf(Tensor::filled(&[2], 1.0), false).unwrap();
        let bias = tape.leaf(Tensor::zeros(&[2]), false).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] + 1.0).abs() < 1e-4);
        assert!((got[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 4], 7.0), false).unwrap();
        let gain = tape.leaf(Tensor::filled(&[4], 1.0), false).unwrap();
        let bias = tape.leaf(Tensor::zeros(&[4]), false).unwrap();
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[3, 7]), true).unwrap();
        let loss = tape.cross_entropy(logits, &[1, 2, 3], 0).unwrap();
        assert!((tape.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut data = vec![0.0; 4];
        data[2] = 50.0;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(&[1, 4], data).unwrap(), false).unwrap();
        let loss = tape.cross_entropy(logits, &[2], 0).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn cross_entropy_two_class_hand_case() {
        // logits [ln 3, ln 1] => p = [0.75, 0.25]; target 1 => loss = ln 4
        let mut tape = Tape::new();
        let logits = tape
            .leaf(Tensor::from_vec(&[1, 2], vec![(3.0f64).ln(), 0.0]).unwrap(), false)
            .unwrap();
        let loss = tape.cross_entropy(logits, &[1], 9).unwrap();
        assert!((tape.value(loss).item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_rows() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 4]), true).unwrap();
        let loss = tape.cross_entropy(logits, &[1, 0], 0).unwrap();
        assert!((tape.value(loss).item() - (4.0f64).ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // loss = sum(A·B); dA = 1·Bᵀ broadcast, dB = Aᵀ·1
        let a0 = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b0 = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(a0, true).unwrap();
        let b = tape.leaf(b0, true).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // y = x·x via mul(x, x): dy/dx = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }
}
