//! The clustering transformer: cluster generation, cluster normalization,
//! and cluster shrinking applied to encoder context vectors between the
//! encoder and the decoder.
//!
//! Rows of the memory carry a salient / non-salient label inherited from
//! their sentence. Generation rescales salient rows by `w` (with `w = -1`
//! reflecting them through the origin, which flips the sign of every
//! cosine against non-salient rows exactly). Normalization standardizes
//! each cluster with its own mean and deviation. Shrinking interpolates
//! every member toward its cluster mean, keeping the fraction `n/(m+n)` of
//! its offset. All stages are built from tape primitives, so gradients
//! flow through the cluster statistics themselves; the labels are
//! constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, Parameters, Session};
use crate::tensor::Tensor;

/// Whether pipeline rows are individual tokens or per-sentence mean
/// vectors (whose deltas are broadcast back to the tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    SentenceMean,
}

/// Deviation in cluster normalization: per dimension, or one scalar over
/// the flattened cluster offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    PerDim,
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauConfig {
    /// Scaling weight for salient rows in cluster generation.
    pub w: f64,
    /// Shrink ratio numerator: larger `m` pulls members closer to the mean.
    pub m: u32,
    /// Shrink ratio denominator.
    pub n: u32,
    /// Additive guard on the deviation in normalization.
    pub epsilon: f64,
    pub normalize: bool,
    pub shrink: bool,
    /// Identity-initialized affine map after the geometric stages.
    pub learned_affine: bool,
    pub granularity: Granularity,
    pub sigma_mode: SigmaMode,
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig {
            w: -1.0,
            m: 3,
            n: 1,
            epsilon: 1e-5,
            normalize: true,
            shrink: true,
            learned_affine: false,
            granularity: Granularity::Token,
            sigma_mode: SigmaMode::PerDim,
        }
    }
}

impl TauConfig {
    /// Configuration under which the whole pipeline is a bit-exact identity.
    pub fn neutral() -> TauConfig {
        TauConfig {
            w: 1.0,
            normalize: false,
            shrink: false,
            learned_affine: false,
            ..TauConfig::default()
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.w == 1.0 && !self.normalize && !self.shrink && !self.learned_affine
    }

    /// Fraction of the offset to the cluster mean that shrinking retains.
    pub fn shrink_keep(&self) -> f64 {
        self.n as f64 / (self.m + self.n) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::Config(format!("shrink ratio {}:{} needs m,n >= 1", self.m, self.n)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !self.w.is_finite() {
            return Err(Error::Config("w must be finite".into()));
        }
        Ok(())
    }
}

/// Per-sentence cluster labels plus the token count of each sentence,
/// which together assign every memory row to a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceClusters {
    /// `true` = salient.
    pub labels: Vec<bool>,
    pub token_counts: Vec<usize>,
}

impl SentenceClusters {
    pub fn new(labels: Vec<bool>, token_counts: Vec<usize>) -> Result<SentenceClusters> {
        if labels.len() != token_counts.len() {
            return Err(Error::shape(format!(
                "{} labels for {} sentences",
                labels.len(),
                token_counts.len()
            )));
        }
        Ok(SentenceClusters { labels, token_counts })
    }

    pub fn total_tokens(&self) -> usize {
        self.token_counts.iter().sum()
    }

    /// Each token inherits its sentence's label.
    pub fn token_labels(&self) -> Vec<bool> {
        self.labels
            .iter()
            .zip(&self.token_counts)
            .flat_map(|(&l, &c)| std::iter::repeat(l).take(c))
            .collect()
    }
}

/// Identity-initialized affine parameters for the optional learned stage.
#[derive(Debug, Clone)]
pub struct TauAffineIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TauAffineIds {
    pub fn register(params: &mut Parameters, d_model: usize) -> TauAffineIds {
        TauAffineIds {
            weight: params.register("tau.affine.weight", Tensor::eye(d_model)),
            bias: params.register("tau.affine.bias", Tensor::zeros(&[d_model])),
        }
    }
}

fn check_labels(s: &Session, memory: Var, row_labels: &[bool]) -> Result<(usize, usize)> {
    let t = s.value(memory);
    let (rows, d) = (t.rows(), t.cols());
    if row_labels.len() != rows {
        return Err(Error::shape(format!(
            "{} row labels for memory of {rows} rows",
            row_labels.len()
        )));
    }
    Ok((rows, d))
}

/// 0/1 membership matrix `[rows, 2]`, column 0 = salient.
fn membership(row_labels: &[bool]) -> Tensor {
    let mut data = vec![0.0; row_labels.len() * 2];
    for (i, &salient) in row_labels.iter().enumerate() {
        data[i * 2 + if salient { 0 } else { 1 }] = 1.0;
    }
    Tensor::new_unchecked(vec![row_labels.len(), 2], data)
}

/// Averaging matrix `[2, rows]`: membershipᵀ with rows scaled by 1/count.
/// An empty cluster keeps an all-zero row, which no memory row selects.
fn mean_operator(row_labels: &[bool]) -> Tensor {
    let rows = row_labels.len();
    let c0 = row_labels.iter().filter(|&&l| l).count();
    let c1 = rows - c0;
    let mut data = vec![0.0; 2 * rows];
    for (i, &salient) in row_labels.iter().enumerate() {
        if salient {
            data[i] = 1.0 / c0.max(1) as f64;
        } else {
            data[rows + i] = 1.0 / c1.max(1) as f64;
        }
    }
    Tensor::new_unchecked(vec![2, rows], data)
}

/// Per-cluster mean rows aligned to the memory: `E · (M_mean · x)`.
fn cluster_mean_rows(s: &mut Session, x: Var, row_labels: &[bool]) -> Result<Var> {
    let mean_op = s.constant(mean_operator(row_labels))?;
    let e = s.constant(membership(row_labels))?;
    let mu = s.tape.matmul(mean_op, x)?;
    s.tape.matmul(e, mu)
}

/// Cluster generation: salient rows scaled by `w`, the rest unchanged.
pub fn cluster_generate(s: &mut Session, memory: Var, row_labels: &[bool], w: f64) -> Result<Var> {
    let (rows, d) = check_labels(s, memory, row_labels)?;
    let mut scale = vec![1.0; rows * d];
    for (i, &salient) in row_labels.iter().enumerate() {
        if salient {
            scale[i * d..(i + 1) * d].fill(w);
        }
    }
    let scale = s.constant(Tensor::new_unchecked(vec![rows, d], scale))?;
    s.tape.mul(memory, scale)
}

/// Cluster normalization: each present cluster is standardized with its own
/// mean and deviation (population statistics over its rows), with
/// `epsilon` guarding zero deviations.
pub fn cluster_normalize(
    s: &mut Session,
    memory: Var,
    row_labels: &[bool],
    epsilon: f64,
    sigma_mode: SigmaMode,
) -> Result<Var> {
    let (_, d) = check_labels(s, memory, row_labels)?;
    let mean_op = s.constant(mean_operator(row_labels))?;
    let e = s.constant(membership(row_labels))?;
    let mu = s.tape.matmul(mean_op, memory)?;
    let mu_rows = s.tape.matmul(e, mu)?;
    let centered = s.tape.sub(memory, mu_rows)?;
    let sq = s.tape.square(centered)?;
    let var = s.tape.matmul(mean_op, sq)?;
    let sigma_full = match sigma_mode {
        SigmaMode::PerDim => s.tape.sqrt(var)?,
        SigmaMode::Scalar => {
            let avg_cols = s.constant(Tensor::filled(&[d, 1], 1.0 / d as f64))?;
            let var_scalar = s.tape.matmul(var, avg_cols)?;
            let sigma = s.tape.sqrt(var_scalar)?;
            let ones_row = s.constant(Tensor::filled(&[1, d], 1.0))?;
            s.tape.matmul(sigma, ones_row)?
        }
    };
    let sigma_rows = s.tape.matmul(e, sigma_full)?;
    let denom = s.tape.add_scalar(sigma_rows, epsilon)?;
    s.tape.div(centered, denom)
}

/// Cluster shrinking: `v' = mu + (n/(m+n)) * (v - mu)` with `mu` the mean
/// of the row's cluster; `m = n = 1` moves members to the midpoint.
pub fn cluster_shrink(
    s: &mut Session,
    memory: Var,
    row_labels: &[bool],
    m: u32,
    n: u32,
) -> Result<Var> {
    check_labels(s, memory, row_labels)?;
    if m < 1 || n < 1 {
        return Err(Error::Config(format!("shrink ratio {m}:{n} needs m,n >= 1")));
    }
    let keep = n as f64 / (m + n) as f64;
    let mu_rows = cluster_mean_rows(s, memory, row_labels)?;
    let centered = s.tape.sub(memory, mu_rows)?;
    let scaled = s.tape.scale(centered, keep)?;
    s.tape.add(mu_rows, scaled)
}

/// Values captured after each stage, for projection plots. Disabled stages
/// repeat the previous value.
#[derive(Debug, Clone)]
pub struct TauStages {
    pub input: Tensor,
    pub generated: Tensor,
    pub normalized: Tensor,
    pub shrunk: Tensor,
    /// Label of each pipeline row (tokens or pooled sentences).
    pub row_labels: Vec<bool>,
}

fn pipeline(
    s: &mut Session,
    x: Var,
    row_labels: &[bool],
    cfg: &TauConfig,
    affine: Option<&TauAffineIds>,
) -> Result<(Var, TauStages)> {
    let input = s.value(x).clone();
    let generated_var = if cfg.w != 1.0 {
        cluster_generate(s, x, row_labels, cfg.w)?
    } else {
        check_labels(s, x, row_labels)?;
        x
    };
    let generated = s.value(generated_var).clone();
    let normalized_var = if cfg.normalize {
        cluster_normalize(s, generated_var, row_labels, cfg.epsilon, cfg.sigma_mode)?
    } else {
        generated_var
    };
    let normalized = s.value(normalized_var).clone();
    let shrunk_var = if cfg.shrink {
        cluster_shrink(s, normalized_var, row_labels, cfg.m, cfg.n)?
    } else {
        normalized_var
    };
    let shrunk = s.value(shrunk_var).clone();
    let out = if cfg.learned_affine {
        let ids = affine.ok_or_else(|| {
            Error::Config("learned_affine enabled but no affine parameters supplied".into())
        })?;
        let w = s.param(ids.weight)?;
        let b = s.param(ids.bias)?;
        let mapped = s.tape.matmul(shrunk_var, w)?;
        s.tape.add_bias(mapped, b)?
    } else {
        shrunk_var
    };
    let stages = TauStages { input, generated, normalized, shrunk, row_labels: row_labels.to_vec() };
    Ok((out, stages))
}

/// Apply the full clustering transformer to encoder memory and capture the
/// per-stage values. Output shape equals input shape for every config; a
/// neutral config returns the input variable untouched.
pub fn apply_tau_traced(
    s: &mut Session,
    memory: Var,
    clusters: &SentenceClusters,
    cfg: &TauConfig,
    affine: Option<&TauAffineIds>,
) -> Result<(Var, TauStages)> {
    cfg.validate()?;
    let mem_rows = s.value(memory).rows();
    if clusters.total_tokens() != mem_rows {
        return Err(Error::shape(format!(
            "assignment covers {} tokens but memory has {mem_rows} rows",
            clusters.total_tokens()
        )));
    }
    match cfg.granularity {
        Granularity::Token => pipeline(s, memory, &clusters.token_labels(), cfg, affine),
        Granularity::SentenceMean => {
            let n_sent = clusters.labels.len();
            let mut pool = vec![0.0; n_sent * mem_rows];
            let mut expand = vec![0.0; mem_rows * n_sent];
            let mut offset = 0;
            for (si, &count) in clusters.token_counts.iter().enumerate() {
                for t in offset..offset + count {
                    pool[si * mem_rows + t] = 1.0 / count.max(1) as f64;
                    expand[t * n_sent + si] = 1.0;
                }
                offset += count;
            }
            let pool = s.constant(Tensor::new_unchecked(vec![n_sent, mem_rows], pool))?;
            let expand = s.constant(Tensor::new_unchecked(vec![mem_rows, n_sent], expand))?;
            let pooled = s.tape.matmul(pool, memory)?;
            let (transformed, stages) = pipeline(s, pooled, &clusters.labels, cfg, affine)?;
            let delta = s.tape.sub(transformed, pooled)?;
            let delta_rows = s.tape.matmul(expand, delta)?;
            let out = s.tape.add(memory, delta_rows)?;
            Ok((out, stages))
        }
    }
}

/// [`apply_tau_traced`] without the stage capture.
pub fn apply_tau(
    s: &mut Session,
    memory: Var,
    clusters: &SentenceClusters,
    cfg: &TauConfig,
    affine: Option<&TauAffineIds>,
) -> Result<Var> {
    apply_tau_traced(s, memory, clusters, cfg, affine).map(|(v, _)| v)
}

/// Plain-tensor convenience wrapper (no learned affine).
pub fn apply_tau_tensor(
    memory: &Tensor,
    clusters: &SentenceClusters,
    cfg: &TauConfig,
) -> Result<Tensor> {
    stage_tensors(memory, clusters, cfg).map(|(out, _)| out)
}

/// Run the pipeline on plain tensors and capture stages; used by the
/// geometry tests and the projection plotter.
pub fn stage_tensors(
    memory: &Tensor,
    clusters: &SentenceClusters,
    cfg: &TauConfig,
) -> Result<(Tensor, TauStages)> {
    if cfg.learned_affine {
        return Err(Error::Config(
            "tensor-level tau cannot apply a learned affine; use apply_tau with parameters".into(),
        ));
    }
    let params = Parameters::new();
    let mut s = Session::eval(&params);
    let mem = s.constant(memory.clone())?;
    let (out, stages) = apply_tau_traced(&mut s, mem, clusters, cfg, None)?;
    Ok((s.value(out).clone(), stages))
}
