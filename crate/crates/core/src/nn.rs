//! Transformer building blocks: embeddings, multi-head attention,
//! post-norm encoder/decoder stacks.
//!
//! Everything here is expressed as tape ops over a [`Session`], so one code
//! path serves training, inference, and finite-difference checking.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{normal_init, xavier_init, ParamId, Parameters, Session};
use crate::tensor::Tensor;

/// Epsilon inside every layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_positions: 256,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnParams {
    pub(crate) fn register(
        params: &mut Parameters,
        prefix: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttnParams {
        let mut w = |suffix: &str| {
            params.register(&format!("{prefix}.{suffix}"), xavier_init(rng, &[d, d]))
        };
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |suffix: &str| params.register(&format!("{prefix}.{suffix}"), Tensor::zeros(&[d]));
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        AttnParams { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

#[derive(Debug, Clone)]
pub struct LnParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LnParams {
    pub(crate) fn register(params: &mut Parameters, prefix: &str, d: usize) -> LnParams {
        LnParams {
            gain: params.register(&format!("{prefix}.gain"), Tensor::filled(&[d], 1.0)),
            bias: params.register(&format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FfParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfParams {
    pub(crate) fn register(
        params: &mut Parameters,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> FfParams {
        FfParams {
            w1: params.register(&format!("{prefix}.w1"), xavier_init(rng, &[d, d_ff])),
            b1: params.register(&format!("{prefix}.b1"), Tensor::zeros(&[d_ff])),
            w2: params.register(&format!("{prefix}.w2"), xavier_init(rng, &[d_ff, d])),
            b2: params.register(&format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncLayer {
    pub attn: AttnParams,
    pub ln1: LnParams,
    pub ff: FfParams,
    pub ln2: LnParams,
}

impl EncLayer {
    pub(crate) fn register(
        params: &mut Parameters,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> EncLayer {
        EncLayer {
            attn: AttnParams::register(params, &format!("{prefix}.attn"), d, rng),
            ln1: LnParams::register(params, &format!("{prefix}.ln1"), d),
            ff: FfParams::register(params, &format!("{prefix}.ff"), d, d_ff, rng),
            ln2: LnParams::register(params, &format!("{prefix}.ln2"), d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecLayer {
    pub self_attn: AttnParams,
    pub ln1: LnParams,
    pub cross_attn: AttnParams,
    pub ln2: LnParams,
    pub ff: FfParams,
    pub ln3: LnParams,
}

impl DecLayer {
    pub(crate) fn register(
        params: &mut Parameters,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> DecLayer {
        DecLayer {
            self_attn: AttnParams::register(params, &format!("{prefix}.self_attn"), d, rng),
            ln1: LnParams::register(params, &format!("{prefix}.ln1"), d),
            cross_attn: AttnParams::register(params, &format!("{prefix}.cross_attn"), d, rng),
            ln2: LnParams::register(params, &format!("{prefix}.ln2"), d),
            ff: FfParams::register(params, &format!("{prefix}.ff"), d, d_ff, rng),
            ln3: LnParams::register(params, &format!("{prefix}.ln3"), d),
        }
    }
}

/// Parameter handles for one encoder-decoder model with tied input/output
/// token embeddings.
#[derive(Debug, Clone)]
pub struct Seq2SeqIds {
    pub tok_emb: ParamId,
    pub enc_layers: Vec<EncLayer>,
    pub dec_layers: Vec<DecLayer>,
}

impl Seq2SeqIds {
    /// Register all parameters in a deterministic order. The same config
    /// and vocab size always produce the same names and shapes, which is
    /// what lets checkpoints restore by name.
    pub fn register(
        params: &mut Parameters,
        cfg: &TransformerConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Seq2SeqIds {
        let tok_emb = params.register("tok_emb", normal_init(rng, &[vocab_size, cfg.d_model], 0.1));
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|i| EncLayer::register(params, &format!("enc.{i}"), cfg.d_model, cfg.d_ff, rng))
            .collect();
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|i| DecLayer::register(params, &format!("dec.{i}"), cfg.d_model, cfg.d_ff, rng))
            .collect();
        Seq2SeqIds { tok_emb, enc_layers, dec_layers }
    }
}

/// Parameter-free sinusoidal position encodings, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for k in 0..d {
            let pair = (k / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[pos * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new_unchecked(vec![len, d], data)
}

/// Lower-triangular 0/1 keep mask for causal self-attention.
pub fn causal_keep(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::new_unchecked(vec![n, n], data)
}

/// Scaled dot-product attention over already-projected inputs: heads are
/// split column-wise, `softmax(q·kᵀ/√d_head)` is applied per head with an
/// optional `[q_len, k_len]` keep mask, and head outputs are concatenated.
/// A fully masked query row contributes a zero output row.
pub fn scaled_dot_attention(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    keep: Option<&Tensor>,
) -> Result<Var> {
    let d = s.value(q).cols();
    if d % n_heads != 0 {
        return Err(Error::shape(format!("width {d} not divisible by {n_heads} heads")));
    }
    if s.value(k).cols() != d || s.value(v).cols() != d {
        return Err(Error::shape("q/k/v width mismatch"));
    }
    if s.value(k).rows() != s.value(v).rows() {
        return Err(Error::shape("k/v row count mismatch"));
    }
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = s.tape.slice_cols(q, h * d_head, d_head)?;
        let kh = s.tape.slice_cols(k, h * d_head, d_head)?;
        let vh = s.tape.slice_cols(v, h * d_head, d_head)?;
        let scores = s.tape.matmul_nt(qh, kh)?;
        let scaled = s.tape.scale(scores, scale)?;
        let probs = s.tape.softmax_rows(scaled, keep.cloned())?;
        heads.push(s.tape.matmul(probs, vh)?);
    }
    s.tape.concat_cols(&heads)
}

/// Full multi-head attention block: input projections, scaled dot-product
/// attention, output projection.
pub fn attention_block(
    s: &mut Session,
    attn: &AttnParams,
    query_input: Var,
    kv_input: Var,
    n_heads: usize,
    keep: Option<&Tensor>,
) -> Result<Var> {
    let wq = s.param(attn.wq)?;
    let bq = s.param(attn.bq)?;
    let wk = s.param(attn.wk)?;
    let bk = s.param(attn.bk)?;
    let wv = s.param(attn.wv)?;
    let bv = s.param(attn.bv)?;
    let q = s.tape.matmul(query_input, wq)?;
    let q = s.tape.add_bias(q, bq)?;
    let k = s.tape.matmul(kv_input, wk)?;
    let k = s.tape.add_bias(k, bk)?;
    let v = s.tape.matmul(kv_input, wv)?;
    let v = s.tape.add_bias(v, bv)?;
    let mixed = scaled_dot_attention(s, q, k, v, n_heads, keep)?;
    let wo = s.param(attn.wo)?;
    let bo = s.param(attn.bo)?;
    let out = s.tape.matmul(mixed, wo)?;
    s.tape.add_bias(out, bo)
}

fn feed_forward(s: &mut Session, ff: &FfParams, x: Var) -> Result<Var> {
    let w1 = s.param(ff.w1)?;
    let b1 = s.param(ff.b1)?;
    let w2 = s.param(ff.w2)?;
    let b2 = s.param(ff.b2)?;
    let h = s.tape.matmul(x, w1)?;
    let h = s.tape.add_bias(h, b1)?;
    let h = s.tape.gelu(h)?;
    let out = s.tape.matmul(h, w2)?;
    s.tape.add_bias(out, b2)
}

fn layer_norm(s: &mut Session, ln: &LnParams, x: Var) -> Result<Var> {
    let gain = s.param(ln.gain)?;
    let bias = s.param(ln.bias)?;
    s.tape.layer_norm(x, gain, bias, LN_EPS)
}

fn residual_sublayer(s: &mut Session, x: Var, sub: Var, ln: &LnParams) -> Result<Var> {
    let dropped = s.dropout(sub)?;
    let sum = s.tape.add(x, dropped)?;
    layer_norm(s, ln, sum)
}

/// One post-norm encoder layer.
pub fn encoder_layer(
    s: &mut Session,
    layer: &EncLayer,
    x: Var,
    n_heads: usize,
    keep: Option<&Tensor>,
) -> Result<Var> {
    let attn = attention_block(s, &layer.attn, x, x, n_heads, keep)?;
    let x = residual_sublayer(s, x, attn, &layer.ln1)?;
    let ff = feed_forward(s, &layer.ff, x)?;
    residual_sublayer(s, x, ff, &layer.ln2)
}

/// Token embedding + sinusoidal positions + dropout, checking length
/// against `max_positions`.
pub fn embed(
    s: &mut Session,
    tok_emb: ParamId,
    tokens: &[u32],
    d_model: usize,
    max_positions: usize,
    positional: bool,
) -> Result<Var> {
    if tokens.is_empty() || tokens.len() > max_positions {
        return Err(Error::Length { len: tokens.len(), max: max_positions });
    }
    let table = s.param(tok_emb)?;
    let emb = s.tape.gather(table, tokens)?;
    let emb = s.tape.scale(emb, (d_model as f64).sqrt())?;
    let x = if positional {
        let pos = s.constant(sinusoidal_positions(tokens.len(), d_model))?;
        s.tape.add(emb, pos)?
    } else {
        emb
    };
    s.dropout(x)
}

/// Bidirectional encoder: `[seq] tokens -> [seq, d_model]` memory.
pub fn encoder_forward(
    s: &mut Session,
    ids: &Seq2SeqIds,
    cfg: &TransformerConfig,
    tokens: &[u32],
) -> Result<Var> {
    let mut x = embed(s, ids.tok_emb, tokens, cfg.d_model, cfg.max_positions, true)?;
    for layer in &ids.enc_layers {
        x = encoder_layer(s, layer, x, cfg.n_heads, None)?;
    }
    Ok(x)
}

/// Auto-regressive decoder: causal self-attention plus cross-attention
/// over `memory`; returns `[seq, vocab]` logits through the tied embedding.
pub fn decoder_forward(
    s: &mut Session,
    ids: &Seq2SeqIds,
    cfg: &TransformerConfig,
    tokens: &[u32],
    memory: Var,
) -> Result<Var> {
    if s.value(memory).cols() != cfg.d_model {
        return Err(Error::shape(format!(
            "memory width {} vs d_model {}",
            s.value(memory).cols(),
            cfg.d_model
        )));
    }
    let mut x = embed(s, ids.tok_emb, tokens, cfg.d_model, cfg.max_positions, true)?;
    let causal = causal_keep(tokens.len());
    for layer in &ids.dec_layers {
        let self_attn = attention_block(s, &layer.self_attn, x, x, cfg.n_heads, Some(&causal))?;
        x = residual_sublayer(s, x, self_attn, &layer.ln1)?;
        let cross = attention_block(s, &layer.cross_attn, x, memory, cfg.n_heads, None)?;
        x = residual_sublayer(s, x, cross, &layer.ln2)?;
        let ff = feed_forward(s, &layer.ff, x)?;
        x = residual_sublayer(s, x, ff, &layer.ln3)?;
    }
    let table = s.param(ids.tok_emb)?;
    s.tape.matmul_nt(x, table)
}
