//! The five corruption functions for denoising pretraining and their
//! composition.
//!
//! Token masking (TM), token deletion (TD), and text infilling (TI) run per
//! sentence; sentence permutation (SP) reorders the sentence list; document
//! rotation (DR) rotates the flattened token stream. `corrupt` applies the
//! enabled functions in listed order and flattens at the end. Every
//! function is a pure map of (input, rng state).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::MASK_ID;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    TokenMask,
    TokenDelete,
    TextInfill,
    SentencePermute,
    DocumentRotate,
}

impl NoiseKind {
    pub fn code(&self) -> &'static str {
        match self {
            NoiseKind::TokenMask => "TM",
            NoiseKind::TokenDelete => "TD",
            NoiseKind::TextInfill => "TI",
            NoiseKind::SentencePermute => "SP",
            NoiseKind::DocumentRotate => "DR",
        }
    }

    pub fn parse(code: &str) -> Result<NoiseKind> {
        match code.trim().to_uppercase().as_str() {
            "TM" => Ok(NoiseKind::TokenMask),
            "TD" => Ok(NoiseKind::TokenDelete),
            "TI" => Ok(NoiseKind::TextInfill),
            "SP" => Ok(NoiseKind::SentencePermute),
            "DR" => Ok(NoiseKind::DocumentRotate),
            other => Err(Error::Config(format!(
                "unknown noising function `{other}` (expected TM/TD/TI/SP/DR)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Masking probability for TM, also the masked-token budget for TI.
    pub mask_rate: f64,
    pub delete_rate: f64,
    /// Poisson mean of TI span lengths; length-0 spans insert a `[MASK]`.
    pub infill_span_mean: f64,
    /// Functions to apply, in order.
    pub enabled: Vec<NoiseKind>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mask_rate: 0.15,
            delete_rate: 0.15,
            infill_span_mean: 3.0,
            enabled: vec![NoiseKind::TextInfill, NoiseKind::SentencePermute],
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("mask_rate", self.mask_rate), ("delete_rate", self.delete_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0,1]")));
            }
        }
        if self.infill_span_mean <= 0.0 {
            return Err(Error::Config(format!(
                "infill_span_mean {} must be positive",
                self.infill_span_mean
            )));
        }
        Ok(())
    }
}

/// TM: each position independently becomes `[MASK]` with probability `rate`.
pub fn token_mask(tokens: &[u32], rate: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| if rng.gen::<f64>() < rate { MASK_ID } else { t })
        .collect()
}

/// TD: each position independently dropped with probability `rate`; the
/// survivors keep their relative order.
pub fn token_delete(tokens: &[u32], rate: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    tokens
        .iter()
        .filter(|_| rng.gen::<f64>() >= rate)
        .copied()
        .collect()
}

/// A sampled infill span: `(start, len)` in input positions. `len == 0`
/// inserts a `[MASK]` before `start` without consuming tokens.
pub type Span = (usize, usize);

/// Sample non-overlapping TI spans left to right. Span starts fire with
/// probability `mask_budget / span_mean` so the expected masked fraction
/// tracks the budget; lengths are Poisson(`span_mean`) capped at the
/// remaining suffix.
pub fn sample_infill_spans(
    len: usize,
    span_mean: f64,
    mask_budget: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Span> {
    if len == 0 || mask_budget <= 0.0 {
        return Vec::new();
    }
    let p_start = (mask_budget / span_mean.max(1e-9)).clamp(0.0, 1.0);
    let poisson = Poisson::new(span_mean).expect("positive span mean");
    let mut spans = Vec::new();
    let mut i = 0usize;
    while i < len {
        if rng.gen::<f64>() < p_start {
            let span_len = (poisson.sample(rng) as usize).min(len - i);
            spans.push((i, span_len));
            i += span_len.max(1);
        } else {
            i += 1;
        }
    }
    spans
}

/// Replace each span with exactly one `[MASK]`; unspanned tokens pass
/// through unchanged and in order. Spans must be sorted and disjoint.
pub fn infill_spans(tokens: &[u32], spans: &[Span]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + spans.len());
    let mut next_span = 0usize;
    let mut i = 0usize;
    while i < tokens.len() {
        if next_span < spans.len() && spans[next_span].0 == i {
            let (_, span_len) = spans[next_span];
            next_span += 1;
            out.push(MASK_ID);
            if span_len == 0 {
                out.push(tokens[i]);
                i += 1;
            } else {
                i += span_len;
            }
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    out
}

/// TI: sample spans and replace each with a single `[MASK]`.
pub fn text_infill(
    tokens: &[u32],
    span_mean: f64,
    mask_budget: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let spans = sample_infill_spans(tokens.len(), span_mean, mask_budget, rng);
    infill_spans(tokens, &spans)
}

/// SP: Fisher-Yates shuffle of the sentence list.
pub fn sentence_permute(sentences: &[Vec<u32>], rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let mut out = sentences.to_vec();
    out.shuffle(rng);
    out
}

/// Cyclic rotation by a fixed pivot: `tokens[p..] ++ tokens[..p]`.
pub fn rotate_by(tokens: &[u32], pivot: usize) -> Vec<u32> {
    let pivot = pivot % tokens.len().max(1);
    let mut out = Vec::with_capacity(tokens.len());
    out.extend_from_slice(&tokens[pivot..]);
    out.extend_from_slice(&tokens[..pivot]);
    out
}

/// DR: rotate by a uniformly chosen pivot so the model must find the true
/// start of the text.
pub fn document_rotate(tokens: &[u32], rng: &mut ChaCha8Rng) -> Vec<u32> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let pivot = rng.gen_range(0..tokens.len());
    rotate_by(tokens, pivot)
}

/// Apply the enabled functions in listed order over the sentence structure
/// and return the flattened corrupted token stream. DR collapses sentence
/// structure; later sentence-level functions then see one pseudo-sentence.
pub fn corrupt_with_rng(
    sentences: &[Vec<u32>],
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let mut current: Vec<Vec<u32>> = sentences.to_vec();
    for kind in &cfg.enabled {
        current = match kind {
            NoiseKind::TokenMask => current
                .iter()
                .map(|s| token_mask(s, cfg.mask_rate, rng))
                .collect(),
            NoiseKind::TokenDelete => current
                .iter()
                .map(|s| token_delete(s, cfg.delete_rate, rng))
                .collect(),
            NoiseKind::TextInfill => current
                .iter()
                .map(|s| text_infill(s, cfg.infill_span_mean, cfg.mask_rate, rng))
                .collect(),
            NoiseKind::SentencePermute => sentence_permute(&current, rng),
            NoiseKind::DocumentRotate => {
                vec![document_rotate(&current.concat(), rng)]
            }
        };
    }
    current.concat()
}

/// [`corrupt_with_rng`] with a fresh rng from `cfg.seed`.
pub fn corrupt(sentences: &[Vec<u32>], cfg: &NoiseConfig) -> Vec<u32> {
    corrupt_with_rng(sentences, cfg, &mut seeded(cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn mask_rate_extremes() {
        let tokens = [10, 11, 12];
        let mut rng = seeded(1);
        assert_eq!(token_mask(&tokens, 0.0, &mut rng), tokens);
        assert_eq!(token_mask(&tokens, 1.0, &mut rng), vec![MASK_ID; 3]);
    }

    #[test]
    fn mask_preserves_length_and_is_deterministic() {
        let tokens: Vec<u32> = (10..60).collect();
        let run = || token_mask(&tokens, 0.5, &mut seeded(7));
        assert_eq!(run().len(), tokens.len());
        assert_eq!(run(), run());
    }

    #[test]
    fn delete_rate_extremes() {
        let tokens = [10, 11, 12];
        let mut rng = seeded(2);
        assert_eq!(token_delete(&tokens, 0.0, &mut rng), tokens);
        assert!(token_delete(&tokens, 1.0, &mut rng).is_empty());
    }

    fn is_subsequence(needle: &[u32], haystack: &[u32]) -> bool {
        let mut it = haystack.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }

    #[test]
    fn delete_yields_a_subsequence() {
        let tokens: Vec<u32> = (10..40).collect();
        for seed in 0..20 {
            let out = token_delete(&tokens, 0.4, &mut seeded(seed));
            assert!(is_subsequence(&out, &tokens));
        }
    }

    #[test]
    fn infill_span_replacement_hand_cases() {
        // span covering [b, c] in [a, b, c, d] -> [a, MASK, d]
        assert_eq!(infill_spans(&[10, 11, 12, 13], &[(1, 2)]), vec![10, MASK_ID, 13]);
        // no spans -> identity
        assert_eq!(infill_spans(&[10, 11], &[]), vec![10, 11]);
        // full-sequence span -> [MASK]
        assert_eq!(infill_spans(&[10, 11, 12], &[(0, 3)]), vec![MASK_ID]);
        // zero-length span inserts a MASK without consuming
        assert_eq!(infill_spans(&[10, 11], &[(1, 0)]), vec![10, MASK_ID, 11]);
    }

    #[test]
    fn infill_survivors_keep_order_one_mask_per_span() {
        let tokens: Vec<u32> = (100..164).collect();
        for seed in 0..50 {
            let mut rng = seeded(seed);
            let spans = sample_infill_spans(tokens.len(), 3.0, 0.3, &mut rng);
            let out = infill_spans(&tokens, &spans);
            let masks = out.iter().filter(|&&t| t == MASK_ID).count();
            assert_eq!(masks, spans.len());
            let survivors: Vec<u32> = out.iter().copied().filter(|&t| t != MASK_ID).collect();
            assert!(is_subsequence(&survivors, &tokens));
            // spans sorted and non-overlapping
            for w in spans.windows(2) {
                assert!(w[1].0 >= w[0].0 + w[0].1.max(1));
            }
        }
    }

    #[test]
    fn permute_preserves_multiset() {
        let sentences = vec![vec![1, 2], vec![3], vec![4, 5, 6]];
        let mut rng = seeded(9);
        let out = sentence_permute(&sentences, &mut rng);
        let mut a = sentences.clone();
        let mut b = out.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        // single sentence is identity
        assert_eq!(sentence_permute(&sentences[..1], &mut rng), &sentences[..1]);
    }

    #[test]
    fn permute_is_seed_deterministic() {
        let sentences: Vec<Vec<u32>> = (0..8).map(|i| vec![i]).collect();
        let run = |seed| sentence_permute(&sentences, &mut seeded(seed));
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn rotation_definition_and_inverse() {
        assert_eq!(rotate_by(&[1, 2, 3], 0), vec![1, 2, 3]);
        assert_eq!(rotate_by(&[1, 2, 3], 1), vec![2, 3, 1]);
        let tokens: Vec<u32> = (0..17).collect();
        for p in 0..tokens.len() {
            let back = rotate_by(&rotate_by(&tokens, p), tokens.len() - p);
            assert_eq!(back, tokens);
        }
    }

    #[test]
    fn corrupt_with_nothing_enabled_is_identity() {
        let sentences = vec![vec![10, 11], vec![12]];
        let cfg = NoiseConfig { enabled: vec![], ..NoiseConfig::default() };
        assert_eq!(corrupt(&sentences, &cfg), vec![10, 11, 12]);
    }

    #[test]
    fn corrupt_is_seed_deterministic() {
        let sentences: Vec<Vec<u32>> = (0..5).map(|i| (10 * i..10 * i + 7).collect()).collect();
        let cfg = NoiseConfig { seed: 42, ..NoiseConfig::default() };
        assert_eq!(corrupt(&sentences, &cfg), corrupt(&sentences, &cfg));
        let other = NoiseConfig { seed: 43, ..cfg.clone() };
        assert_ne!(corrupt(&sentences, &cfg), corrupt(&sentences, &other));
    }

    #[test]
    fn default_config_applies_ti_and_sp() {
        let cfg = NoiseConfig::default();
        assert_eq!(cfg.enabled, vec![NoiseKind::TextInfill, NoiseKind::SentencePermute]);
        cfg.validate().unwrap();
    }

    #[test]
    fn noise_kind_codes_round_trip() {
        for kind in [
            NoiseKind::TokenMask,
            NoiseKind::TokenDelete,
            NoiseKind::TextInfill,
            NoiseKind::SentencePermute,
            NoiseKind::DocumentRotate,
        ] {
            assert_eq!(NoiseKind::parse(kind.code()).unwrap(), kind);
        }
        assert!(NoiseKind::parse("XX").is_err());
    }
}
