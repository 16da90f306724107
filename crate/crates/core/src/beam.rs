//! Beam search decoding with no-repeat n-gram blocking and length
//! normalization.
//!
//! The search is written against [`StepScorer`], so the same machinery
//! decodes the real model, rigged test scorers, and the exhaustive
//! enumeration oracle in the acceptance suite.
//!
//! Step rule: all (beam, allowed token) candidates are ranked by raw
//! cumulative log-probability with a deterministic (beam index, token id)
//! tie-break; the top `beams` survive. A candidate that emits EOS retires
//! to the finished pool, shrinking the active set, so beam-1 reproduces
//! greedy decoding exactly. Finished hypotheses compete on
//! `score / length^alpha`.

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beams: usize,
    /// Maximum number of generated content tokens.
    pub max_length: usize,
    /// Block continuations that would repeat an n-gram of this size.
    pub no_repeat_ngram: Option<usize>,
    /// Stop as soon as `beams` finished hypotheses exist instead of
    /// draining every active beam.
    pub early_stopping: bool,
    /// EOS is banned until this many content tokens exist.
    pub min_length: usize,
    /// Exponent in the `score / length^alpha` comparison of finished
    /// hypotheses.
    pub length_penalty: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beams: 6,
            max_length: 62,
            no_repeat_ngram: Some(3),
            early_stopping: true,
            min_length: 1,
            length_penalty: 0.7,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::Config("beams must be >= 1".into()));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be >= 1".into()));
        }
        if self.no_repeat_ngram == Some(0) {
            return Err(Error::Config("no_repeat_ngram must be >= 1 or disabled".into()));
        }
        Ok(())
    }
}

/// Next-token log-probabilities given the generated prefix (BOS implied,
/// prefix excludes it).
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated content tokens, EOS excluded.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of all scored tokens (EOS included when
    /// emitted).
    pub score: f64,
    pub ended_with_eos: bool,
}

impl Hypothesis {
    /// Number of scored tokens.
    pub fn scored_len(&self) -> usize {
        self.tokens.len() + usize::from(self.ended_with_eos)
    }

    /// Length-normalized score used to compare finished hypotheses.
    pub fn normalized(&self, length_penalty: f64) -> f64 {
        self.score / (self.scored_len().max(1) as f64).powf(length_penalty)
    }
}

/// Would appending `next` to `prefix` recreate an n-gram already present
/// in `prefix`?
pub fn repeats_ngram(prefix: &[u32], next: u32, n: usize) -> bool {
    if n == 0 || prefix.len() + 1 < n {
        return false;
    }
    let tail = &prefix[prefix.len() - (n - 1)..];
    prefix
        .windows(n)
        .any(|w| &w[..n - 1] == tail && w[n - 1] == next)
}

fn allowed_tokens(prefix: &[u32], cfg: &GenerationConfig, vocab: usize) -> Vec<u32> {
    (0..vocab as u32)
        .filter(|&t| {
            if t == PAD_ID || t == BOS_ID {
                return false;
            }
            if t == EOS_ID && prefix.len() < cfg.min_length {
                return false;
            }
            if t != EOS_ID {
                if let Some(n) = cfg.no_repeat_ngram {
                    if repeats_ngram(prefix, t, n) {
                        return false;
                    }
                }
            }
            true
        })
        .collect()
}

/// Pick the best finished hypothesis by normalized score; earlier entries
/// win ties, which keeps the search deterministic.
fn best_finished(finished: Vec<Hypothesis>, length_penalty: f64) -> Option<Hypothesis> {
    finished.into_iter().fold(None, |best, h| match best {
        None => Some(h),
        Some(b) => {
            if h.normalized(length_penalty) > b.normalized(length_penalty) {
                Some(h)
            } else {
                Some(b)
            }
        }
    })
}

pub fn beam_search(scorer: &dyn StepScorer, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut active = vec![Hypothesis { tokens: Vec::new(), score: 0.0, ended_with_eos: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !active.is_empty() {
        if cfg.early_stopping && finished.len() >= cfg.beams {
            break;
        }
        // (cumulative score, beam index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, hyp) in active.iter().enumerate() {
            let logprobs = scorer.step_logprobs(&hyp.tokens)?;
            if logprobs.len() != vocab {
                return Err(Error::shape(format!(
                    "scorer returned {} log-probs for vocab {vocab}",
                    logprobs.len()
                )));
            }
            let allowed = allowed_tokens(&hyp.tokens, cfg, vocab);
            if allowed.is_empty() {
                finished.push(hyp.clone());
                continue;
            }
            for t in allowed {
                candidates.push((hyp.score + logprobs[t as usize], bi, t));
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next_active = Vec::with_capacity(cfg.beams);
        for &(score, bi, t) in candidates.iter().take(cfg.beams) {
            if t == EOS_ID {
                finished.push(Hypothesis {
                    tokens: active[bi].tokens.clone(),
                    score,
                    ended_with_eos: true,
                });
            } else {
                let mut tokens = active[bi].tokens.clone();
                tokens.push(t);
                let hyp = Hypothesis { tokens, score, ended_with_eos: false };
                if hyp.tokens.len() >= cfg.max_length {
                    finished.push(hyp);
                } else {
                    next_active.push(hyp);
                }
            }
        }
        active = next_active;
    }
    finished.extend(active);
    best_finished(finished, cfg.length_penalty)
        .ok_or_else(|| Error::EmptyInput("beam search produced no hypothesis".into()))
}

/// Greedy decoding: repeatedly take the best allowed token until EOS wins,
/// the length limit is hit, or nothing is allowed. Identical tie-breaks to
/// beam search with one beam.
pub fn greedy_decode(scorer: &dyn StepScorer, cfg: &GenerationConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, ended_with_eos: false };
    while hyp.tokens.len() < cfg.max_length {
        let logprobs = scorer.step_logprobs(&hyp.tokens)?;
        let allowed = allowed_tokens(&hyp.tokens, cfg, vocab);
        let Some(&best) = allowed
            .iter()
            .max_by(|&&a, &&b| {
                logprobs[a as usize]
                    .total_cmp(&logprobs[b as usize])
                    .then(b.cmp(&a))
            })
        else {
            break;
        };
        hyp.score += logprobs[best as usize];
        if best == EOS_ID {
            hyp.ended_with_eos = true;
            break;
        }
        hyp.tokens.push(best);
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-token preferences regardless of prefix.
    struct StaticScorer {
        logprobs: Vec<f64>,
    }

    impl StepScorer for StaticScorer {
        fn vocab_size(&self) -> usize {
            self.logprobs.len()
        }

        fn step_logprobs(&self, _prefix: &[u32]) -> Result<Vec<f64>> {
            Ok(self.logprobs.clone())
        }
    }

    fn preferring_token(vocab: usize, favorite: u32) -> StaticScorer {
        let mut logprobs = vec![-3.0; vocab];
        logprobs[favorite as usize] = -0.1;
        logprobs[EOS_ID as usize] = -8.0;
        StaticScorer { logprobs }
    }

    fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
        let grams: Vec<&[u32]> = tokens.windows(n).collect();
        (0..grams.len()).any(|i| grams[i + 1..].contains(&grams[i]))
    }

    #[test]
    fn repeats_ngram_detection() {
        assert!(repeats_ngram(&[7, 8, 9, 7, 8], 9, 3));
        assert!(!repeats_ngram(&[7, 8, 9, 7, 8], 6, 3));
        assert!(!repeats_ngram(&[7, 8], 9, 3));
    }

    #[test]
    fn rigged_scorer_never_emits_a_repeated_trigram() {
        let scorer = preferring_token(8, 6);
        let cfg = GenerationConfig {
            beams: 4,
            max_length: 12,
            no_repeat_ngram: Some(3),
            ..GenerationConfig::default()
        };
        let hyp = beam_search(&scorer, &cfg).unwrap();
        assert_eq!(hyp.tokens.len(), 12);
        assert!(!has_repeated_ngram(&hyp.tokens, 3));
        let greedy = greedy_decode(&scorer, &cfg).unwrap();
        assert!(!has_repeated_ngram(&greedy.tokens, 3));
    }

    #[test]
    fn eos_terminates_and_is_scored() {
        let mut logprobs = vec![-5.0; 8];
        logprobs[EOS_ID as usize] = -0.01;
        logprobs[7] = -0.5;
        let scorer = StaticScorer { logprobs };
        let cfg = GenerationConfig { beams: 2, max_length: 10, ..GenerationConfig::default() };
        let hyp = beam_search(&scorer, &cfg).unwrap();
        // min_length 1 forces one content token before EOS
        assert_eq!(hyp.tokens, vec![7]);
        assert!(hyp.ended_with_eos);
        assert_eq!(hyp.scored_len(), 2);
        assert!((hyp.score - (-0.5 - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn scores_are_monotone_along_hypotheses() {
        let scorer = preferring_token(9, 7);
        let cfg = GenerationConfig { beams: 3, max_length: 6, ..GenerationConfig::default() };
        let hyp = beam_search(&scorer, &cfg).unwrap();
        assert!(hyp.score <= 0.0);
        assert!(hyp.score <= hyp.normalized(0.0));
    }

    #[test]
    fn pad_and_bos_are_never_generated() {
        let scorer = StaticScorer { logprobs: vec![-0.1; 8] };
        let cfg = GenerationConfig { beams: 2, max_length: 5, ..GenerationConfig::default() };
        let hyp = beam_search(&scorer, &cfg).unwrap();
        assert!(!hyp.tokens.contains(&PAD_ID));
        assert!(!hyp.tokens.contains(&BOS_ID));
    }

    #[test]
    fn zero_beams_rejected() {
        let scorer = StaticScorer { logprobs: vec![-0.1; 8] };
        let cfg = GenerationConfig { beams: 0, ..GenerationConfig::default() };
        assert!(beam_search(&scorer, &cfg).is_err());
    }

    #[test]
    fn generated_length_respects_max_length() {
        let scorer = preferring_token(8, 6);
        for max_length in [1, 3, 7] {
            let cfg = GenerationConfig {
                beams: 3,
                max_length,
                no_repeat_ngram: None,
                ..GenerationConfig::default()
            };
            let hyp = beam_search(&scorer, &cfg).unwrap();
            assert!(hyp.tokens.len() <= max_length);
        }
    }
}
