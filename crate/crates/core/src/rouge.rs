//! ROUGE-1/2/L with precision, recall, and F1.
//!
//! ROUGE-n uses clipped n-gram overlap counts; ROUGE-L uses the longest
//! common subsequence. Scores are computed per candidate/reference pair;
//! corpus-level aggregation (unweighted mean of per-document F1) lives in
//! the evaluation harness.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::text::normalized_words;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeComponent {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeComponent {
    fn from_counts(overlap: usize, cand_total: usize, ref_total: usize) -> RougeComponent {
        let precision = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
        RougeComponent { precision, recall, f1: f1(precision, recall) }
    }
}

/// Harmonic mean with the 0/0 -> 0 convention.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: RougeComponent,
    pub rouge2: RougeComponent,
    pub rouge_l: RougeComponent,
}

impl RougeScore {
    /// Arithmetic mean of the three F1 values.
    pub fn average_f1(&self) -> f64 {
        (self.rouge1.f1 + self.rouge2.f1 + self.rouge_l.f1) / 3.0
    }
}

/// Clipped n-gram overlap: each reference n-gram can match at most as many
/// times as it occurs in the reference.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeComponent {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 || ref_total == 0 {
        return RougeComponent::from_counts(0, cand_total, ref_total);
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_default() += 1;
    }
    let mut overlap = 0;
    for gram in candidate.windows(n) {
        if let Some(count) = ref_counts.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    RougeComponent::from_counts(overlap, cand_total, ref_total)
}

/// Longest-common-subsequence based P/R/F1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeComponent {
    let lcs = lcs_len(candidate, reference);
    RougeComponent::from_counts(lcs, candidate.len(), reference.len())
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut curr = vec![0usize; n + 1];
    for item in a {
        for j in 0..n {
            curr[j + 1] = if *item == b[j] {
                prev[j] + 1
            } else {
                curr[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[n]
}

/// ROUGE-1/2/L for one candidate/reference pair of token sequences.
pub fn score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// ROUGE over raw text: lowercased word tokens, punctuation stripped,
/// no stemming.
pub fn score_text(candidate: &str, reference: &str) -> RougeScore {
    score(&normalized_words(candidate), &normalized_words(reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_score_one() {
        let s = score(&[1u32, 2, 3, 4], &[1, 2, 3, 4]);
        assert_eq!(s.rouge1.f1, 1.0);
        assert_eq!(s.rouge2.f1, 1.0);
        assert_eq!(s.rouge_l.f1, 1.0);
        assert_eq!(s.average_f1(), 1.0);
    }

    #[test]
    fn disjoint_sequences_score_zero() {
        let s = score(&[1u32, 2], &[3, 4]);
        assert_eq!(s.rouge1.f1, 0.0);
        assert_eq!(s.rouge2.f1, 0.0);
        assert_eq!(s.rouge_l.f1, 0.0);
    }

    #[test]
    fn the_cat_hand_case() {
        // cand "the cat", ref "the cat sat": P=1, R=2/3, F1=0.8
        let c = rouge_n(&["the", "cat"], &["the", "cat", "sat"], 1);
        assert_eq!(c.precision, 1.0);
        assert!((c.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn lcs_hand_case() {
        // "a c b" vs "a b c": LCS length 2 (a c or a b)
        let c = rouge_l(&["a", "c", "b"], &["a", "b", "c"]);
        assert!((c.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let c = rouge_l::<u32>(&[], &[1, 2]);
        assert_eq!(c.f1, 0.0);
        let c = rouge_n::<u32>(&[], &[1, 2], 1);
        assert_eq!(c.f1, 0.0);
    }

    #[test]
    fn clipping_limits_repeated_matches() {
        // candidate repeats "a" three times, reference has it once
        let c = rouge_n(&["a", "a", "a"], &["a", "b"], 1);
        assert!((c.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((c.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn text_scoring_normalizes_case_and_punctuation() {
        let s = score_text("The CAT.", "the cat");
        assert_eq!(s.rouge1.f1, 1.0);
    }

    #[test]
    fn avg_matches_component_mean() {
        let s = score(&["x", "y", "z"], &["x", "q", "z"]);
        let want = (s.rouge1.f1 + s.rouge2.f1 + s.rouge_l.f1) / 3.0;
        assert_eq!(s.average_f1(), want);
    }
}
