//! Synthetic separable summarization corpus.
//!
//! Every document has a few salient sentences that share a marker token
//! and carry topic words; the reference summary is the salient sentences
//! concatenated in order. The discriminator can learn salience from the
//! marker, the summarizer's task is selective copying, and the generator
//! keeps the ground-truth labels so AUC can be measured against them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::RawRecord;
use crate::rng::{stream_rng, Stream};

/// Marker token present in every salient sentence.
pub const MARKER: &str = "keyfact";

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Content words per sentence (marker included for salient ones).
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of sentences marked salient, clamped to [1, S-1].
    pub salient_fraction: f64,
    pub n_fillers: usize,
    pub n_topics: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 100,
            min_sentences: 4,
            max_sentences: 7,
            min_words: 5,
            max_words: 7,
            salient_fraction: 0.4,
            n_fillers: 30,
            n_topics: 10,
        }
    }
}

/// A generated record plus its ground-truth per-sentence salience.
#[derive(Debug, Clone)]
pub struct SyntheticDoc {
    pub record: RawRecord,
    pub salient: Vec<bool>,
}

/// Deterministically generate `cfg.n_docs` documents for the given seed.
pub fn generate(cfg: &SyntheticConfig, seed: u64, id_prefix: &str) -> Vec<SyntheticDoc> {
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let fillers: Vec<String> = (0..cfg.n_fillers).map(|i| format!("w{i:02}")).collect();
    let topics: Vec<String> = (0..cfg.n_topics).map(|i| format!("t{i}")).collect();
    let mut docs = Vec::with_capacity(cfg.n_docs);
    for di in 0..cfg.n_docs {
        let n_sentences = rng.gen_range(cfg.min_sentences..=cfg.max_sentences);
        let n_salient = ((cfg.salient_fraction * n_sentences as f64).round() as usize)
            .clamp(1, n_sentences - 1);
        let mut order: Vec<usize> = (0..n_sentences).collect();
        order.shuffle(&mut rng);
        let mut salient = vec![false; n_sentences];
        for &i in order.iter().take(n_salient) {
            salient[i] = true;
        }
        let mut sentences = Vec::with_capacity(n_sentences);
        for &is_salient in &salient {
            let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
            let mut words = Vec::with_capacity(n_words);
            if is_salient {
                words.push(MARKER.to_string());
                words.push(topics[rng.gen_range(0..topics.len())].clone());
                words.push(topics[rng.gen_range(0..topics.len())].clone());
            }
            while words.len() < n_words {
                words.push(fillers[rng.gen_range(0..fillers.len())].clone());
            }
            sentences.push(format!("{}.", words.join(" ")));
        }
        let summary = sentences
            .iter()
            .zip(&salient)
            .filter(|(_, &s)| s)
            .map(|(text, _)| text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        docs.push(SyntheticDoc {
            record: RawRecord {
                id: format!("{id_prefix}{di}"),
                document: sentences.join(" "),
                summary: Some(summary),
            },
            salient,
        });
    }
    docs
}

/// Just the records, for corpus building.
pub fn records(docs: &[SyntheticDoc]) -> Vec<RawRecord> {
    docs.iter().map(|d| d.record.clone()).collect()
}
