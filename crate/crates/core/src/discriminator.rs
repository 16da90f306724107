//! The salience discriminator: scores each sentence of a document in
//! (0,1) and splits it into salient / non-salient clusters.
//!
//! A `[CLS]` token is prepended to every sentence, the whole stream runs
//! through a small bidirectional encoder (with alternating per-sentence
//! segment embeddings so the classifier can localize sentences), the
//! `[CLS]` vectors are selected and passed through two more encoder
//! layers, and a zero-initialized sigmoid head produces the scores.
//! Training is binary cross-entropy against the greedy ROUGE oracle
//! labels; the summarizer never backpropagates into this model.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::corpus::{oracle_salience_labels, salient_budget, Corpus, Document, Vocab, CLS_ID};
use crate::error::{Error, Result};
use crate::nn::{embed, encoder_layer, EncLayer};
use crate::optim::{Adam, TrainConfig};
use crate::params::{normal_init, ParamId, Parameters, Session};
use crate::rng::{stream_rng, Stream};
use crate::tau::SentenceClusters;
use crate::tensor::Tensor;

pub const DISC_COMPONENT: &str = "discriminator";

/// Learned segment embedding slots; sentence `i` uses slot `i % 16`, which
/// is unique for desk-scale documents and lets each `[CLS]` key directly on
/// its own sentence's tokens.
pub const SEGMENT_TABLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder layers over the full token stream.
    pub n_layers: usize,
    /// Extra encoder layers over the selected `[CLS]` vectors.
    pub cls_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Sinusoidal position encodings on the token stream.
    pub positional: bool,
    /// Per-sentence segment embeddings shared between each sentence's
    /// tokens and its `[CLS]`.
    pub segment_embeddings: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            cls_layers: 2,
            d_ff: 64,
            max_positions: 512,
            dropout: 0.1,
            positional: true,
            segment_embeddings: true,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config("discriminator dimensions must be positive".into()));
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
struct DiscIds {
    tok_emb: ParamId,
    seg_emb: ParamId,
    enc_layers: Vec<EncLayer>,
    cls_layers: Vec<EncLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl DiscIds {
    fn register(
        params: &mut Parameters,
        cfg: &DiscConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> DiscIds {
        let tok_emb =
            params.register("tok_emb", normal_init(rng, &[vocab_size, cfg.d_model], 0.1));
        let seg_emb = params.register(
            "seg_emb",
            normal_init(rng, &[SEGMENT_TABLE, cfg.d_model], 0.1),
        );
        let enc_layers = (0..cfg.n_layers)
            .map(|i| EncLayer::register(params, &format!("enc.{i}"), cfg.d_model, cfg.d_ff, rng))
            .collect();
        let cls_layers = (0..cfg.cls_layers)
            .map(|i| EncLayer::register(params, &format!("cls.{i}"), cfg.d_model, cfg.d_ff, rng))
            .collect();
        // zero-initialized head: an untrained discriminator scores 0.5
        let head_w = params.register("head.w", Tensor::zeros(&[cfg.d_model, 1]));
        let head_b = params.register("head.b", Tensor::zeros(&[1]));
        DiscIds { tok_emb, seg_emb, enc_layers, cls_layers, head_w, head_b }
    }
}

/// Per-sentence cluster decision for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// `true` = salient (member of C_p).
    pub sentence_labels: Vec<bool>,
    pub lambda: f64,
    /// Actual salient count, `clamp(ceil(lambda*S), 1, S-1)` for S >= 2.
    pub k: usize,
}

impl ClusterAssignment {
    pub fn salient_count(&self) -> usize {
        self.sentence_labels.iter().filter(|&&l| l).count()
    }

    /// Pair the labels with a document's sentence token counts for tau.
    pub fn clusters_for(&self, doc: &Document) -> Result<SentenceClusters> {
        SentenceClusters::new(self.sentence_labels.clone(), doc.sentence_token_counts())
    }
}

/// Top-k selection over salience scores with a lowest-index tie-break.
pub fn select_salient(scores: &[f64], lambda: f64) -> Result<ClusterAssignment> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("select_salient over no sentences".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
    }
    let k = salient_budget(lambda, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        labels[i] = true;
    }
    Ok(ClusterAssignment { sentence_labels: labels, lambda, k })
}

#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub params: Parameters,
    pub loss_history: Vec<f64>,
    ids: DiscIds,
}

impl Discriminator {
    pub fn new(config: DiscConfig, vocab_size: usize, seed: u64) -> Result<Discriminator> {
        config.validate()?;
        let mut params = Parameters::new();
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let ids = DiscIds::register(&mut params, &config, vocab_size, &mut rng);
        Ok(Discriminator { config, params, loss_history: Vec::new(), ids })
    }

    /// Token stream with a `[CLS]` before each sentence, plus the stream
    /// positions of those `[CLS]` tokens and per-token segment slots.
    fn stream(&self, doc: &Document) -> Result<(Vec<u32>, Vec<usize>, Vec<u32>)> {
        let mut tokens = Vec::with_capacity(doc.token_count() + doc.sentences.len());
        let mut cls_positions = Vec::with_capacity(doc.sentences.len());
        let mut segments = Vec::with_capacity(tokens.capacity());
        for (i, sentence) in doc.sentences.iter().enumerate() {
            cls_positions.push(tokens.len());
            tokens.push(CLS_ID);
            tokens.extend_from_slice(&sentence.tokens);
            segments.extend(
                std::iter::repeat((i % SEGMENT_TABLE) as u32).take(sentence.tokens.len() + 1),
            );
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::Length { len: tokens.len(), max: self.config.max_positions });
        }
        Ok((tokens, cls_positions, segments))
    }

    fn logits(&self, s: &mut Session, doc: &Document) -> Result<Var> {
        let (tokens, cls_positions, segments) = self.stream(doc)?;
        let mut x = embed(
            s,
            self.ids.tok_emb,
            &tokens,
            self.config.d_model,
            self.config.max_positions,
            self.config.positional,
        )?;
        if self.config.segment_embeddings {
            let seg_table = s.param(self.ids.seg_emb)?;
            let seg = s.tape.gather(seg_table, &segments)?;
            x = s.tape.add(x, seg)?;
        }
        for layer in &self.ids.enc_layers {
            x = encoder_layer(s, layer, x, self.config.n_heads, None)?;
        }
        let mut cls = s.tape.gather_rows(x, &cls_positions)?;
        for layer in &self.ids.cls_layers {
            cls = encoder_layer(s, layer, cls, self.config.n_heads, None)?;
        }
        let head_w = s.param(self.ids.head_w)?;
        let head_b = s.param(self.ids.head_b)?;
        let logits = s.tape.matmul(cls, head_w)?;
        s.tape.add_bias(logits, head_b)
    }

    /// Salience score in (0,1) per sentence. Reads only the document.
    pub fn score_sentences(&self, doc: &Document) -> Result<Vec<f64>> {
        let mut s = Session::eval(&self.params);
        let logits = self.logits(&mut s, doc)?;
        let scores = s.tape.sigmoid(logits)?;
        Ok(s.value(scores).data().to_vec())
    }

    /// Score then split with the top-k rule.
    pub fn assign(&self, doc: &Document, lambda: f64) -> Result<ClusterAssignment> {
        let scores = self.score_sentences(doc)?;
        select_salient(&scores, lambda)
    }

    pub fn to_checkpoint(&self, vocab: &Vocab, lambda: Option<f64>) -> Checkpoint {
        Checkpoint::from_params(
            DISC_COMPONENT,
            &self.config,
            None,
            lambda,
            vocab,
            self.loss_history.clone(),
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Discriminator> {
        if ckpt.component != DISC_COMPONENT {
            return Err(Error::Format {
                path: "checkpoint".into(),
                reason: format!("component `{}` is not a discriminator", ckpt.component),
            });
        }
        let config: DiscConfig = ckpt.typed_config()?;
        let vocab_size = ckpt.vocab.len() + crate::corpus::RESERVED_TOKENS.len();
        let mut disc = Discriminator::new(config, vocab_size, 0)?;
        ckpt.restore_params(&mut disc.params)?;
        disc.loss_history = ckpt.loss_history.clone();
        Ok(disc)
    }
}

/// Train a fresh discriminator on greedy-oracle labels with binary
/// cross-entropy. Documents without a reference are rejected up front.
pub fn train_discriminator(
    corpus: &Corpus,
    config: &DiscConfig,
    vocab_size: usize,
    lambda: f64,
    train: &TrainConfig,
) -> Result<Discriminator> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("discriminator training corpus".into()));
    }
    train.validate()?;
    let labeled: Vec<(&Document, Vec<f64>)> = corpus
        .documents
        .iter()
        .map(|doc| {
            let labels = oracle_salience_labels(doc, lambda)?;
            Ok((doc, labels.into_iter().map(|l| if l { 1.0 } else { 0.0 }).collect()))
        })
        .collect::<Result<_>>()?;

    let mut disc = Discriminator::new(config.clone(), vocab_size, train.seed)?;
    let mut adam = Adam::new(train.adam(), &disc.params);
    let mut dropout_rng = stream_rng(train.seed, Stream::Dropout);
    let mut shuffle_rng = stream_rng(train.seed, Stream::Shuffle);
    let mut pending = 0usize;
    for _epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (doc, targets) = &labeled[i];
            let (loss, grads) = {
                let mut s = Session::train(&disc.params, train.dropout, &mut dropout_rng);
                let logits = disc.logits(&mut s, doc)?;
                let target =
                    Tensor::from_vec(&[targets.len(), 1], targets.clone()).expect("finite labels");
                let loss = s.tape.bce_with_logits(logits, target)?;
                s.backward(loss)?
            };
            disc.params.accumulate(grads);
            pending += 1;
            if pending == train.grad_accum {
                adam.step(&mut disc.params);
                pending = 0;
            }
            epoch_loss += loss;
        }
        if pending > 0 {
            adam.step(&mut disc.params);
            pending = 0;
        }
        let mean = epoch_loss / labeled.len() as f64;
        log::debug!("discriminator epoch loss {mean:.6}");
        disc.loss_history.push(mean);
    }
    Ok(disc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, RawRecord, Split};

    fn tiny_config() -> DiscConfig {
        DiscConfig {
            d_model: 16,
            n_heads: 4,
            n_layers: 1,
            cls_layers: 2,
            d_ff: 24,
            max_positions: 64,
            dropout: 0.1,
            positional: true,
            segment_embeddings: true,
        }
    }

    fn tiny_corpus(texts: &[(&str, &str)]) -> (Corpus, Vocab) {
        let records: Vec<RawRecord> = texts
            .iter()
            .enumerate()
            .map(|(i, (doc, summary))| RawRecord {
                id: format!("d{i}"),
                document: doc.to_string(),
                summary: Some(summary.to_string()),
            })
            .collect();
        let vocab = Vocab::build(&records, 64).unwrap();
        let corpus = build_corpus(&records, &vocab, Split::Train, 64).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn untrained_scores_are_exactly_half() {
        let (corpus, vocab) = tiny_corpus(&[("alpha beta. gamma delta. epsilon zeta.", "alpha")]);
        let disc = Discriminator::new(tiny_config(), vocab.len(), 1).unwrap();
        let scores = disc.score_sentences(&corpus.documents[0]).unwrap();
        assert_eq!(scores, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn select_salient_paper_worked_example() {
        // five sentences, lambda 0.4 -> k=2 -> s1 and s3 (1-indexed)
        let assignment = select_salient(&[0.9, 0.1, 0.8, 0.2, 0.3], 0.4).unwrap();
        assert_eq!(assignment.k, 2);
        assert_eq!(assignment.sentence_labels, vec![true, false, true, false, false]);
    }

    #[test]
    fn select_salient_clamps_and_breaks_ties_low() {
        let assignment = select_salient(&[0.5; 5], 1.0).unwrap();
        assert_eq!(assignment.k, 4);
        assert_eq!(assignment.sentence_labels, vec![true, true, true, true, false]);

        // ceil(0.34 * 3) = 2, ties broken toward lower indices
        let assignment = select_salient(&[0.3, 0.3, 0.3], 0.34).unwrap();
        assert_eq!(assignment.sentence_labels, vec![true, true, false]);
    }

    #[test]
    fn select_salient_is_monotone_in_lambda() {
        let scores = [0.11, 0.93, 0.35, 0.64, 0.22, 0.78, 0.5];
        let mut prev: Option<Vec<bool>> = None;
        for lambda in [0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0] {
            let labels = select_salient(&scores, lambda).unwrap().sentence_labels;
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&labels) {
                    assert!(!a | b);
                }
            }
            prev = Some(labels);
        }
    }

    #[test]
    fn both_clusters_non_empty_for_two_plus_sentences() {
        for s in 2..8 {
            for lambda in [0.0, 0.3, 0.7, 1.0] {
                let scores: Vec<f64> = (0..s).map(|i| 0.1 + 0.05 * i as f64).collect();
                let a = select_salient(&scores, lambda).unwrap();
                let pos = a.salient_count();
                assert!(pos >= 1 && pos <= s - 1, "S={s} lambda={lambda} pos={pos}");
            }
        }
    }

    #[test]
    fn duplicated_sentence_scores_equal_without_position_info() {
        let (corpus, vocab) = tiny_corpus(&[("alpha beta gamma. alpha beta gamma.", "alpha")]);
        let cfg = DiscConfig {
            positional: false,
            segment_embeddings: false,
            dropout: 0.0,
            ..tiny_config()
        };
        let mut disc = Discriminator::new(cfg, vocab.len(), 5).unwrap();
        // non-constant head (layer-normed rows are zero-mean, so a constant
        // weight vector would always produce logit 0)
        let head = disc.params.id("head.w").unwrap();
        for (i, v) in disc.params.value_mut(head).data_mut().iter_mut().enumerate() {
            *v = 0.1 + 0.07 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let scores = disc.score_sentences(&corpus.documents[0]).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_ne!(scores[0], 0.5);
    }

    #[test]
    fn scores_ignore_the_reference_summary() {
        let (corpus, vocab) = tiny_corpus(&[("alpha beta. gamma delta.", "alpha")]);
        let disc = Discriminator::new(tiny_config(), vocab.len(), 3).unwrap();
        let mut doc = corpus.documents[0].clone();
        let with_ref = disc.score_sentences(&doc).unwrap();
        doc.reference = None;
        let without_ref = disc.score_sentences(&doc).unwrap();
        assert_eq!(with_ref, without_ref);
    }

    #[test]
    fn document_over_max_positions_is_length_error() {
        let (corpus, vocab) = tiny_corpus(&[("alpha beta gamma delta epsilon zeta", "alpha")]);
        let cfg = DiscConfig { max_positions: 4, ..tiny_config() };
        let disc = Discriminator::new(cfg, vocab.len(), 1).unwrap();
        assert!(matches!(
            disc.score_sentences(&corpus.documents[0]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn memorizes_a_single_repeated_document() {
        let (corpus, vocab) = tiny_corpus(&[(
            "alpha beta gamma. delta epsilon zeta. eta theta iota.",
            "alpha beta gamma",
        )]);
        let train = TrainConfig { lr: 5e-3, epochs: 60, dropout: 0.0, seed: 4, ..TrainConfig::default() };
        let disc =
            train_discriminator(&corpus, &tiny_config(), vocab.len(), 0.34, &train).unwrap();
        let last = *disc.loss_history.last().unwrap();
        assert!(last < 0.05, "memorization loss {last}");
        let scores = disc.score_sentences(&corpus.documents[0]).unwrap();
        assert!(scores[0] > scores[1] && scores[0] > scores[2]);
    }

    #[test]
    fn training_is_seed_reproducible() {
        let (corpus, vocab) = tiny_corpus(&[
            ("alpha beta. gamma delta.", "alpha beta"),
            ("epsilon zeta. eta theta.", "eta theta"),
        ]);
        let train = TrainConfig { lr: 1e-3, epochs: 3, seed: 9, ..TrainConfig::default() };
        let run = || {
            train_discriminator(&corpus, &tiny_config(), vocab.len(), 0.5, &train)
                .unwrap()
                .loss_history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_corpus_and_missing_reference_are_rejected() {
        let corpus = Corpus { documents: vec![], split: Split::Train };
        assert!(matches!(
            train_discriminator(&corpus, &tiny_config(), 10, 0.5, &TrainConfig::default()),
            Err(Error::EmptyInput(_))
        ));

        let (mut corpus, vocab) = tiny_corpus(&[("alpha beta. gamma.", "alpha")]);
        corpus.documents[0].reference = None;
        assert!(matches!(
            train_discriminator(&corpus, &tiny_config(), vocab.len(), 0.5, &TrainConfig::default()),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores() {
        let (corpus, vocab) = tiny_corpus(&[("alpha beta. gamma delta.", "alpha")]);
        let train = TrainConfig { lr: 1e-3, epochs: 2, seed: 2, ..TrainConfig::default() };
        let disc =
            train_discriminator(&corpus, &tiny_config(), vocab.len(), 0.5, &train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disc.ckpt");
        disc.to_checkpoint(&vocab, Some(0.5)).save(&path).unwrap();
        let loaded = Discriminator::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let a = disc.score_sentences(&corpus.documents[0]).unwrap();
        let b = loaded.score_sentences(&corpus.documents[0]).unwrap();
        assert_eq!(a, b);
    }
}
