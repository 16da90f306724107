//! End-to-end summarizer: denoising pretraining, fine-tuning with the
//! discriminator and clustering transformer between encoder and decoder,
//! and beam-search generation.
//!
//! Pretraining feeds corrupted tokens to the encoder and teacher-forces
//! the decoder on the original text; the clustering transformer is not
//! applied. Fine-tuning encodes the original document, transforms the
//! memory with tau under the (frozen) discriminator's cluster assignment,
//! and teacher-forces the decoder on the reference summary. Documents are
//! processed one at a time, so per-document cluster statistics never mix.

use rand::seq::SliceRandom;

use crate::autodiff::Var;
use crate::beam::{beam_search, greedy_decode, GenerationConfig, Hypothesis, StepScorer};
use crate::checkpoint::Checkpoint;
use crate::corpus::{
    build_document, detokenize, Corpus, Document, RawRecord, Vocab, BOS_ID, EOS_ID, MASK_ID,
    PAD_ID,
};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::nn::{decoder_forward, encoder_forward, Seq2SeqIds, TransformerConfig};
use crate::noising::{corrupt_with_rng, NoiseConfig};
use crate::optim::{Adam, TrainConfig};
use crate::params::{Parameters, Session};
use crate::rng::{stream_rng, Stream};
use crate::tau::{apply_tau, apply_tau_traced, SentenceClusters, TauAffineIds, TauConfig, TauStages};
use crate::tensor::Tensor;

pub const SUMMARIZER_COMPONENT: &str = "summarizer";

#[derive(Debug)]
pub struct Summarizer {
    pub config: TransformerConfig,
    pub tau: TauConfig,
    pub lambda: f64,
    pub vocab: Vocab,
    pub params: Parameters,
    /// Mean training loss per epoch, pretraining then fine-tuning appended.
    pub loss_history: Vec<f64>,
    ids: Seq2SeqIds,
    affine: Option<TauAffineIds>,
}

impl Summarizer {
    pub fn new(
        config: TransformerConfig,
        tau: TauConfig,
        lambda: f64,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Summarizer> {
        config.validate()?;
        tau.validate()?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
        }
        let mut params = Parameters::new();
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let ids = Seq2SeqIds::register(&mut params, &config, vocab.len(), &mut rng);
        let affine = tau
            .learned_affine
            .then(|| TauAffineIds::register(&mut params, config.d_model));
        Ok(Summarizer { config, tau, lambda, vocab, params, loss_history: Vec::new(), ids, affine })
    }

    /// Teacher-forced cross-entropy of `target` given encoder input
    /// `enc_tokens`, with tau applied when an assignment is supplied.
    fn teacher_forced_loss(
        &self,
        s: &mut Session,
        enc_tokens: &[u32],
        target: &[u32],
        clusters: Option<&SentenceClusters>,
    ) -> Result<Var> {
        let mut memory = encoder_forward(s, &self.ids, &self.config, enc_tokens)?;
        if let Some(clusters) = clusters {
            memory = apply_tau(s, memory, clusters, &self.tau, self.affine.as_ref())?;
        }
        let mut dec_input = Vec::with_capacity(target.len() + 1);
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(target);
        let mut dec_target = target.to_vec();
        dec_target.push(EOS_ID);
        let logits = decoder_forward(s, &self.ids, &self.config, &dec_input, memory)?;
        s.tape.cross_entropy(logits, &dec_target, PAD_ID)
    }

    /// Denoising pretraining. Encoder sees the corrupted token stream,
    /// decoder reconstructs the original; tau is not applied.
    pub fn pretrain(
        &mut self,
        corpus: &Corpus,
        noise: &NoiseConfig,
        train: &TrainConfig,
    ) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("pretraining corpus".into()));
        }
        noise.validate()?;
        train.validate()?;
        let max_target = self.config.max_positions - 1;
        let mut adam = Adam::new(train.adam(), &self.params);
        let mut dropout_rng = stream_rng(train.seed, Stream::Dropout);
        let mut noise_rng = stream_rng(train.seed, Stream::Noising);
        let mut shuffle_rng = stream_rng(train.seed, Stream::Shuffle);
        let mut pending = 0usize;
        for _epoch in 0..train.epochs {
            let mut order: Vec<usize> = (0..corpus.documents.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            for &i in &order {
                let doc = &corpus.documents[i];
                let sentences: Vec<Vec<u32>> =
                    doc.sentences.iter().map(|s| s.tokens.clone()).collect();
                let mut corrupted = corrupt_with_rng(&sentences, noise, &mut noise_rng);
                corrupted.truncate(self.config.max_positions);
                if corrupted.is_empty() {
                    // total deletion degenerates to a single mask
                    corrupted.push(MASK_ID);
                }
                let mut original = doc.tokens();
                original.truncate(max_target);
                let (loss, grads) = {
                    let mut s = Session::train(&self.params, train.dropout, &mut dropout_rng);
                    let loss = self.teacher_forced_loss(&mut s, &corrupted, &original, None)?;
                    s.backward(loss)?
                };
                self.params.accumulate(grads);
                pending += 1;
                if pending == train.grad_accum {
                    adam.step(&mut self.params);
                    pending = 0;
                }
                epoch_loss += loss;
            }
            if pending > 0 {
                adam.step(&mut self.params);
                pending = 0;
            }
            let mean = epoch_loss / corpus.documents.len() as f64;
            log::debug!("pretrain epoch loss {mean:.6}");
            self.loss_history.push(mean);
        }
        Ok(())
    }

    /// Fine-tune on document/reference pairs. The discriminator is frozen:
    /// cluster assignments are computed once per document up front, and no
    /// gradient flows into it.
    pub fn finetune(
        &mut self,
        corpus: &Corpus,
        disc: &Discriminator,
        train: &TrainConfig,
    ) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("fine-tuning corpus".into()));
        }
        train.validate()?;
        let max_target = self.config.max_positions - 1;
        let mut examples = Vec::with_capacity(corpus.documents.len());
        for doc in &corpus.documents {
            let reference = doc
                .reference
                .as_ref()
                .ok_or_else(|| Error::MissingReference(doc.id.clone()))?;
            let mut target = reference.clone();
            target.truncate(max_target);
            let assignment = disc.assign(doc, self.lambda)?;
            examples.push((doc, target, assignment.clusters_for(doc)?));
        }
        let mut adam = Adam::new(train.adam(), &self.params);
        let mut dropout_rng = stream_rng(train.seed, Stream::Dropout);
        let mut shuffle_rng = stream_rng(train.seed, Stream::Shuffle);
        let mut pending = 0usize;
        for _epoch in 0..train.epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            for &i in &order {
                let (doc, target, clusters) = &examples[i];
                let (loss, grads) = {
                    let mut s = Session::train(&self.params, train.dropout, &mut dropout_rng);
                    let loss =
                        self.teacher_forced_loss(&mut s, &doc.tokens(), target, Some(clusters))?;
                    s.backward(loss)?
                };
                self.params.accumulate(grads);
                pending += 1;
                if pending == train.grad_accum {
                    adam.step(&mut self.params);
                    pending = 0;
                }
                epoch_loss += loss;
            }
            if pending > 0 {
                adam.step(&mut self.params);
                pending = 0;
            }
            let mean = epoch_loss / examples.len() as f64;
            log::debug!("finetune epoch loss {mean:.6}");
            self.loss_history.push(mean);
        }
        Ok(())
    }

    /// Encoder memory after tau, plus the captured stage values.
    pub fn encode_with_tau(
        &self,
        doc: &Document,
        disc: &Discriminator,
    ) -> Result<(Tensor, TauStages)> {
        let assignment = disc.assign(doc, self.lambda)?;
        let clusters = assignment.clusters_for(doc)?;
        let mut s = Session::eval(&self.params);
        let memory = encoder_forward(&mut s, &self.ids, &self.config, &doc.tokens())?;
        let (out, stages) =
            apply_tau_traced(&mut s, memory, &clusters, &self.tau, self.affine.as_ref())?;
        Ok((s.value(out).clone(), stages))
    }

    /// Beam-search a summary for one document.
    pub fn generate(
        &self,
        doc: &Document,
        disc: &Discriminator,
        gen: &GenerationConfig,
    ) -> Result<Vec<u32>> {
        let (memory, _) = self.encode_with_tau(doc, disc)?;
        let scorer = MemoryScorer { model: self, memory };
        let hyp = if gen.beams == 1 {
            greedy_decode(&scorer, gen)?
        } else {
            beam_search(&scorer, gen)?
        };
        Ok(hyp.tokens)
    }

    /// Beam and greedy hypotheses for the same memory; test hook for the
    /// decoding oracles.
    pub fn decode_hypotheses(
        &self,
        doc: &Document,
        disc: &Discriminator,
        gen: &GenerationConfig,
    ) -> Result<(Hypothesis, Hypothesis)> {
        let (memory, _) = self.encode_with_tau(doc, disc)?;
        let scorer = MemoryScorer { model: self, memory };
        Ok((beam_search(&scorer, gen)?, greedy_decode(&scorer, gen)?))
    }

    /// Scorer over a fixed encoder memory, for external decoding drivers.
    pub fn scorer<'a>(&'a self, memory: Tensor) -> impl StepScorer + 'a {
        MemoryScorer { model: self, memory }
    }

    /// Raw text in, summary text out: segment, tokenize, generate,
    /// detokenize.
    pub fn summarize_text(
        &self,
        text: &str,
        disc: &Discriminator,
        gen: &GenerationConfig,
    ) -> Result<String> {
        let record =
            RawRecord { id: "inline".into(), document: text.to_string(), summary: None };
        let doc = build_document(&record, &self.vocab, self.config.max_positions)?;
        let tokens = self.generate(&doc, disc, gen)?;
        Ok(detokenize(&tokens, &self.vocab))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(
            SUMMARIZER_COMPONENT,
            &self.config,
            Some(self.tau.clone()),
            Some(self.lambda),
            &self.vocab,
            self.loss_history.clone(),
            &self.params,
        )
    }

    /// Rebuild from a checkpoint; `tau_override`/`lambda_override` replace
    /// the stored settings (generation-time knobs, geometry unchanged).
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        tau_override: Option<TauConfig>,
        lambda_override: Option<f64>,
    ) -> Result<Summarizer> {
        if ckpt.component != SUMMARIZER_COMPONENT {
            return Err(Error::Format {
                path: "checkpoint".into(),
                reason: format!("component `{}` is not a summarizer", ckpt.component),
            });
        }
        let config: TransformerConfig = ckpt.typed_config()?;
        let stored_tau = ckpt.tau.clone().unwrap_or_else(TauConfig::neutral);
        let tau = tau_override.unwrap_or(stored_tau);
        let lambda = lambda_override.or(ckpt.lambda).unwrap_or(0.5);
        // parameter layout follows the stored tau's affine choice
        let mut layout_tau = tau.clone();
        layout_tau.learned_affine = ckpt
            .tensors
            .iter()
            .any(|(name, _)| name == "tau.affine.weight");
        let mut model = Summarizer::new(config, layout_tau, lambda, ckpt.vocab(), 0)?;
        ckpt.restore_params(&mut model.params)?;
        model.tau.learned_affine = model.tau.learned_affine && tau.learned_affine;
        model.loss_history = ckpt.loss_history.clone();
        Ok(model)
    }
}

struct MemoryScorer<'a> {
    model: &'a Summarizer,
    memory: Tensor,
}

impl StepScorer for MemoryScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn step_logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(prefix);
        if dec_input.len() > self.model.config.max_positions {
            return Err(Error::Length {
                len: dec_input.len(),
                max: self.model.config.max_positions,
            });
        }
        let mut s = Session::eval(&self.model.params);
        let memory = s.constant(self.memory.clone())?;
        let logits = decoder_forward(&mut s, &self.model.ids, &self.model.config, &dec_input, memory)?;
        let last = s.value(logits).row(dec_input.len() - 1);
        Ok(log_softmax(last))
    }
}

/// Stable log-softmax of one logits row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}
