//! Corpus-level evaluation and hyperparameter sweeps.
//!
//! ROUGE is computed on detokenized text (lowercased, punctuation
//! stripped), and the corpus score is the unweighted mean of per-document
//! values. Sweeps re-run fine-tuning from a shared pretrained checkpoint
//! for every grid point with the same seed and budget, then emit a CSV row
//! and an aligned text table per point.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::beam::GenerationConfig;
use crate::checkpoint::Checkpoint;
use crate::corpus::{detokenize, Corpus, Document};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::model::Summarizer;
use crate::optim::TrainConfig;
use crate::rouge::{score_text, RougeScore};
use crate::tau::TauConfig;

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub doc_id: String,
    pub score: RougeScore,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Unweighted mean of the per-document scores, field by field.
    pub aggregate: RougeScore,
}

fn mean_scores(rows: &[EvalRow]) -> RougeScore {
    let n = rows.len() as f64;
    let mut agg = RougeScore::default();
    for row in rows {
        for (dst, src) in [
            (&mut agg.rouge1, &row.score.rouge1),
            (&mut agg.rouge2, &row.score.rouge2),
            (&mut agg.rouge_l, &row.score.rouge_l),
        ] {
            dst.precision += src.precision / n;
            dst.recall += src.recall / n;
            dst.f1 += src.f1 / n;
        }
    }
    agg
}

/// Evaluate (candidate, reference) text pairs produced per document; the
/// test suites inject oracle candidates here.
pub fn evaluate_pairs<F>(mut pair_for: F, corpus: &Corpus) -> Result<EvalReport>
where
    F: FnMut(&Document) -> Result<(String, String)>,
{
    if corpus.is_empty() {
        return Err(Error::EmptyInput(format!("{} corpus for evaluation", corpus.split.as_str())));
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for doc in &corpus.documents {
        let (candidate, reference) = pair_for(doc)?;
        rows.push(EvalRow { doc_id: doc.id.clone(), score: score_text(&candidate, &reference) });
    }
    let aggregate = mean_scores(&rows);
    Ok(EvalReport { rows, aggregate })
}

/// Generate with the model per document and score against references.
pub fn evaluate_corpus(
    model: &Summarizer,
    disc: &Discriminator,
    corpus: &Corpus,
    gen: &GenerationConfig,
) -> Result<EvalReport> {
    evaluate_pairs(
        |doc| {
            let reference = doc
                .reference
                .as_ref()
                .ok_or_else(|| Error::MissingReference(doc.id.clone()))?;
            let tokens = model.generate(doc, disc, gen)?;
            Ok((detokenize(&tokens, &model.vocab), detokenize(reference, &model.vocab)))
        },
        corpus,
    )
}

fn csv_row(label: &str, s: &RougeScore) -> String {
    format!(
        "{label},{:.6},{:.6},{:.6},{:.6}",
        s.rouge1.f1,
        s.rouge2.f1,
        s.rouge_l.f1,
        s.average_f1()
    )
}

/// Per-document rows plus an `ALL` aggregate row.
pub fn evaluation_csv(report: &EvalReport) -> String {
    let mut out = String::from("doc_id,rouge1,rouge2,rougeL,rouge_avg\n");
    for row in &report.rows {
        out.push_str(&csv_row(&row.doc_id, &row.score));
        out.push('\n');
    }
    out.push_str(&csv_row("ALL", &report.aggregate));
    out.push('\n');
    out
}

/// Area under the ROC curve of scores against binary labels, by the
/// rank-sum formulation with the standard tie correction.
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return 0.5;
    }
    let mut sorted: Vec<&(f64, bool)> = scored.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &sorted[i..=j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum - positives as f64 * (positives as f64 + 1.0) / 2.0)
        / (positives as f64 * negatives as f64)
}

/// One sweep dimension with its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepGrid {
    Lambda(Vec<f64>),
    W(Vec<f64>),
    Mn(Vec<(u32, u32)>),
}

impl SweepGrid {
    /// The paper-style default grids.
    pub fn default_lambda() -> SweepGrid {
        SweepGrid::Lambda(vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    }

    pub fn default_w() -> SweepGrid {
        SweepGrid::W(vec![-2.0, -1.5, -1.0, 1.5, 2.0])
    }

    pub fn default_mn() -> SweepGrid {
        SweepGrid::Mn((1..=6).map(|m| (m, 1)).collect())
    }

    pub fn param_name(&self) -> &'static str {
        match self {
            SweepGrid::Lambda(_) => "lambda",
            SweepGrid::W(_) => "w",
            SweepGrid::Mn(_) => "mn",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepGrid::Lambda(v) => v.len(),
            SweepGrid::W(v) => v.len(),
            SweepGrid::Mn(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<String> {
        match self {
            SweepGrid::Lambda(v) | SweepGrid::W(v) => v.iter().map(|x| format!("{x}")).collect(),
            SweepGrid::Mn(v) => v.iter().map(|(m, n)| format!("{m}:{n}")).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub score: RougeScore,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub param: String,
    pub points: Vec<SweepPoint>,
    /// Grid label with the best F1 per metric: (rouge1, rouge2, rougeL).
    pub best: (String, String, String),
}

/// Everything a sweep holds fixed: the shared pretrained checkpoint, the
/// frozen discriminator, corpora, and the training/generation budget.
pub struct SweepInputs<'a> {
    pub pretrained: &'a Checkpoint,
    pub disc: &'a Discriminator,
    pub train_corpus: &'a Corpus,
    pub test_corpus: &'a Corpus,
    pub base_tau: TauConfig,
    pub base_lambda: f64,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

/// Fine-tune + evaluate once per grid point, varying only the swept
/// parameter. Deterministic: every point restarts from the checkpoint
/// with the same seed.
pub fn run_sweep(grid: &SweepGrid, inputs: &SweepInputs) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let labels = grid.labels();
    let mut points = Vec::with_capacity(grid.len());
    for (idx, label) in labels.iter().enumerate() {
        let mut tau = inputs.base_tau.clone();
        let mut lambda = inputs.base_lambda;
        match grid {
            SweepGrid::Lambda(v) => lambda = v[idx],
            SweepGrid::W(v) => tau.w = v[idx],
            SweepGrid::Mn(v) => {
                tau.m = v[idx].0;
                tau.n = v[idx].1;
            }
        }
        let mut model =
            Summarizer::from_checkpoint(inputs.pretrained, Some(tau), Some(lambda))?;
        model.finetune(inputs.train_corpus, inputs.disc, &inputs.train)?;
        let report = evaluate_corpus(&model, inputs.disc, inputs.test_corpus, &inputs.generation)?;
        log::info!(
            "sweep {}={label}: rouge1 {:.4} rouge2 {:.4} rougeL {:.4}",
            grid.param_name(),
            report.aggregate.rouge1.f1,
            report.aggregate.rouge2.f1,
            report.aggregate.rouge_l.f1
        );
        points.push(SweepPoint { label: label.clone(), score: report.aggregate });
    }
    let best_by = |pick: fn(&RougeScore) -> f64| {
        points
            .iter()
            .max_by(|a, b| pick(&a.score).total_cmp(&pick(&b.score)))
            .map(|p| p.label.clone())
            .unwrap_or_default()
    };
    let best = (
        best_by(|s| s.rouge1.f1),
        best_by(|s| s.rouge2.f1),
        best_by(|s| s.rouge_l.f1),
    );
    Ok(SweepResult { param: grid.param_name().to_string(), points, best })
}

/// `param,rouge1,rouge2,rougeL,rouge_avg` with one row per grid point.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("param,rouge1,rouge2,rougeL,rouge_avg\n");
    for point in &result.points {
        out.push_str(&csv_row(&point.label, &point.score));
        out.push('\n');
    }
    out
}

/// Aligned plain-text table of the sweep.
pub fn sweep_table(result: &SweepResult) -> String {
    let label_w = result
        .points
        .iter()
        .map(|p| p.label.len())
        .chain([result.param.len()])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    writeln!(
        out,
        "{:<label_w$}  {:>8}  {:>8}  {:>8}  {:>9}",
        result.param, "rouge1", "rouge2", "rougeL", "rouge_avg"
    )
    .unwrap();
    for p in &result.points {
        writeln!(
            out,
            "{:<label_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9.4}",
            p.label,
            p.score.rouge1.f1,
            p.score.rouge2.f1,
            p.score.rouge_l.f1,
            p.score.average_f1()
        )
        .unwrap();
    }
    writeln!(
        out,
        "best: rouge1 @ {}, rouge2 @ {}, rougeL @ {}",
        result.best.0, result.best.1, result.best.2
    )
    .unwrap();
    out
}
