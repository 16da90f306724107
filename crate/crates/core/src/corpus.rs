//! Corpus ingestion: sentence segmentation, word-level tokenization,
//! vocabulary construction, JSON Lines IO, and greedy ROUGE oracle labels
//! for discriminator supervision.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rouge;
use crate::text::split_words;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const CLS_ID: u32 = 4;
pub const UNK_ID: u32 = 5;

/// Reserved token strings, in id order 0..=5.
pub const RESERVED_TOKENS: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[CLS]", "[UNK]"];

/// Hard cap on tokens fed to the model per text.
pub const MAX_INPUT_TOKENS: usize = 1024;

/// Words that end with a period without terminating a sentence. Matched
/// case-insensitively against the word including its period.
pub const DEFAULT_ABBREVIATIONS: [&str; 14] = [
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "etc.", "e.g.", "i.e.", "vs.",
    "fig.", "no.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One raw JSONL record before tokenization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub document: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    /// Byte offsets of this sentence in the original text.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub reference: Option<Vec<u32>>,
}

impl Document {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// All sentence tokens flattened in order.
    pub fn tokens(&self) -> Vec<u32> {
        self.sentences.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn sentence_token_counts(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.tokens.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

/// Token <-> id bijection with the six reserved ids fixed at 0..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Assemble a vocabulary from already-ranked non-reserved tokens.
    pub fn from_tokens(real_tokens: Vec<String>) -> Vocab {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(real_tokens);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Count words over documents and summaries, rank by frequency with a
    /// lexicographic tie-break, and keep the top `max_size - 6`.
    pub fn build(records: &[RawRecord], max_size: usize) -> Result<Vocab> {
        if max_size < RESERVED_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} leaves no room for real tokens"
            )));
        }
        if records.is_empty() {
            return Err(Error::EmptyInput("vocabulary from empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for record in records {
            for (word, _) in split_words(&record.document) {
                *counts.entry(word).or_default() += 1;
            }
            if let Some(summary) = &record.summary {
                for (word, _) in split_words(summary) {
                    *counts.entry(word).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED_TOKENS.len());
        Ok(Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved tokens in id order (what the vocabulary file stores).
    pub fn real_tokens(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }

    /// One token per line; line number = id - 6. Reserved ids are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for token in self.real_tokens() {
            writeln!(f, "{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let f = std::fs::File::open(path)?;
        let mut real = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.is_empty() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: "empty vocabulary line".into(),
                });
            }
            real.push(line);
        }
        Ok(Vocab::from_tokens(real))
    }
}

/// Split text into sentences on `.`, `!`, `?` followed by whitespace (or
/// end of text), guarding the given abbreviations. Returns sentence
/// strings with byte spans into the original text.
pub fn segment_sentences(
    text: &str,
    abbreviations: &[&str],
) -> Result<Vec<(String, (usize, usize))>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("sentence segmentation".into()));
    }
    let bytes = text.as_bytes();
    let mut sentences = Vec::new();
    let mut start: Option<usize> = None;
    let mut iter = text.char_indices().peekable();
    while let Some((i, ch)) = iter.next() {
        if start.is_none() {
            if ch.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let at_boundary = match iter.peek() {
            None => true,
            Some((_, next)) => next.is_whitespace(),
        };
        if !at_boundary {
            continue;
        }
        if ch == '.' && is_guarded_abbreviation(bytes, i, abbreviations) {
            continue;
        }
        let s = start.take().expect("sentence start tracked");
        let end = i + ch.len_utf8();
        sentences.push((text[s..end].to_string(), (s, end)));
    }
    if let Some(s) = start {
        let end = text.len() - (text.len() - text.trim_end().len());
        if end > s {
            sentences.push((text[s..end].to_string(), (s, end)));
        }
    }
    Ok(sentences)
}

/// Whether the word ending at the period at byte `dot` matches the guard
/// list (case-insensitive, period included).
fn is_guarded_abbreviation(bytes: &[u8], dot: usize, abbreviations: &[&str]) -> bool {
    let mut word_start = dot;
    while word_start > 0 && !bytes[word_start - 1].is_ascii_whitespace() {
        word_start -= 1;
    }
    let word = std::str::from_utf8(&bytes[word_start..=dot]).unwrap_or("");
    let lower = word.to_lowercase();
    abbreviations.iter().any(|a| lower == a.to_lowercase())
}

/// Word tokenization against a vocabulary, truncated at
/// [`MAX_INPUT_TOKENS`]. Out-of-vocabulary words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut ids: Vec<u32> = split_words(text).iter().map(|(w, _)| vocab.id(w)).collect();
    ids.truncate(MAX_INPUT_TOKENS);
    ids
}

/// Inverse of [`tokenize`] up to whitespace normalization: tokens joined by
/// single spaces.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build a [`Document`] from a raw record: segment, tokenize per sentence,
/// and cap the total token count at `max_tokens` (whole sentences first,
/// then a tail truncation of the last kept sentence).
pub fn build_document(record: &RawRecord, vocab: &Vocab, max_tokens: usize) -> Result<Document> {
    if record.document.trim().is_empty() {
        return Err(Error::EmptyInput(format!("document `{}`", record.id)));
    }
    let max_tokens = max_tokens.max(1).min(MAX_INPUT_TOKENS);
    let mut sentences = Vec::new();
    let mut total = 0usize;
    for (sentence_text, span) in segment_sentences(&record.document, &DEFAULT_ABBREVIATIONS)? {
        if total >= max_tokens {
            break;
        }
        let mut tokens: Vec<u32> =
            split_words(&sentence_text).iter().map(|(w, _)| vocab.id(w)).collect();
        if tokens.is_empty() {
            continue;
        }
        tokens.truncate(max_tokens - total);
        total += tokens.len();
        sentences.push(Sentence { tokens, span });
    }
    if sentences.is_empty() {
        return Err(Error::EmptyInput(format!("document `{}` has no tokens", record.id)));
    }
    let reference = record
        .summary
        .as_ref()
        .filter(|s| !s.trim().is_empty())
        .map(|s| tokenize(s, vocab));
    Ok(Document { id: record.id.clone(), sentences, reference })
}

/// Build a corpus from records, preserving order and rejecting duplicate
/// ids within the split.
pub fn build_corpus(
    records: &[RawRecord],
    vocab: &Vocab,
    split: Split,
    max_tokens: usize,
) -> Result<Corpus> {
    if records.is_empty() {
        return Err(Error::EmptyInput(format!("{} corpus", split.as_str())));
    }
    let mut seen = HashMap::new();
    let mut documents = Vec::with_capacity(records.len());
    for record in records {
        if seen.insert(record.id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(record.id.clone()));
        }
        documents.push(build_document(record, vocab, max_tokens)?);
    }
    Ok(Corpus { documents, split })
}

/// Read a JSON Lines corpus file; blank lines are skipped, order preserved.
pub fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let f = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Salient-sentence budget: `clamp(ceil(lambda * s), 1, s - 1)` so both
/// clusters stay non-empty whenever the document has two or more
/// sentences; a single-sentence document is all salient.
pub fn salient_budget(lambda: f64, n_sentences: usize) -> usize {
    debug_assert!(n_sentences >= 1);
    if n_sentences == 1 {
        return 1;
    }
    let k = (lambda * n_sentences as f64).ceil() as usize;
    k.clamp(1, n_sentences - 1)
}

/// Greedy ROUGE oracle labels for discriminator supervision.
///
/// Repeatedly adds the sentence that most increases the mean of ROUGE-1 and
/// ROUGE-2 F1 of the selected set (concatenated in document order) against
/// the reference, with a lowest-index tie-break. Selection stops at
/// [`salient_budget`] sentences, or earlier once no candidate improves the
/// score; at least one sentence is always labeled salient.
pub fn oracle_salience_labels(doc: &Document, lambda: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
    }
    let reference = doc
        .reference
        .as_ref()
        .ok_or_else(|| Error::MissingReference(doc.id.clone()))?;
    let s = doc.sentences.len();
    let budget = salient_budget(lambda, s);
    let mut selected = vec![false; s];
    let mut best_score = f64::NEG_INFINITY;
    for round in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..s {
            if selected[i] {
                continue;
            }
            selected[i] = true;
            let candidate: Vec<u32> = doc
                .sentences
                .iter()
                .zip(&selected)
                .filter(|(_, &sel)| sel)
                .flat_map(|(sent, _)| sent.tokens.iter().copied())
                .collect();
            selected[i] = false;
            let score = rouge::score(&candidate, reference);
            let mean = (score.rouge1.f1 + score.rouge2.f1) / 2.0;
            if best.map_or(true, |(_, b)| mean > b) {
                best = Some((i, mean));
            }
        }
        let (idx, score) = best.expect("at least one unselected sentence");
        if round > 0 && score <= best_score {
            break;
        }
        selected[idx] = true;
        best_score = score;
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(text: &str) -> Vec<String> {
        segment_sentences(text, &DEFAULT_ABBREVIATIONS)
            .unwrap()
            .into_iter()
            .map(|(s, _)| s)
            .collect()
    }

    #[test]
    fn two_terminated_sentences() {
        assert_eq!(seg("A b. C d."), vec!["A b.", "C d."]);
    }

    #[test]
    fn no_delimiter_is_single_sentence() {
        assert_eq!(seg("Hello"), vec!["Hello"]);
    }

    #[test]
    fn abbreviation_guard() {
        assert_eq!(seg("Dr. Smith ran. He won!"), vec!["Dr. Smith ran.", "He won!"]);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            segment_sentences("   ", &DEFAULT_ABBREVIATIONS),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn spans_cover_non_gap_text() {
        let text = "A b. C d!  Tail";
        let spans = segment_sentences(text, &DEFAULT_ABBREVIATIONS).unwrap();
        let mut prev_end = 0;
        for (s, (start, end)) in &spans {
            assert!(*start >= prev_end, "spans must ascend");
            assert_eq!(&text[*start..*end], s);
            assert!(text[prev_end..*start].chars().all(char::is_whitespace));
            prev_end = *end;
        }
        assert!(text[prev_end..].chars().all(char::is_whitespace));
    }

    fn records(texts: &[(&str, &str)]) -> Vec<RawRecord> {
        texts
            .iter()
            .enumerate()
            .map(|(i, (doc, summary))| RawRecord {
                id: format!("d{i}"),
                document: doc.to_string(),
                summary: if summary.is_empty() { None } else { Some(summary.to_string()) },
            })
            .collect()
    }

    #[test]
    fn vocab_ranks_by_frequency_then_lexicographic() {
        let vocab = Vocab::build(&records(&[("a a b", "")]), 8).unwrap();
        assert!(vocab.contains("a") && vocab.contains("b"));
        assert!(vocab.id("a") < vocab.id("b"));
    }

    #[test]
    fn vocab_tie_break_at_capacity() {
        let vocab = Vocab::build(&records(&[("a b", "")]), 7).unwrap();
        assert_eq!(vocab.real_tokens(), &["a".to_string()]);
        assert_eq!(vocab.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_rejects_empty_and_tiny() {
        assert!(matches!(Vocab::build(&[], 10), Err(Error::EmptyInput(_))));
        assert!(Vocab::build(&records(&[("a", "")]), 6).is_err());
    }

    #[test]
    fn oov_maps_to_unk() {
        let vocab = Vocab::build(&records(&[("a b", "")]), 10).unwrap();
        assert_eq!(vocab.id("zzz"), UNK_ID);
        assert_eq!(tokenize("zzz", &vocab), vec![UNK_ID]);
    }

    #[test]
    fn tokenize_basics() {
        let vocab = Vocab::build(&records(&[("a b", "")]), 10).unwrap();
        assert_eq!(tokenize("a b", &vocab), vec![vocab.id("a"), vocab.id("b")]);
        assert_eq!(tokenize("", &vocab), Vec::<u32>::new());
    }

    #[test]
    fn tokenize_truncates_at_max_input() {
        let vocab = Vocab::build(&records(&[("a", "")]), 10).unwrap();
        let long = vec!["a"; 2000].join(" ");
        assert_eq!(tokenize(&long, &vocab).len(), MAX_INPUT_TOKENS);
    }

    #[test]
    fn detokenize_round_trip_on_normalized_text() {
        let vocab = Vocab::build(&records(&[("the cat sat on the mat .", "")]), 32).unwrap();
        let text = "the cat sat . on mat";
        let ids = tokenize(text, &vocab);
        assert_eq!(detokenize(&ids, &vocab), text);
        assert_eq!(tokenize(&detokenize(&ids, &vocab), &vocab), ids);
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = Vocab::build(&records(&[("gamma beta beta alpha alpha alpha", "")]), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        // line number = id - 6
        let first_line = std::fs::read_to_string(&path).unwrap();
        assert_eq!(first_line.lines().next().unwrap(), vocab.token(6));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let vocab = Vocab::build(&records(&[("a b", "")]), 10).unwrap();
        let mut recs = records(&[("a b", ""), ("b a", "")]);
        recs[1].id = recs[0].id.clone();
        assert!(matches!(
            build_corpus(&recs, &vocab, Split::Train, 64),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn document_token_counts_partition() {
        let recs = records(&[("A b. C d e! F?", "")]);
        let vocab = Vocab::build(&recs, 32).unwrap();
        let doc = build_document(&recs[0], &vocab, 64).unwrap();
        assert_eq!(
            doc.token_count(),
            doc.sentences.iter().map(|s| s.tokens.len()).sum::<usize>()
        );
        assert_eq!(doc.tokens().len(), doc.token_count());
        assert_eq!(doc.sentences.len(), 3);
    }

    fn oracle_doc(sentences: &[&str], reference: &str) -> (Document, Vocab) {
        let text = sentences.join(". ");
        let recs = records(&[(text.as_str(), reference)]);
        let vocab = Vocab::build(&recs, 64).unwrap();
        let doc = build_document(&recs[0], &vocab, 128).unwrap();
        (doc, vocab)
    }

    #[test]
    fn oracle_picks_matching_sentence_and_stops_when_stalled() {
        let (doc, _) = oracle_doc(&["a b c", "d e", "a b"], "a b c");
        assert_eq!(doc.sentences.len(), 3);
        let labels = oracle_salience_labels(&doc, 0.34).unwrap();
        assert_eq!(labels, vec![true, false, false]);
    }

    #[test]
    fn oracle_budget_is_clamped_to_keep_both_clusters() {
        assert_eq!(salient_budget(1.0, 3), 2);
        assert_eq!(salient_budget(1.0, 5), 4);
        assert_eq!(salient_budget(0.0, 5), 1);
        let (doc, _) = oracle_doc(&["a b", "c d", "e f"], "a b c d e f");
        let labels = oracle_salience_labels(&doc, 1.0).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l).count(), 2);
    }

    #[test]
    fn single_sentence_document_is_all_salient() {
        let (doc, _) = oracle_doc(&["a b"], "q r");
        let labels = oracle_salience_labels(&doc, 0.5).unwrap();
        assert_eq!(labels, vec![true]);
    }

    #[test]
    fn oracle_requires_reference() {
        let recs = records(&[("a b. c d.", "")]);
        let vocab = Vocab::build(&recs, 16).unwrap();
        let doc = build_document(&recs[0], &vocab, 64).unwrap();
        assert!(matches!(
            oracle_salience_labels(&doc, 0.5),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn oracle_monotone_in_lambda() {
        let (doc, _) = oracle_doc(
            &["a b c", "d e f", "a d", "g h", "b e"],
            "a b c d e f",
        );
        let mut previous: Option<Vec<bool>> = None;
        for lambda in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let labels = oracle_salience_labels(&doc, lambda).unwrap();
            if let Some(prev) = &previous {
                for (p, l) in prev.iter().zip(&labels) {
                    assert!(!p | l, "salient set must nest as lambda grows");
                }
            }
            previous = Some(labels);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = records(&[("First doc. Body.", "summary one"), ("Second doc!", "")]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_jsonl(&path, &recs).unwrap();
        let loaded = read_jsonl(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, recs[0].id);
        assert_eq!(loaded[0].summary.as_deref(), Some("summary one"));
        assert!(loaded[1].summary.is_none());
    }

    #[test]
    fn jsonl_reports_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"x\"}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Format { .. })));
    }
}
