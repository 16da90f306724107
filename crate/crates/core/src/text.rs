//! Word-level text splitting shared by the tokenizer and the ROUGE scorer.

/// Split text into word tokens with byte spans. A token is either a maximal
/// run of alphanumeric characters (plus `'` inside a word) or a single
/// non-whitespace punctuation character.
pub fn split_words(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let is_word_char = ch.is_alphanumeric() || (ch == '\'' && word_start.is_some());
        if is_word_char {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(start) = word_start.take() {
            out.push((text[start..i].to_string(), (start, i)));
        }
        if !ch.is_whitespace() {
            out.push((ch.to_string(), (i, i + ch.len_utf8())));
        }
    }
    if let Some(start) = word_start {
        out.push((text[start..].to_string(), (start, text.len())));
    }
    out
}

/// Lowercased word tokens with punctuation-only tokens dropped; the token
/// stream ROUGE text scoring runs on.
pub fn normalized_words(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|(w, _)| w.chars().any(char::is_alphanumeric))
        .map(|(w, _)| w.to_lowercase())
        .collect()
}
