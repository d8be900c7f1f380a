//! Tokenization, prototype (lemma) computation, sentence splitting and the
//! TF-IDF sentence selection baseline.
//!
//! Everything here is a pure function of its input. The lemmatizer is a small
//! rule-based stemmer backed by an irregular-form table shipped as
//! `assets/lemma_exceptions.tsv`.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("no sentences to select from")]
    NoSentences,
    #[error("threshold ratio must lie in (0, 1], got {0}")]
    BadRatio(f64),
}

/// One token of a source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub prototype: String,
    /// Byte offsets `[start, end)` into the source text.
    pub char_span: (usize, usize),
}

impl Token {
    /// True when the surface contains at least one letter or digit.
    pub fn is_word(&self) -> bool {
        self.surface.chars().any(char::is_alphanumeric)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits `text` into maximal runs of letters, digits and apostrophes; any
/// other non-whitespace character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run_start: Option<usize> = None;
    let push = |tokens: &mut Vec<Token>, start: usize, end: usize| {
        let surface = &text[start..end];
        tokens.push(Token {
            surface: surface.to_string(),
            prototype: prototype(surface),
            char_span: (start, end),
        });
    };
    for (idx, c) in text.char_indices() {
        if is_word_char(c) {
            run_start.get_or_insert(idx);
            continue;
        }
        if let Some(start) = run_start.take() {
            push(&mut tokens, start, idx);
        }
        if !c.is_whitespace() {
            push(&mut tokens, idx, idx + c.len_utf8());
        }
    }
    if let Some(start) = run_start {
        push(&mut tokens, start, text.len());
    }
    tokens
}

/// Raw contents of the irregular-form table.
pub const LEMMA_EXCEPTIONS_TSV: &str = include_str!("../assets/lemma_exceptions.tsv");

/// Parsed `(surface, lemma)` pairs of the irregular-form table, in file order.
pub fn lemma_exceptions() -> &'static [(String, String)] {
    static TABLE: OnceLock<Vec<(String, String)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        LEMMA_EXCEPTIONS_TSV
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let (surface, lemma) = l.split_once('\t')?;
                Some((surface.trim().to_string(), lemma.trim().to_string()))
            })
            .collect()
    })
}

fn exception_map() -> &'static HashMap<String, String> {
    static MAP: OnceLock<HashMap<String, String>> = OnceLock::new();
    MAP.get_or_init(|| lemma_exceptions().iter().cloned().collect())
}

const MIN_STEM: usize = 3;

fn is_vowel(b: u8) -> bool {
    matches!(b, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn has_vowel(stem: &[u8]) -> bool {
    stem.iter().any(|&b| is_vowel(b) || b == b'y')
}

/// Undo consonant doubling or restore a dropped silent `e` after `-ing`/`-ed`.
fn restore_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    let last = b[n - 1];
    if n >= 2 && b[n - 2] == last && !is_vowel(last) && !matches!(last, b'l' | b's' | b'z') {
        return stem[..n - 1].to_string();
    }
    let needs_e = match last {
        b'v' | b'c' | b'z' => true,
        b's' => n >= 2 && is_vowel(b[n - 2]),
        _ => {
            let cvc = n >= 3
                && !is_vowel(b[n - 3])
                && is_vowel(b[n - 2])
                && !is_vowel(last)
                && !matches!(last, b'w' | b'x' | b'y');
            (n == 3 && cvc) || (n >= 4 && cvc && last == b't' && b[n - 2] == b'a')
        }
    };
    if needs_e {
        format!("{stem}e")
    } else {
        stem.to_string()
    }
}

fn apply_rules_once(word: &str) -> String {
    if let Some(lemma) = exception_map().get(word) {
        return lemma.clone();
    }
    if !word.is_ascii() {
        return word.to_string();
    }
    let b = word.as_bytes();
    if let Some(stem) = word.strip_suffix("ies") {
        if stem.len() >= MIN_STEM {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = word.strip_suffix("ing") {
        if stem.len() >= MIN_STEM && has_vowel(stem.as_bytes()) {
            return restore_stem(stem);
        }
    }
    if let Some(stem) = word.strip_suffix("ed") {
        if stem.len() >= MIN_STEM && has_vowel(stem.as_bytes()) && !stem.ends_with('e') {
            return restore_stem(stem);
        }
    }
    if let Some(stem) = word.strip_suffix("es") {
        let sibilant = ["s", "x", "z", "ch", "sh"].iter().any(|s| stem.ends_with(s));
        if stem.len() >= MIN_STEM && sibilant {
            return stem.to_string();
        }
    }
    if b.len() > MIN_STEM && b[b.len() - 1] == b's' && !matches!(b[b.len() - 2], b's' | b'u' | b'i') {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

/// Lowercase lemma of a surface form.
///
/// Rules are applied until a fixed point is reached, so the function is
/// idempotent. Surfaces without letters or digits map to their lowercase form.
pub fn prototype(surface: &str) -> String {
    let mut current = surface.to_lowercase();
    if !current.chars().any(char::is_alphanumeric) {
        return current;
    }
    for _ in 0..8 {
        let next = apply_rules_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Distinct prototypes of the word tokens of `text`, in first-occurrence order.
pub fn word_prototypes(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(text)
        .into_iter()
        .filter(Token::is_word)
        .filter_map(|t| seen.insert(t.prototype.clone()).then_some(t.prototype))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    /// Sentence text with surrounding whitespace trimmed.
    pub text: String,
    /// Byte span including trailing whitespace; consecutive spans tile the source.
    pub span: (usize, usize),
}

/// Splits on `.`, `!`, `?` followed by whitespace or end of text, and on every
/// newline. Whitespace-only stretches are folded into a neighbouring span.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut bounds = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (_, c) = chars[i];
        let next_is_space = chars.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if c == '\n' || (matches!(c, '.' | '!' | '?') && next_is_space) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            bounds.push(chars.get(j).map_or(text.len(), |&(b, _)| b));
            i = j;
        } else {
            i += 1;
        }
    }
    if bounds.last() != Some(&text.len()) {
        bounds.push(text.len());
    }

    let mut sentences: Vec<Sentence> = Vec::new();
    let mut start = 0;
    for end in bounds {
        if end <= start {
            continue;
        }
        let piece = text[start..end].trim();
        if piece.is_empty() {
            match sentences.last_mut() {
                Some(prev) => prev.span.1 = end,
                None => {
                    // leading whitespace: leave `start` in place so the next
                    // sentence absorbs it
                    continue;
                }
            }
        } else {
            sentences.push(Sentence {
                text: piece.to_string(),
                span: (start, end),
            });
        }
        start = end;
    }
    sentences
}

/// Term statistics over a set of passage sentences.
#[derive(Debug, Clone)]
pub struct TfIdfModel {
    pub document_frequency: HashMap<String, usize>,
    pub document_count: usize,
    pub term_frequencies: Vec<HashMap<String, usize>>,
}

impl TfIdfModel {
    pub fn fit<S: AsRef<str>>(sentences: &[S]) -> Result<Self, TextError> {
        if sentences.is_empty() {
            return Err(TextError::NoSentences);
        }
        let mut document_frequency: HashMap<String, usize> = HashMap::new();
        let mut term_frequencies = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let mut tf: HashMap<String, usize> = HashMap::new();
            for tok in tokenize(sentence.as_ref()).into_iter().filter(Token::is_word) {
                *tf.entry(tok.prototype).or_default() += 1;
            }
            for term in tf.keys() {
                *document_frequency.entry(term.clone()).or_default() += 1;
            }
            term_frequencies.push(tf);
        }
        Ok(Self {
            document_frequency,
            document_count: sentences.len(),
            term_frequencies,
        })
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.document_frequency.get(term).copied().unwrap_or(0) as f64;
        ((1.0 + self.document_count as f64) / (1.0 + df)).ln() + 1.0
    }

    /// Score of every sentence against the distinct word prototypes of `question`.
    pub fn scores(&self, question: &str) -> Vec<f64> {
        let terms = word_prototypes(question);
        self.term_frequencies
            .iter()
            .map(|tf| {
                terms
                    .iter()
                    .map(|t| tf.get(t).copied().unwrap_or(0) as f64 * self.idf(t))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Selected sentences joined with a single space, in passage order.
    pub text: String,
}

/// Keeps every sentence whose score reaches `threshold_ratio * s_max`.
///
/// When no sentence shares a term with the question the first sentence is
/// returned.
pub fn tfidf_select<S: AsRef<str>>(
    sentences: &[S],
    question: &str,
    threshold_ratio: f64,
) -> Result<TfIdfSelection, TextError> {
    if !(threshold_ratio > 0.0 && threshold_ratio <= 1.0) {
        return Err(TextError::BadRatio(threshold_ratio));
    }
    let model = TfIdfModel::fit(sentences)?;
    let scores = model.scores(question);
    let s_max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let indices: Vec<usize> = if s_max <= 0.0 {
        vec![0]
    } else {
        let cut = threshold_ratio * s_max;
        (0..scores.len()).filter(|&i| scores[i] >= cut).collect()
    };
    let text = indices
        .iter()
        .map(|&i| sentences[i].as_ref())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(TfIdfSelection { indices, scores, text })
}
