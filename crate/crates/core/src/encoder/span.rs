use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{encoder_tokens, Encoder, EncoderConfig, EncoderError, SequenceEncoding, Vocab};
use crate::neural_kernels::checkpoint::{load_params, save_params};
use crate::neural_kernels::ops::dot;
use crate::neural_kernels::{seeded_rng, ParamSet, Parameter, Tensor};
use crate::text_prep::{tokenize, Token};

/// Start and end vectors `S`, `E` of the span scorer `S·T_i + E·T_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanHead {
    pub start_vector: Parameter,
    pub end_vector: Parameter,
}

impl SpanHead {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            start_vector: Parameter::new("span_head.start_vector", Tensor::zeros(&[hidden])),
            end_vector: Parameter::new("span_head.end_vector", Tensor::zeros(&[hidden])),
        }
    }

    /// Start and end scores of the rows `offset..offset + len` of `reps`.
    pub fn scores(&self, reps: &Tensor, offset: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
        let s = self.start_vector.value.data();
        let e = self.end_vector.value.data();
        (offset..offset + len)
            .map(|t| (dot(s, reps.row(t)), dot(e, reps.row(t))))
            .unzip()
    }
}

impl ParamSet for SpanHead {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.start_vector);
        f(&self.end_vector);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.start_vector);
        f(&mut self.end_vector);
    }
}

/// A contiguous token range of the passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub score: f64,
}

/// Number of `(i, j)` pairs with `i <= j < n` and `j - i + 1 <= max_len`.
pub fn legal_span_count(n: usize, max_len: usize) -> usize {
    (0..n).map(|i| (n - i).min(max_len)).sum()
}

/// Highest-scoring legal span; ties go to the smallest `i`, then smallest `j`.
pub fn best_span(start: &[f64], end: &[f64], max_len: usize) -> Option<(usize, usize, f64)> {
    let n = start.len().min(end.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        for j in i..n.min(i + max_len) {
            let s = start[i] + end[j];
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((i, j, s));
            }
        }
    }
    best
}

/// Spans whose joint probability (softmax over every legal pair) is at least
/// `ratio` times the best one, minus spans contained in another survivor,
/// ordered by start. `ratio` is capped at 1.
pub fn select_multi_spans(
    start: &[f64],
    end: &[f64],
    max_len: usize,
    ratio: f64,
) -> Result<Vec<(usize, usize, f64)>, EncoderError> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(EncoderError::Input(format!("ratio must be positive, got {ratio}")));
    }
    let Some(best) = best_span(start, end, max_len) else {
        return Err(EncoderError::Input("no legal span".into()));
    };
    if ratio >= 1.0 {
        return Ok(vec![best]);
    }
    let threshold = best.2 + ratio.ln();
    let n = start.len().min(end.len());
    let mut kept = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + max_len) {
            let s = start[i] + end[j];
            if s >= threshold {
                kept.push((i, j, s));
            }
        }
    }
    let survivors: Vec<(usize, usize, f64)> = kept
        .iter()
        .filter(|&&(i, j, _)| !kept.iter().any(|&(a, b, _)| (a, b) != (i, j) && a <= i && j <= b))
        .copied()
        .collect();
    Ok(survivors)
}

/// Several spans spliced into one reference text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSpan {
    pub spans: Vec<ReferenceSpan>,
    pub text: String,
}

impl MultiSpan {
    pub fn from_spans(spans: Vec<ReferenceSpan>) -> Self {
        let text = spans.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(". ");
        Self { spans, text }
    }
}

fn span_text(passage: &str, tokens: &[Token], i: usize, j: usize) -> String {
    passage[tokens[i].char_span.0..tokens[j].char_span.1].to_string()
}

/// Source of reference spans.
pub trait ReferenceFinder {
    fn find(&self, question: &str, passage: &str) -> Result<ReferenceSpan, EncoderError>;

    fn find_multi(&self, question: &str, passage: &str, _ratio: f64) -> Result<MultiSpan, EncoderError> {
        Ok(MultiSpan::from_spans(vec![self.find(question, passage)?]))
    }
}

/// Uses the entire passage as the reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct WholePassage;

impl ReferenceFinder for WholePassage {
    fn find(&self, _question: &str, passage: &str) -> Result<ReferenceSpan, EncoderError> {
        let n = tokenize(passage).len();
        if n == 0 {
            return Err(EncoderError::Input("passage is empty".into()));
        }
        Ok(ReferenceSpan {
            start: 0,
            end: n - 1,
            text: passage.trim().to_string(),
            score: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub encoder: EncoderConfig,
    pub max_reference_len: usize,
}

/// Encoder plus span head, run over `[START] Q' [SEP] P [SEP]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanExtractor {
    pub config: ExtractorConfig,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub head: SpanHead,
}

/// Encoded question/passage pair with the passage token bookkeeping.
pub(crate) struct EncodedPair {
    pub(crate) passage_tokens: Vec<Token>,
    pub(crate) seq: super::Assembled,
    pub(crate) encoding: SequenceEncoding,
}

impl SpanExtractor {
    pub fn new(config: ExtractorConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        let mut enc_cfg = config.encoder.clone();
        enc_cfg.vocab_size = vocab.len();
        let encoder = Encoder::new("extractor", enc_cfg.clone(), &mut seeded_rng(seed))?;
        Ok(Self {
            config: ExtractorConfig {
                encoder: enc_cfg,
                ..config
            },
            vocab,
            head: SpanHead::zeros(encoder.hidden()),
            encoder,
        })
    }

    pub(crate) fn assemble(
        &self,
        question: &str,
        passage: &str,
    ) -> Result<(Vec<Token>, super::Assembled), EncoderError> {
        let passage_tokens = tokenize(passage);
        if passage_tokens.is_empty() {
            return Err(EncoderError::Input("passage is empty".into()));
        }
        let q_ids = self.vocab.ids(&encoder_tokens(question));
        let p_ids: Vec<u32> = passage_tokens
            .iter()
            .map(|t| self.vocab.id(&t.surface.to_lowercase()))
            .collect();
        let seq = self.encoder.assemble(&q_ids, &p_ids)?;
        Ok((passage_tokens, seq))
    }

    pub(crate) fn encode_pair(&self, question: &str, passage: &str) -> Result<EncodedPair, EncoderError> {
        let (passage_tokens, seq) = self.assemble(question, passage)?;
        let (encoding, _) = self.encoder.forward(&seq, None)?;
        Ok(EncodedPair {
            passage_tokens,
            seq,
            encoding,
        })
    }

    /// Start/end scores over the passage positions that fit in the sequence.
    pub fn passage_scores(&self, question: &str, passage: &str) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        let pair = self.encode_pair(question, passage)?;
        Ok(self
            .head
            .scores(&pair.encoding.token_reps, pair.seq.second_offset, pair.seq.second_len))
    }

    pub fn extract_span(&self, question: &str, passage: &str) -> Result<ReferenceSpan, EncoderError> {
        let pair = self.encode_pair(question, passage)?;
        let (s, e) = self
            .head
            .scores(&pair.encoding.token_reps, pair.seq.second_offset, pair.seq.second_len);
        let (i, j, score) = best_span(&s, &e, self.config.max_reference_len)
            .ok_or_else(|| EncoderError::Input("passage has no legal span".into()))?;
        Ok(ReferenceSpan {
            start: i,
            end: j,
            text: span_text(passage, &pair.passage_tokens, i, j),
            score,
        })
    }

    pub fn extract_multi_spans(&self, question: &str, passage: &str, ratio: f64) -> Result<MultiSpan, EncoderError> {
        let pair = self.encode_pair(question, passage)?;
        let (s, e) = self
            .head
            .scores(&pair.encoding.token_reps, pair.seq.second_offset, pair.seq.second_len);
        let spans = select_multi_spans(&s, &e, self.config.max_reference_len, ratio)?
            .into_iter()
            .map(|(i, j, score)| ReferenceSpan {
                start: i,
                end: j,
                text: span_text(passage, &pair.passage_tokens, i, j),
                score,
            })
            .collect();
        Ok(MultiSpan::from_spans(spans))
    }

    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        save_params(self, dir)?;
        fs::write(
            dir.join("extractor.json"),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        self.vocab.save(&dir.join("vocab.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let config: ExtractorConfig = serde_json::from_str(&fs::read_to_string(dir.join("extractor.json"))?)?;
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(EncoderError::Config("vocabulary size does not match the config".into()));
        }
        let mut extractor = Self::new(config, vocab, 0)?;
        load_params(&mut extractor, dir)?;
        Ok(extractor)
    }
}

impl ParamSet for SpanExtractor {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl ReferenceFinder for SpanExtractor {
    fn find(&self, question: &str, passage: &str) -> Result<ReferenceSpan, EncoderError> {
        self.extract_span(question, passage)
    }

    fn find_multi(&self, question: &str, passage: &str, ratio: f64) -> Result<MultiSpan, EncoderError> {
        self.extract_multi_spans(question, passage, ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_passage() {
        let (i, j, s) = best_span(&[0.4], &[-0.1], 4).unwrap();
        assert_eq!((i, j), (0, 0));
        assert!((s - 0.3).abs() < 1e-15);
    }

    #[test]
    fn planted_peaks_recovered() {
        // reps whose first coordinate peaks at position 3 and second at 5
        let n = 8;
        let mut reps = Tensor::zeros(&[n, 4]);
        for t in 0..n {
            reps.row_mut(t)[0] = -((t as f64) - 3.0).powi(2);
            reps.row_mut(t)[1] = -((t as f64) - 5.0).powi(2);
        }
        let mut head = SpanHead::zeros(4);
        head.start_vector.value.data_mut()[0] = 1.0;
        head.end_vector.value.data_mut()[1] = 1.0;
        let (s, e) = head.scores(&reps, 0, n);
        assert_eq!(best_span(&s, &e, 4).map(|b| (b.0, b.1)), Some((3, 5)));
        // a length cap that excludes (3, 5) falls back to the best legal pair
        let (i, j, _) = best_span(&s, &e, 2).unwrap();
        assert!(j - i < 2);
    }

    #[test]
    fn ties_prefer_smallest_indices() {
        assert_eq!(best_span(&[1.0, 1.0], &[0.0, 0.0], 3).map(|b| (b.0, b.1)), Some((0, 0)));
    }

    #[test]
    fn only_best_survives_when_it_dominates() {
        let s = [5.0, 0.0, 0.0];
        let e = [5.0, 0.0, 0.0];
        assert_eq!(select_multi_spans(&s, &e, 3, 0.7).unwrap(), vec![(0, 0, 10.0)]);
    }

    #[test]
    fn ratio_one_and_above_is_single_best() {
        let s = [1.0, 1.0];
        let e = [1.0, 1.0];
        assert_eq!(select_multi_spans(&s, &e, 2, 1.0).unwrap().len(), 1);
        assert_eq!(select_multi_spans(&s, &e, 2, 1.5).unwrap().len(), 1);
        assert!(select_multi_spans(&s, &e, 2, 0.0).is_err());
    }

    #[test]
    fn span_counting() {
        assert_eq!(legal_span_count(4, 4), 10);
        assert_eq!(legal_span_count(4, 1), 4);
        assert_eq!(legal_span_count(5, 2), 9);
    }

    #[test]
    fn whole_passage_reference() {
        let r = WholePassage.find("q", " the cat sat. ").unwrap();
        assert_eq!((r.start, r.end), (0, 3));
        assert_eq!(r.text, "the cat sat.");
        assert!(WholePassage.find("q", "   ").is_err());
    }
}
