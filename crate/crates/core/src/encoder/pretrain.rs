use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::span::ExtractorConfig;
use super::{encoder_tokens, EncoderConfig, EncoderError, SpanExtractor, Vocab};
use crate::neural_kernels::ops::{axpy, softmax_cross_entropy};
use crate::neural_kernels::{seeded_rng, Adam, ParamSet};
use crate::text_prep::tokenize;

/// One span-supervision record; token indices refer to the passage tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanItem {
    pub question: String,
    pub passage: String,
    pub answer_start_token: usize,
    pub answer_end_token: usize,
}

pub fn load_span_dataset(path: &Path) -> Result<Vec<SpanItem>, EncoderError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EncoderError::Dataset(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_span_dataset(path: &Path, items: &[SpanItem]) -> Result<(), EncoderError> {
    let mut out = fs::File::create(path)?;
    for item in items {
        writeln!(out, "{}", serde_json::to_string(item)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub max_reference_len: usize,
    pub min_token_count: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                embed_dim: 48,
                hidden: 48,
                embedding_std: 1.0,
                ..EncoderConfig::default()
            },
            max_reference_len: 16,
            min_token_count: 2,
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 25,
            clip_norm: 5.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub train_exact_match: f64,
}

/// Fraction of items whose extracted span equals the gold token range.
pub fn exact_match_rate(extractor: &SpanExtractor, items: &[SpanItem]) -> Result<f64, EncoderError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for item in items {
        let span = extractor.extract_span(&item.question, &item.passage)?;
        if (span.start, span.end) == (item.answer_start_token, item.answer_end_token) {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

fn validate_items(items: &[SpanItem], max_len: usize) -> Result<(), EncoderError> {
    for (i, item) in items.iter().enumerate() {
        let n = tokenize(&item.passage).len();
        let (s, e) = (item.answer_start_token, item.answer_end_token);
        if s > e || e >= n {
            return Err(EncoderError::Dataset(format!(
                "item {i}: gold span ({s}, {e}) outside a passage of {n} tokens"
            )));
        }
        if e - s + 1 > max_len {
            return Err(EncoderError::Dataset(format!(
                "item {i}: gold span longer than the maximum reference length"
            )));
        }
    }
    Ok(())
}

/// Loss of one item; gradients are accumulated into `extractor`.
fn item_step(
    extractor: &mut SpanExtractor,
    item: &SpanItem,
    rng: &mut crate::neural_kernels::Rng64,
) -> Result<f64, EncoderError> {
    let (_, seq) = extractor.assemble(&item.question, &item.passage)?;
    if item.answer_end_token >= seq.second_len {
        return Err(EncoderError::Dataset(
            "gold span falls outside the encoded passage window".into(),
        ));
    }
    let train_rng = (extractor.config.encoder.dropout > 0.0).then_some(rng);
    let (enc, cache) = extractor.encoder.forward(&seq, train_rng)?;
    let off = seq.second_offset;
    let (s, e) = extractor.head.scores(&enc.token_reps, off, seq.second_len);
    let (ls, _, gs) = softmax_cross_entropy(&s, item.answer_start_token)?;
    let (le, _, ge) = softmax_cross_entropy(&e, item.answer_end_token)?;
    let h = extractor.encoder.hidden();
    let mut d_reps = vec![vec![0.0; h]; seq.ids.len()];
    let head = &mut extractor.head;
    for i in 0..seq.second_len {
        let t = enc.token_reps.row(off + i);
        axpy(gs[i], head.start_vector.value.data(), &mut d_reps[off + i]);
        axpy(ge[i], head.end_vector.value.data(), &mut d_reps[off + i]);
        axpy(gs[i], t, head.start_vector.grad.data_mut());
        axpy(ge[i], t, head.end_vector.grad.data_mut());
    }
    extractor.encoder.backward(&cache, &d_reps);
    Ok(ls + le)
}

/// Multiplies every gradient by `scale`, then rescales the whole gradient so
/// its global norm is at most `clip_norm` (when positive).
pub fn scale_and_clip<P: ParamSet + ?Sized>(params: &mut P, scale: f64, clip_norm: f64) {
    let mut sq = 0.0;
    params.visit_mut(&mut |p| {
        for g in p.grad.data_mut() {
            *g *= scale;
            sq += *g * *g;
        }
    });
    let norm = sq.sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let f = clip_norm / norm;
        params.visit_mut(&mut |p| p.grad.data_mut().iter_mut().for_each(|g| *g *= f));
    }
}

/// Trains a fresh extractor (encoder plus span head) by the summed start and
/// end cross-entropy over passage positions.
pub fn pretrain_span_head(
    items: &[SpanItem],
    config: &PretrainConfig,
) -> Result<(SpanExtractor, PretrainReport), EncoderError> {
    validate_items(items, config.max_reference_len)?;
    if config.batch_size == 0 || config.learning_rate <= 0.0 {
        return Err(EncoderError::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let corpus: Vec<String> = items
        .iter()
        .flat_map(|it| {
            encoder_tokens(&it.question)
                .into_iter()
                .chain(encoder_tokens(&it.passage))
        })
        .collect();
    let vocab = Vocab::build(
        corpus.iter().map(String::as_str),
        config.encoder.vocab_size,
        config.min_token_count,
    );
    let mut extractor = SpanExtractor::new(
        ExtractorConfig {
            encoder: config.encoder.clone(),
            max_reference_len: config.max_reference_len,
        },
        vocab,
        config.seed,
    )?;
    let mut rng = seeded_rng(config.seed ^ 0x5eed);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            extractor.zero_grad();
            for &idx in batch {
                total += item_step(&mut extractor, &items[idx], &mut rng)?;
            }
            scale_and_clip(&mut extractor, 1.0 / batch.len() as f64, config.clip_norm);
            adam.update(&mut extractor, config.learning_rate, &|_| true);
            steps += 1;
        }
        epoch_losses.push(if items.is_empty() {
            0.0
        } else {
            total / items.len() as f64
        });
    }
    let train_exact_match = exact_match_rate(&extractor, items)?;
    Ok((
        extractor,
        PretrainReport {
            steps,
            epoch_losses,
            train_exact_match,
        },
    ))
}
