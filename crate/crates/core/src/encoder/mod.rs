//! Contextual encoder and the reference span extractor.
//!
//! The encoder is a small trainable stand-in for a pre-trained contextual
//! model: token and position embeddings feed a stack of bidirectional GRU
//! layers. A sequence is laid out as `[START] first [SEP] second [SEP]` and
//! the row at position 0 is the pooled summary.

mod pretrain;
mod span;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural_kernels::{dropout, GruCache, GruWeights, KernelError, ParamSet, Parameter, Rng64, Tensor};

pub use pretrain::{
    exact_match_rate, load_span_dataset, pretrain_span_head, scale_and_clip, write_span_dataset, PretrainConfig,
    PretrainReport, SpanItem,
};
pub use span::{
    best_span, legal_span_count, select_multi_spans, ExtractorConfig, MultiSpan, ReferenceFinder, ReferenceSpan,
    SpanExtractor, SpanHead, WholePassage,
};
pub use vocab::{Vocab, SEP_ID, START_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input error: {0}")]
    Input(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const EMBEDDING_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Standard deviation of the token and position embedding init.
    pub embedding_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            embed_dim: 64,
            hidden: 64,
            layers: 2,
            max_seq_len: 64,
            dropout: 0.0,
            embedding_std: EMBEDDING_STD,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(EncoderError::Config(format!(
                "hidden size must be even, got {}",
                self.hidden
            )));
        }
        if self.max_seq_len < 16 {
            return Err(EncoderError::Config("max sequence length must be at least 16".into()));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.vocab_size < 3 {
            return Err(EncoderError::Config(
                "layers, embed_dim and vocab_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoding {
    pub token_reps: Tensor,
    pub pooled: Tensor,
    pub token_segments: Vec<Segment>,
}

/// Token ids of an assembled `[START] first [SEP] second [SEP]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    /// Sequence position of the first token of the second segment.
    pub second_offset: usize,
    /// How many second-segment tokens survived truncation.
    pub second_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiGru {
    pub forward: GruWeights,
    pub backward: GruWeights,
}

#[derive(Debug, Clone)]
struct LayerCache {
    forward: Vec<GruCache>,
    backward: Vec<GruCache>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<u32>,
    dropout_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embeddings: Parameter,
    pub position_embeddings: Parameter,
    pub layers: Vec<BiGru>,
}

impl Encoder {
    pub fn new(prefix: &str, config: EncoderConfig, rng: &mut Rng64) -> Result<Self, EncoderError> {
        config.validate()?;
        let e = config.embed_dim;
        let half = config.hidden / 2;
        let token_embeddings = Parameter::new(
            format!("{prefix}.token_embeddings"),
            Tensor::normal(&[config.vocab_size, e], config.embedding_std, rng),
        );
        let position_embeddings = Parameter::new(
            format!("{prefix}.position_embeddings"),
            Tensor::normal(&[config.max_seq_len, e], config.embedding_std, rng),
        );
        let layers = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { e } else { config.hidden };
                BiGru {
                    forward: GruWeights::new(&format!("{prefix}.layer{l}.forward"), d_in, half, rng),
                    backward: GruWeights::new(&format!("{prefix}.layer{l}.backward"), d_in, half, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            token_embeddings,
            position_embeddings,
            layers,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Lays out two id segments, truncating the first from the right (then
    /// the second, if it alone is too long) to fit the sequence budget.
    pub fn assemble(&self, first: &[u32], second: &[u32]) -> Result<Assembled, EncoderError> {
        if first.is_empty() && second.is_empty() {
            return Err(EncoderError::Input("both segments are empty".into()));
        }
        let budget = self.config.max_seq_len - 3;
        let second_len = second.len().min(budget);
        let first_len = first.len().min(budget - second_len);
        let mut ids = Vec::with_capacity(first_len + second_len + 3);
        let mut segments = Vec::with_capacity(ids.capacity());
        ids.push(START_ID);
        ids.extend_from_slice(&first[..first_len]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), Segment::First);
        let second_offset = ids.len();
        ids.extend_from_slice(&second[..second_len]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), Segment::Second);
        Ok(Assembled {
            ids,
            segments,
            second_offset,
            second_len,
        })
    }

    /// Encodes an assembled sequence. Dropout on the input embeddings is
    /// active only when `rng` is given.
    pub fn forward(
        &self,
        seq: &Assembled,
        rng: Option<&mut Rng64>,
    ) -> Result<(SequenceEncoding, EncoderCache), EncoderError> {
        let e = self.config.embed_dim;
        let len = seq.ids.len();
        if len > self.config.max_seq_len {
            return Err(EncoderError::Input(format!(
                "sequence of {len} exceeds the maximum length"
            )));
        }
        let mut flat = Vec::with_capacity(len * e);
        for (t, &id) in seq.ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(EncoderError::Input(format!("token id {id} outside the vocabulary")));
            }
            let tok = self.token_embeddings.value.row(id);
            let pos = self.position_embeddings.value.row(t);
            flat.extend(tok.iter().zip(pos).map(|(a, b)| a + b));
        }
        let mut dropout_mask = None;
        if let Some(rng) = rng {
            let (dropped, mask) = dropout(&flat, self.config.dropout, true, rng);
            flat = dropped;
            dropout_mask = mask;
        }
        let mut inputs: Vec<Vec<f64>> = flat.chunks(e).map(<[f64]>::to_vec).collect();

        let half = self.config.hidden / 2;
        let zero = vec![0.0; half];
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (fwd_states, fwd_caches) = layer.forward.run(&inputs, &zero)?;
            let reversed: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
            let (bwd_states, bwd_caches) = layer.backward.run(&reversed, &zero)?;
            inputs = (0..len)
                .map(|t| {
                    let mut row = fwd_states[t].clone();
                    row.extend_from_slice(&bwd_states[len - 1 - t]);
                    row
                })
                .collect();
            layer_caches.push(LayerCache {
                forward: fwd_caches,
                backward: bwd_caches,
            });
        }
        let token_reps = Tensor::from_vec(&[len, self.config.hidden], inputs.concat())?;
        let pooled = Tensor::vector(token_reps.row(0).to_vec());
        Ok((
            SequenceEncoding {
                token_reps,
                pooled,
                token_segments: seq.segments.clone(),
            },
            EncoderCache {
                ids: seq.ids.clone(),
                dropout_mask,
                layers: layer_caches,
            },
        ))
    }

    /// Accumulates parameter gradients given `d_reps[t]`, the gradient at the
    /// top-layer representation of position `t`.
    pub fn backward(&mut self, cache: &EncoderCache, d_reps: &[Vec<f64>]) {
        let len = cache.ids.len();
        let half = self.config.hidden / 2;
        let mut grads: Vec<Vec<f64>> = d_reps.to_vec();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let d_fwd: Vec<Vec<f64>> = grads.iter().map(|g| g[..half].to_vec()).collect();
            let d_bwd: Vec<Vec<f64>> = grads.iter().rev().map(|g| g[half..].to_vec()).collect();
            let (dx_f, _) = layer.forward.run_backward(&lc.forward, &d_fwd);
            let (dx_b, _) = layer.backward.run_backward(&lc.backward, &d_bwd);
            grads = (0..len)
                .map(|t| {
                    let mut g = dx_f[t].clone();
                    g.iter_mut().zip(&dx_b[len - 1 - t]).for_each(|(a, b)| *a += b);
                    g
                })
                .collect();
        }
        let e = self.config.embed_dim;
        for (t, g) in grads.iter_mut().enumerate() {
            if let Some(mask) = &cache.dropout_mask {
                g.iter_mut().zip(&mask[t * e..(t + 1) * e]).for_each(|(a, m)| *a *= m);
            }
            let id = cache.ids[t] as usize;
            self.token_embeddings
                .grad
                .row_mut(id)
                .iter_mut()
                .zip(g.iter())
                .for_each(|(a, b)| *a += b);
            self.position_embeddings
                .grad
                .row_mut(t)
                .iter_mut()
                .zip(g.iter())
                .for_each(|(a, b)| *a += b);
        }
    }

    /// Backward when only the pooled row receives gradient.
    pub fn backward_pooled(&mut self, cache: &EncoderCache, d_pooled: &[f64]) {
        let mut d = vec![vec![0.0; self.config.hidden]; cache.ids.len()];
        d[0].copy_from_slice(d_pooled);
        self.backward(cache, &d);
    }
}

impl ParamSet for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.token_embeddings);
        f(&self.position_embeddings);
        for layer in &self.layers {
            layer.forward.visit(f);
            layer.backward.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.token_embeddings);
        f(&mut self.position_embeddings);
        for layer in &mut self.layers {
            layer.forward.visit_mut(f);
            layer.backward.visit_mut(f);
        }
    }
}

/// Lowercased surface forms used as encoder vocabulary keys.
pub fn encoder_tokens(text: &str) -> Vec<String> {
    crate::text_prep::tokenize(text)
        .into_iter()
        .map(|t| t.surface.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_kernels::gradcheck::{flatten_grads, max_relative_error, param_difference};
    use crate::neural_kernels::seeded_rng;
    use rand::Rng;

    fn tiny(layers: usize) -> Encoder {
        let cfg = EncoderConfig {
            vocab_size: 12,
            embed_dim: 5,
            hidden: 6,
            layers,
            max_seq_len: 16,
            dropout: 0.0,
            ..EncoderConfig::default()
        };
        Encoder::new("enc", cfg, &mut seeded_rng(11)).unwrap()
    }

    #[test]
    fn shapes_and_pooling() {
        let enc = tiny(2);
        let seq = enc.assemble(&[4, 5, 6], &[7, 8]).unwrap();
        assert_eq!(seq.ids, [START_ID, 4, 5, 6, SEP_ID, 7, 8, SEP_ID]);
        assert_eq!(seq.second_offset, 5);
        let (out, _) = enc.forward(&seq, None).unwrap();
        assert_eq!(out.token_reps.shape(), [8, 6]);
        assert_eq!(out.pooled.shape(), [6]);
        assert_eq!(out.pooled.data(), out.token_reps.row(0));
        assert_eq!(out.token_segments[4], Segment::First);
        assert_eq!(out.token_segments[5], Segment::Second);
    }

    #[test]
    fn empty_segments_rejected_and_truncation_hits_first() {
        let enc = tiny(1);
        assert!(matches!(enc.assemble(&[], &[]), Err(EncoderError::Input(_))));
        let first: Vec<u32> = (3..12).cycle().take(10).collect();
        let second: Vec<u32> = vec![5; 8];
        let seq = enc.assemble(&first, &second).unwrap();
        assert_eq!(seq.ids.len(), 16);
        assert_eq!(seq.second_len, 8);
        assert_eq!(seq.second_offset, 1 + 5 + 1);
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let enc = tiny(2);
        let a = enc.assemble(&[3, 4], &[5, 6, 7]).unwrap();
        let b = enc.assemble(&[3, 4], &[7, 6, 5]).unwrap();
        let (ea, _) = enc.forward(&a, None).unwrap();
        let (ea2, _) = enc.forward(&a, None).unwrap();
        let (eb, _) = enc.forward(&b, None).unwrap();
        assert_eq!(ea, ea2);
        assert_ne!(ea.token_reps, eb.token_reps);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut enc = tiny(2);
        let seq = enc.assemble(&[3, 4, 9], &[5, 6]).unwrap();
        let mut rng = seeded_rng(5);
        let proj: Vec<Vec<f64>> = (0..seq.ids.len())
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let loss = |enc: &Encoder| -> f64 {
            let (out, _) = enc.forward(&seq, None).unwrap();
            (0..seq.ids.len())
                .map(|t| {
                    out.token_reps
                        .row(t)
                        .iter()
                        .zip(&proj[t])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                })
                .sum()
        };
        enc.zero_grad();
        let (_, cache) = enc.forward(&seq, None).unwrap();
        enc.backward(&cache, &proj);
        let analytic = flatten_grads(&enc);
        let numeric = param_difference(&mut enc, loss);
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }
}
