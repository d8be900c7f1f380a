//! The answer-scoring network: passage and reference encodings of every
//! candidate, a confidence-weighted attention over retrieved quadruples, two
//! integrators, and a scalar classifier per candidate.

mod attention;
pub mod gradcheck;
mod integrator;
mod knowledge;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encoder_tokens, Encoder, EncoderCache, EncoderConfig, EncoderError, Vocab};
use crate::kb_store::KnowledgeQuadruple;
use crate::neural_kernels::checkpoint::{load_params, save_params};
use crate::neural_kernels::ops::{axpy, dot};
use crate::neural_kernels::{
    seeded_rng, softmax, softmax_cross_entropy, GruWeights, KernelError, ParamSet, Parameter, Rng64, Tensor,
};

pub use attention::{attend, attend_backward, project_keys, weighted_attention, AttentionMode, AttentionOutput};
pub use integrator::{Integrator, IntegratorCache};
pub use knowledge::{
    encode_quadruple, encode_quadruple_backward, knowledge_words, phrase_words, KnowledgeTable, QuadrupleCache,
    KNOWLEDGE_DIM,
};

pub const CONFIG_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const KNOWLEDGE_WORDS_FILE: &str = "knowledge_words.json";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoReferenceFinder,
    NoKnowledgeAdapter,
    Relocation,
    ReferenceOnly,
    LogitConcat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoReferenceFinder,
        Variant::NoKnowledgeAdapter,
        Variant::Relocation,
        Variant::ReferenceOnly,
        Variant::LogitConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReferenceFinder => "no_reference_finder",
            Variant::NoKnowledgeAdapter => "no_knowledge_adapter",
            Variant::Relocation => "relocation",
            Variant::ReferenceOnly => "reference_only",
            Variant::LogitConcat => "logit_concat",
        }
    }

    /// Whether the knowledge attention contributes to the logits.
    pub fn uses_knowledge(self) -> bool {
        matches!(self, Variant::Full | Variant::NoReferenceFinder | Variant::Relocation)
    }

    /// Whether an extracted reference span is needed.
    pub fn uses_reference(self) -> bool {
        self != Variant::NoReferenceFinder
    }

    /// Whether PV is computed from the passage.
    pub fn uses_passage(self) -> bool {
        self != Variant::ReferenceOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

/// Replaces each confidence with `1` if it exceeds `beta`, else `0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MaskConfig {
    pub enabled: bool,
    pub beta: f64,
}

impl MaskConfig {
    pub fn at(beta: f64) -> Self {
        Self { enabled: true, beta }
    }

    pub fn apply(&self, c: f64) -> f64 {
        if !self.enabled {
            c
        } else if c > self.beta {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "vocab")]
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub k: usize,
    pub dropout: f64,
    pub exclude_nulls: bool,
    pub variant: Variant,
    pub mask: MaskConfig,
    /// Every attention score forced to zero.
    pub uniform_attention: bool,
    pub knowledge_init_std: f64,
    pub embedding_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            vocab_size: 2000,
            embed_dim: 64,
            max_seq_len: 64,
            k: 5,
            dropout: 0.1,
            exclude_nulls: false,
            variant: Variant::Full,
            mask: MaskConfig::default(),
            uniform_attention: false,
            knowledge_init_std: 1.0,
            embedding_std: crate::encoder::EMBEDDING_STD,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            layers: self.layers,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            embedding_std: self.embedding_std,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder_config().validate()?;
        if self.k == 0 {
            return Err(ModelError::Config("k must be positive".into()));
        }
        if self.mask.enabled && !(self.mask.beta >= 0.0) {
            return Err(ModelError::Config("mask beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// An example reduced to token ids and retrieved knowledge.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub passage_ids: Vec<u32>,
    pub reference_ids: Vec<u32>,
    /// Ids of `Q' + " " + A_i` for every candidate.
    pub candidate_ids: Vec<Vec<u32>>,
    pub quadruples: Vec<KnowledgeQuadruple>,
    pub label: usize,
}

impl PreparedExample {
    pub fn n(&self) -> usize {
        self.candidate_ids.len()
    }
}

/// Sets every non-null confidence to 1, turning quadruples into triplets.
pub fn degenerate_to_triplets(quads: &[KnowledgeQuadruple]) -> Vec<KnowledgeQuadruple> {
    quads
        .iter()
        .map(|q| {
            let mut q = q.clone();
            if !q.is_null() {
                q.confidence = 1.0;
            }
            q
        })
        .collect()
}

/// Everything computed by one forward pass. Vectors not used by the active
/// variant are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pv: Vec<Vec<f64>>,
    pub rv: Vec<Vec<f64>>,
    pub kv: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardTrace {
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

struct CandidateCache {
    pv: Option<EncoderCache>,
    rv: Option<EncoderCache>,
    lower: Option<IntegratorCache>,
    upper: Option<IntegratorCache>,
    fused: Vec<f64>,
}

struct KnowledgeCache {
    quads: Vec<QuadrupleCache>,
    hs: Vec<Vec<f64>>,
    wh: Vec<Vec<f64>>,
    conf: Vec<f64>,
    attention: Vec<AttentionOutput>,
}

pub struct ForwardCache {
    candidates: Vec<CandidateCache>,
    knowledge: Option<KnowledgeCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub knowledge: KnowledgeTable,
    pub knowledge_gru: GruWeights,
    pub attention: Parameter,
    pub lower: Integrator,
    pub upper: Integrator,
    pub classifier: Parameter,
    pub concat_head: Parameter,
}

impl ModelState {
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocab,
        knowledge_words: Vec<String>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let h = config.hidden;
        let encoder = Encoder::new("encoder", config.encoder_config(), &mut rng)?;
        let knowledge = KnowledgeTable::random(knowledge_words, config.knowledge_init_std, &mut rng);
        let knowledge_gru = GruWeights::new("knowledge_gru", KNOWLEDGE_DIM, h, &mut rng);
        let bound = 1.0 / (h as f64).sqrt();
        let attention = Parameter::new("attention.w", Tensor::uniform(&[h, h], bound, &mut rng));
        let lower = Integrator::new("lower_integrator", h, config.dropout, &mut rng);
        let upper = Integrator::new("upper_integrator", h, config.dropout, &mut rng);
        let classifier = Parameter::new("classifier.weight", Tensor::uniform(&[h], bound, &mut rng));
        let concat_head = Parameter::new(
            "concat_head.weight",
            Tensor::uniform(&[2 * h], 1.0 / ((2 * h) as f64).sqrt(), &mut rng),
        );
        Ok(Self {
            config,
            vocab,
            encoder,
            knowledge,
            knowledge_gru,
            attention,
            lower,
            upper,
            classifier,
            concat_head,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Parameters updated during training; the knowledge table is frozen.
    pub fn is_trainable(p: &Parameter) -> bool {
        p.name != KnowledgeTable::PARAM_NAME
    }

    pub fn prepare<S: AsRef<str>>(
        &self,
        passage: &str,
        reference: &str,
        enriched_question: &str,
        candidates: &[S],
        quadruples: Vec<KnowledgeQuadruple>,
        label: usize,
    ) -> PreparedExample {
        let ids = |text: &str| self.vocab.ids(&encoder_tokens(text));
        PreparedExample {
            passage_ids: ids(passage),
            reference_ids: ids(reference),
            candidate_ids: candidates
                .iter()
                .map(|a| ids(&format!("{enriched_question} {}", a.as_ref())))
                .collect(),
            quadruples,
            label,
        }
    }

    fn encode_pooled(
        &self,
        first: &[u32],
        second: &[u32],
        rng: Option<&mut Rng64>,
    ) -> Result<(Vec<f64>, EncoderCache), ModelError> {
        let seq = self.encoder.assemble(first, second)?;
        let (enc, cache) = self.encoder.forward(&seq, rng)?;
        Ok((enc.pooled.into_data(), cache))
    }

    /// `PV_i`: pooled encoding of `[START] P [SEP] Q' A_i [SEP]`.
    pub fn encode_pv(&self, ex: &PreparedExample, i: usize) -> Result<Vec<f64>, ModelError> {
        Ok(self.encode_pooled(&ex.passage_ids, &ex.candidate_ids[i], None)?.0)
    }

    /// `RV_i`: the same encoder over `[START] R [SEP] Q' A_i [SEP]`.
    pub fn encode_rv(&self, ex: &PreparedExample, i: usize) -> Result<Vec<f64>, ModelError> {
        Ok(self.encode_pooled(&ex.reference_ids, &ex.candidate_ids[i], None)?.0)
    }

    pub fn forward(&self, ex: &PreparedExample) -> Result<ForwardTrace, ModelError> {
        Ok(self.forward_with_cache(ex, None)?.0)
    }

    /// Forward pass; dropout is active only when `rng` is given.
    pub fn forward_with_cache(
        &self,
        ex: &PreparedExample,
        mut rng: Option<&mut Rng64>,
    ) -> Result<(ForwardTrace, ForwardCache), ModelError> {
        let n = ex.n();
        let variant = self.config.variant;
        if n < 2 {
            return Err(ModelError::Contract(format!("need at least 2 candidates, got {n}")));
        }
        if ex.label >= n {
            return Err(ModelError::Contract(format!(
                "label {} out of range for {n} candidates",
                ex.label
            )));
        }
        let m = self.config.k * n;
        if ex.quadruples.len() != m {
            return Err(ModelError::Contract(format!(
                "expected k * n = {m} quadruples, got {}",
                ex.quadruples.len()
            )));
        }

        let mut trace = ForwardTrace {
            pv: Vec::new(),
            rv: Vec::new(),
            kv: Vec::new(),
            scores: Vec::new(),
            weights: Vec::new(),
            logits: Vec::with_capacity(n),
            probabilities: Vec::new(),
        };
        let mut pv_caches = Vec::with_capacity(n);
        let mut rv_caches = Vec::with_capacity(n);
        for i in 0..n {
            if variant.uses_passage() {
                let (pv, c) = self.encode_pooled(&ex.passage_ids, &ex.candidate_ids[i], rng.as_deref_mut())?;
                trace.pv.push(pv);
                pv_caches.push(Some(c));
            } else {
                pv_caches.push(None);
            }
            if variant.uses_reference() {
                let (rv, c) = self.encode_pooled(&ex.reference_ids, &ex.candidate_ids[i], rng.as_deref_mut())?;
                trace.rv.push(rv);
                rv_caches.push(Some(c));
            } else {
                trace.rv.push(trace.pv[i].clone());
                rv_caches.push(None);
            }
        }

        let knowledge = if variant.uses_knowledge() {
            let mut quads = Vec::with_capacity(m);
            let mut hs = Vec::with_capacity(m);
            for q in &ex.quadruples {
                let (h, c) = encode_quadruple(&self.knowledge, &self.knowledge_gru, q)?;
                hs.push(h);
                quads.push(c);
            }
            let wh = project_keys(&self.attention.value, &hs);
            let conf: Vec<f64> = ex
                .quadruples
                .iter()
                .map(|q| self.config.mask.apply(q.confidence))
                .collect();
            let excluded: Vec<bool> = ex.quadruples.iter().map(KnowledgeQuadruple::is_null).collect();
            let mode = AttentionMode {
                excluded: self.config.exclude_nulls.then_some(excluded.as_slice()),
                uniform: self.config.uniform_attention,
            };
            let mut outputs = Vec::with_capacity(n);
            for i in 0..n {
                let out = attend(&trace.rv[i], &hs, &wh, &conf, mode)?;
                trace.scores.push(out.scores.clone());
                trace.weights.push(out.weights.clone());
                trace.kv.push(out.kv.clone());
                outputs.push(out);
            }
            Some(KnowledgeCache {
                quads,
                hs,
                wh,
                conf,
                attention: outputs,
            })
        } else {
            None
        };

        let mut candidates = Vec::with_capacity(n);
        for (i, (pv_cache, rv_cache)) in pv_caches.into_iter().zip(rv_caches).enumerate() {
            let mut cc = CandidateCache {
                pv: pv_cache,
                rv: rv_cache,
                lower: None,
                upper: None,
                fused: Vec::new(),
            };
            let logit = match variant {
                Variant::ReferenceOnly => dot(self.classifier.value.data(), &trace.rv[i]),
                Variant::LogitConcat => {
                    let head = self.concat_head.value.data();
                    let h = self.hidden();
                    dot(&head[..h], &trace.pv[i]) + dot(&head[h..], &trace.rv[i])
                }
                Variant::Full => {
                    let (l, lc) = self.lower.forward(&trace.pv[i], &trace.rv[i], rng.as_deref_mut())?;
                    let (f, uc) = self.upper.forward(&l, &trace.kv[i], rng.as_deref_mut())?;
                    cc.lower = Some(lc);
                    cc.upper = Some(uc);
                    cc.fused = f;
                    dot(self.classifier.value.data(), &cc.fused)
                }
                Variant::NoReferenceFinder => {
                    let (f, uc) = self.upper.forward(&trace.pv[i], &trace.kv[i], rng.as_deref_mut())?;
                    cc.upper = Some(uc);
                    cc.fused = f;
                    dot(self.classifier.value.data(), &cc.fused)
                }
                Variant::NoKnowledgeAdapter => {
                    let (f, lc) = self.lower.forward(&trace.pv[i], &trace.rv[i], rng.as_deref_mut())?;
                    cc.lower = Some(lc);
                    cc.fused = f;
                    dot(self.classifier.value.data(), &cc.fused)
                }
                Variant::Relocation => {
                    let (l, lc) = self.lower.forward(&trace.pv[i], &trace.kv[i], rng.as_deref_mut())?;
                    let (f, uc) = self.upper.forward(&l, &trace.rv[i], rng.as_deref_mut())?;
                    cc.lower = Some(lc);
                    cc.upper = Some(uc);
                    cc.fused = f;
                    dot(self.classifier.value.data(), &cc.fused)
                }
            };
            trace.logits.push(logit);
            candidates.push(cc);
        }
        trace.probabilities = softmax(&trace.logits)?;
        Ok((trace, ForwardCache { candidates, knowledge }))
    }

    /// Cross-entropy of the gold label under the trace.
    pub fn loss(trace: &ForwardTrace, label: usize) -> Result<f64, ModelError> {
        Ok(softmax_cross_entropy(&trace.logits, label)?.0)
    }

    /// Backward from the logit gradients; accumulates parameter gradients.
    pub fn backward(&mut self, trace: &ForwardTrace, cache: &ForwardCache, d_logits: &[f64]) {
        let variant = self.config.variant;
        let h = self.hidden();
        let n = d_logits.len();
        let mut d_pv = vec![vec![0.0; h]; n];
        let mut d_rv = vec![vec![0.0; h]; n];
        let mut d_kv = vec![vec![0.0; h]; n];
        for (i, cc) in cache.candidates.iter().enumerate() {
            let g = d_logits[i];
            match variant {
                Variant::ReferenceOnly => {
                    axpy(g, &trace.rv[i], self.classifier.grad.data_mut());
                    axpy(g, self.classifier.value.data(), &mut d_rv[i]);
                    continue;
                }
                Variant::LogitConcat => {
                    let (head, grad) = (self.concat_head.value.data(), self.concat_head.grad.data_mut());
                    axpy(g, &trace.pv[i], &mut grad[..h]);
                    axpy(g, &trace.rv[i], &mut grad[h..]);
                    axpy(g, &head[..h], &mut d_pv[i]);
                    axpy(g, &head[h..], &mut d_rv[i]);
                    continue;
                }
                _ => {}
            }
            axpy(g, &cc.fused, self.classifier.grad.data_mut());
            let d_fused: Vec<f64> = self.classifier.value.data().iter().map(|w| w * g).collect();
            match variant {
                Variant::Full => {
                    let (dl, dk) = self.upper.backward(cc.upper.as_ref().unwrap(), &d_fused);
                    let (dp, dr) = self.lower.backward(cc.lower.as_ref().unwrap(), &dl);
                    d_pv[i] = dp;
                    d_rv[i] = dr;
                    d_kv[i] = dk;
                }
                Variant::NoReferenceFinder => {
                    let (dp, dk) = self.upper.backward(cc.upper.as_ref().unwrap(), &d_fused);
                    d_pv[i] = dp;
                    d_kv[i] = dk;
                }
                Variant::NoKnowledgeAdapter => {
                    let (dp, dr) = self.lower.backward(cc.lower.as_ref().unwrap(), &d_fused);
                    d_pv[i] = dp;
                    d_rv[i] = dr;
                }
                Variant::Relocation => {
                    let (dl, dr) = self.upper.backward(cc.upper.as_ref().unwrap(), &d_fused);
                    let (dp, dk) = self.lower.backward(cc.lower.as_ref().unwrap(), &dl);
                    d_pv[i] = dp;
                    d_rv[i] = dr;
                    d_kv[i] = dk;
                }
                Variant::ReferenceOnly | Variant::LogitConcat => unreachable!(),
            }
        }

        if let Some(kc) = &cache.knowledge {
            let mut d_hs = vec![vec![0.0; h]; kc.hs.len()];
            for i in 0..n {
                let dq = attend_backward(
                    &trace.rv[i],
                    &kc.hs,
                    &kc.wh,
                    &kc.conf,
                    &kc.attention[i],
                    &d_kv[i],
                    &self.attention.value,
                    self.config.uniform_attention,
                    self.attention.grad.data_mut(),
                    &mut d_hs,
                );
                // without a reference finder the query is the passage vector
                let target = if variant.uses_reference() {
                    &mut d_rv[i]
                } else {
                    &mut d_pv[i]
                };
                axpy(1.0, &dq, target);
            }
            for (qc, dh) in kc.quads.iter().zip(&d_hs) {
                encode_quadruple_backward(&mut self.knowledge_gru, qc, dh);
            }
        }

        for (i, cc) in cache.candidates.iter().enumerate() {
            if let Some(c) = &cc.pv {
                self.encoder.backward_pooled(c, &d_pv[i]);
            }
            if let Some(c) = &cc.rv {
                self.encoder.backward_pooled(c, &d_rv[i]);
            }
        }
    }

    /// Forward, loss and backward on one example.
    pub fn train_step(
        &mut self,
        ex: &PreparedExample,
        rng: Option<&mut Rng64>,
    ) -> Result<(f64, ForwardTrace), ModelError> {
        let (trace, cache) = self.forward_with_cache(ex, rng)?;
        let (loss, _, d_logits) = softmax_cross_entropy(&trace.logits, ex.label)?;
        self.backward(&trace, &cache, &d_logits);
        Ok((loss, trace))
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        save_params(self, dir)?;
        fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(&self.config)? + "\n",
        )?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        fs::write(
            dir.join(KNOWLEDGE_WORDS_FILE),
            serde_json::to_string(self.knowledge.words())? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Config("vocabulary size does not match the config".into()));
        }
        let words: Vec<String> = serde_json::from_str(&fs::read_to_string(dir.join(KNOWLEDGE_WORDS_FILE))?)?;
        let mut model = Self::new(config, vocab, words, 0)?;
        load_params(&mut model, dir)?;
        Ok(model)
    }
}

impl ParamSet for ModelState {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        f(&self.knowledge.embeddings);
        self.knowledge_gru.visit(f);
        f(&self.attention);
        self.lower.visit(f);
        self.upper.visit(f);
        f(&self.classifier);
        f(&self.concat_head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        f(&mut self.knowledge.embeddings);
        self.knowledge_gru.visit_mut(f);
        f(&mut self.attention);
        self.lower.visit_mut(f);
        self.upper.visit_mut(f);
        f(&mut self.classifier);
        f(&mut self.concat_head);
    }
}

#[cfg(test)]
mod tests;
