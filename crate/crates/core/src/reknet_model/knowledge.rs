use std::collections::{BTreeSet, HashMap};

use crate::kb_store::KnowledgeQuadruple;
use crate::neural_kernels::ops::axpy;
use crate::neural_kernels::{GruCache, GruWeights, KernelError, Parameter, Rng64, Tensor};

/// Width of the frozen word vectors used for knowledge phrases.
pub const KNOWLEDGE_DIM: usize = 100;

/// Lowercased words of a knowledge phrase (`help_sick_person`, `ice cream`).
pub fn phrase_words(phrase: &str) -> Vec<String> {
    phrase
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Every distinct word of the subjects, relations and objects, sorted.
pub fn knowledge_words<'a>(quads: impl IntoIterator<Item = &'a KnowledgeQuadruple>) -> Vec<String> {
    let mut words = BTreeSet::new();
    for q in quads {
        for phrase in [&q.subject, &q.relation, &q.object] {
            words.extend(phrase_words(phrase));
        }
    }
    words.into_iter().collect()
}

/// Frozen word-vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub embeddings: Parameter,
}

impl KnowledgeTable {
    pub const PARAM_NAME: &'static str = "knowledge.embeddings";

    pub fn new(words: Vec<String>, embeddings: Tensor) -> Result<Self, KernelError> {
        if embeddings.shape() != [words.len(), KNOWLEDGE_DIM] {
            return Err(KernelError::Shape(format!(
                "knowledge table of {} words cannot hold {:?}",
                words.len(),
                embeddings.shape()
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self {
            words,
            index,
            embeddings: Parameter::new(Self::PARAM_NAME, embeddings),
        })
    }

    pub fn random(words: Vec<String>, std: f64, rng: &mut Rng64) -> Self {
        let t = Tensor::normal(&[words.len(), KNOWLEDGE_DIM], std, rng);
        Self::new(words, t).expect("shape built from the word count")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.embeddings.value.row(i))
    }

    /// Mean of the word vectors; unknown words count as zero vectors.
    pub fn phrase_embedding(&self, phrase: &str) -> Vec<f64> {
        let words = phrase_words(phrase);
        let mut out = vec![0.0; KNOWLEDGE_DIM];
        if words.is_empty() {
            return out;
        }
        let scale = 1.0 / words.len() as f64;
        for w in &words {
            if let Some(v) = self.vector(w) {
                axpy(scale, v, &mut out);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct QuadrupleCache {
    steps: [GruCache; 3],
}

/// `h = GRU(emb_obj, GRU(emb_rel, GRU(emb_sub, 0)))`.
pub fn encode_quadruple(
    table: &KnowledgeTable,
    gru: &GruWeights,
    q: &KnowledgeQuadruple,
) -> Result<(Vec<f64>, QuadrupleCache), KernelError> {
    let h0 = vec![0.0; gru.hidden];
    let (h1, c1) = gru.step(&table.phrase_embedding(&q.subject), &h0)?;
    let (h2, c2) = gru.step(&table.phrase_embedding(&q.relation), &h1)?;
    let (h3, c3) = gru.step(&table.phrase_embedding(&q.object), &h2)?;
    Ok((h3, QuadrupleCache { steps: [c1, c2, c3] }))
}

/// Accumulates the GRU gradients of one encoded quadruple. The embedding
/// table is frozen, so input gradients are dropped.
pub fn encode_quadruple_backward(gru: &mut GruWeights, cache: &QuadrupleCache, dh: &[f64]) {
    let mut carry = dh.to_vec();
    for step in cache.steps.iter().rev() {
        let (_, d_prev) = gru.step_backward(step, &carry);
        carry = d_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_kernels::seeded_rng;

    #[test]
    fn phrase_mean_and_oov() {
        let doctor = KnowledgeQuadruple {
            subject: "doctor".into(),
            relation: "can".into(),
            object: "help_sick_person".into(),
            confidence: 2.0,
        };
        let words = knowledge_words([&doctor]);
        assert_eq!(words, ["can", "doctor", "help", "person", "sick"]);
        let table = KnowledgeTable::random(words, 1.0, &mut seeded_rng(1));
        let got = table.phrase_embedding("help_sick_person");
        for d in 0..KNOWLEDGE_DIM {
            let want = (table.vector("help").unwrap()[d]
                + table.vector("sick").unwrap()[d]
                + table.vector("person").unwrap()[d])
                / 3.0;
            assert!((got[d] - want).abs() < 1e-15);
        }
        let half = table.phrase_embedding("help unknownword");
        for d in 0..KNOWLEDGE_DIM {
            assert!((half[d] - table.vector("help").unwrap()[d] / 2.0).abs() < 1e-15);
        }
        assert!(table.phrase_embedding("").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_quadruple_with_zero_gru_is_zero() {
        let table = KnowledgeTable::random(vec!["a".into()], 1.0, &mut seeded_rng(2));
        let gru = GruWeights::zeros("k", KNOWLEDGE_DIM, 6);
        let (h, _) = encode_quadruple(&table, &gru, &KnowledgeQuadruple::null()).unwrap();
        assert_eq!(h, vec![0.0; 6]);
    }
}
