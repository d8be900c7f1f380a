use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{candidate_prototypes, resolve_all, Example, HarnessError, Prediction, ResolveOptions, ResolvedExample};
use crate::encoder::ReferenceFinder;
use crate::kb_store::{phrase_prototypes, KbIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeStats {
    pub questions: usize,
    /// Fraction of questions with at least one non-null quadruple.
    pub coverage: f64,
    /// Mean quadruples per `(Q, A_i)` pair that has any.
    pub mean_per_covered_pair: f64,
    pub mean_per_question: f64,
    pub relation_histogram: BTreeMap<String, usize>,
}

/// Statistics over already-resolved examples. A quadruple counts towards
/// every candidate sharing a prototype with its object.
pub fn knowledge_stats_resolved(examples: &[ResolvedExample]) -> KnowledgeStats {
    let mut covered_questions = 0usize;
    let mut total = 0usize;
    let (mut pair_hits, mut covered_pairs) = (0usize, 0usize);
    let mut relation_histogram = BTreeMap::new();
    for ex in examples {
        let real: Vec<_> = ex.quadruples.iter().filter(|q| !q.is_null()).collect();
        total += real.len();
        if !real.is_empty() {
            covered_questions += 1;
        }
        for q in &real {
            *relation_histogram.entry(q.relation.clone()).or_insert(0) += 1;
        }
        for protos in candidate_prototypes(&ex.candidates) {
            let count = real
                .iter()
                .filter(|q| phrase_prototypes(&q.object).iter().any(|p| protos.contains(p)))
                .count();
            if count > 0 {
                covered_pairs += 1;
                pair_hits += count;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    KnowledgeStats {
        questions: examples.len(),
        coverage: ratio(covered_questions, examples.len()),
        mean_per_covered_pair: ratio(pair_hits, covered_pairs),
        mean_per_question: ratio(total, examples.len()),
        relation_histogram,
    }
}

/// Enrichment, extraction and retrieval per question, then
/// [`knowledge_stats_resolved`].
pub fn knowledge_stats(
    examples: &[Example],
    kb: &KbIndex,
    finder: &dyn ReferenceFinder,
    k: usize,
) -> Result<KnowledgeStats, HarnessError> {
    let opts = ResolveOptions {
        k,
        ..ResolveOptions::default()
    };
    Ok(knowledge_stats_resolved(&resolve_all(examples, finder, kb, opts)?))
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Two-sided exact McNemar p-value for `b` and `c` discordant pairs.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let ln_n = ln_factorial(n);
    let tail: f64 = (0..=b.min(c))
        .map(|i| (ln_n - ln_factorial(i) - ln_factorial(n - i) - n as f64 * std::f64::consts::LN_2).exp())
        .sum();
    (2.0 * tail).min(1.0)
}

/// McNemar's test on paired correctness of two prediction sets.
pub fn significance(a: &[Prediction], b: &[Prediction]) -> Result<f64, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::Input(format!(
            "prediction sets differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let by_id: HashMap<&str, &Prediction> = b.iter().map(|p| (p.id.as_str(), p)).collect();
    let (mut only_a, mut only_b) = (0u64, 0u64);
    for pa in a {
        let pb = by_id
            .get(pa.id.as_str())
            .ok_or_else(|| HarnessError::Input(format!("id {} missing from the second set", pa.id)))?;
        if pa.gold != pb.gold {
            return Err(HarnessError::Input(format!("gold labels disagree for {}", pa.id)));
        }
        match (pa.predicted == pa.gold, pb.predicted == pb.gold) {
            (true, false) => only_a += 1,
            (false, true) => only_b += 1,
            _ => {}
        }
    }
    Ok(mcnemar_exact(only_a, only_b))
}
