use serde::{Deserialize, Serialize};

use super::{Example, HarnessError};
use crate::encoder::ReferenceFinder;
use crate::enricher::{enrich, unenriched, EnrichedQuestion};
use crate::kb_store::{KbIndex, KnowledgeQuadruple};
use crate::text_prep::word_prototypes;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolveOptions {
    pub k: usize,
    pub enrich: bool,
    /// Splice every span within this probability ratio of the best one.
    pub multi_span_ratio: Option<f64>,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        Self {
            k: 5,
            enrich: true,
            multi_span_ratio: None,
        }
    }
}

/// An example after enrichment, reference extraction and retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExample {
    pub id: String,
    pub passage: String,
    pub question: EnrichedQuestion,
    pub candidates: Vec<String>,
    pub reference: String,
    pub quadruples: Vec<KnowledgeQuadruple>,
    pub label: usize,
}

pub fn candidate_prototypes<S: AsRef<str>>(candidates: &[S]) -> Vec<Vec<String>> {
    candidates.iter().map(|c| word_prototypes(c.as_ref())).collect()
}

pub fn resolve(
    ex: &Example,
    finder: &dyn ReferenceFinder,
    kb: &KbIndex,
    opts: ResolveOptions,
) -> Result<ResolvedExample, HarnessError> {
    ex.validate().map_err(HarnessError::Input)?;
    let question = if opts.enrich {
        enrich(&ex.question, &ex.candidates)
    } else {
        unenriched(&ex.question)
    };
    let reference = match opts.multi_span_ratio {
        Some(ratio) => finder.find_multi(&question.text, &ex.passage, ratio)?.text,
        None => finder.find(&question.text, &ex.passage)?.text,
    };
    let quadruples = kb.retrieve(
        &word_prototypes(&reference),
        &candidate_prototypes(&ex.candidates),
        opts.k,
        ex.candidates.len(),
    )?;
    Ok(ResolvedExample {
        id: ex.id.clone(),
        passage: ex.passage.clone(),
        question,
        candidates: ex.candidates.clone(),
        reference,
        quadruples,
        label: ex.label,
    })
}

pub fn resolve_all(
    examples: &[Example],
    finder: &dyn ReferenceFinder,
    kb: &KbIndex,
    opts: ResolveOptions,
) -> Result<Vec<ResolvedExample>, HarnessError> {
    examples.iter().map(|ex| resolve(ex, finder, kb, opts)).collect()
}
