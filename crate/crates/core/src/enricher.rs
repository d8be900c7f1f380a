//! Enriched question construction: the prototypes shared by every candidate
//! answer are spliced in front of the question.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::text_prep::word_prototypes;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichedQuestion {
    pub original: String,
    pub prefix_tokens: Vec<String>,
    pub text: String,
    pub enriched: bool,
}

/// Prototypes present in the prototype set of every candidate, ordered by
/// first occurrence in the first candidate.
pub fn cooccurrence_prototypes<S: AsRef<str>>(candidates: &[S]) -> Vec<String> {
    let Some((first, rest)) = candidates.split_first() else {
        return Vec::new();
    };
    let others: Vec<BTreeSet<String>> = rest
        .iter()
        .map(|c| word_prototypes(c.as_ref()).into_iter().collect())
        .collect();
    word_prototypes(first.as_ref())
        .into_iter()
        .filter(|p| others.iter().all(|set| set.contains(p)))
        .collect()
}

fn render_prefix(tokens: &[String]) -> String {
    let mut out = tokens.join(" ");
    if let Some(c) = out.chars().next() {
        let upper: String = c.to_uppercase().collect();
        out.replace_range(..c.len_utf8(), &upper);
    }
    out
}

/// Builds `Q'`. With no shared prototypes the question is returned unchanged.
pub fn enrich<S: AsRef<str>>(question: &str, candidates: &[S]) -> EnrichedQuestion {
    let prefix_tokens = cooccurrence_prototypes(candidates);
    let enriched = !prefix_tokens.is_empty();
    let text = if enriched {
        format!("{}. {}", render_prefix(&prefix_tokens), question)
    } else {
        question.to_string()
    };
    EnrichedQuestion {
        original: question.to_string(),
        prefix_tokens,
        text,
        enriched,
    }
}

/// The identity enrichment used when enrichment is switched off.
pub fn unenriched(question: &str) -> EnrichedQuestion {
    EnrichedQuestion {
        original: question.to_string(),
        prefix_tokens: Vec::new(),
        text: question.to_string(),
        enriched: false,
    }
}
