//! Datasets, the synthetic corpus, training and evaluation loops, ablations,
//! knowledge statistics and significance testing.

mod ablation;
mod pipeline;
mod stats;
mod synthetic;
mod training;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::kb_store::KbError;
use crate::neural_kernels::KernelError;
use crate::reknet_model::ModelError;

pub use ablation::{run_ablation, AblationData, AblationRow, AblationSuite, AblationTable, BetaPoint, VariantSpec};
pub use pipeline::{candidate_prototypes, resolve, resolve_all, ResolveOptions, ResolvedExample};
pub use stats::{knowledge_stats, knowledge_stats_resolved, mcnemar_exact, significance, KnowledgeStats};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, ANSWER_WORDS, ENTITY_WORDS};
pub use training::{
    build_vocab, evaluate, prediction_accuracy, read_predictions, train_model, write_metrics, write_predictions,
    EpochMetrics, Evaluation, Prediction, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {reason}")]
    Dataset { line: usize, reason: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One multi-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub label: usize,
}

impl Example {
    pub fn validate(&self) -> Result<(), String> {
        if self.candidates.len() < 2 {
            return Err(format!("example {} has fewer than 2 candidates", self.id));
        }
        if self.label >= self.candidates.len() {
            return Err(format!("example {} has label {} out of range", self.id, self.label));
        }
        Ok(())
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<Example>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| HarnessError::Dataset { line: i + 1, reason };
        let ex: Example = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        ex.validate().map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>, HarnessError> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        writeln!(out, "{}", serde_json::to_string(ex)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Index ranges of an 80/10/10 split of `len` items.
pub fn split_ranges(len: usize) -> [std::ops::Range<usize>; 3] {
    let train = len * 8 / 10;
    let dev = len / 10;
    [0..train, train..train + dev, train + dev..len]
}

#[cfg(test)]
mod tests;
