use std::collections::HashMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, resolve_all, train_model, Example, HarnessError, ResolveOptions, ResolvedExample, TrainConfig};
use crate::encoder::{ReferenceFinder, WholePassage};
use crate::kb_store::KbIndex;
use crate::reknet_model::{knowledge_words, MaskConfig, ModelConfig, Variant};

/// One trainable cell of an ablation suite.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub variant: Variant,
    pub mask: MaskConfig,
    pub uniform_attention: bool,
    pub enrich: bool,
    pub multi_span: bool,
}

impl VariantSpec {
    fn base(name: &str, variant: Variant) -> Self {
        Self {
            name: name.into(),
            variant,
            mask: MaskConfig::default(),
            uniform_attention: false,
            enrich: true,
            multi_span: false,
        }
    }

    /// Cells for a suite entry; `masked` expands to one cell per beta.
    pub fn expand(name: &str, betas: &[f64]) -> Result<Vec<Self>, HarnessError> {
        let cells = match name {
            "masked" => betas
                .iter()
                .map(|&b| Self {
                    name: format!("masked(beta={b})"),
                    mask: MaskConfig::at(b),
                    ..Self::base("masked", Variant::Full)
                })
                .collect(),
            "multi_span" => vec![Self {
                multi_span: true,
                ..Self::base(name, Variant::Full)
            }],
            "q_degraded" => vec![Self {
                enrich: false,
                ..Self::base(name, Variant::Full)
            }],
            "uniform_attention" => vec![Self {
                uniform_attention: true,
                ..Self::base(name, Variant::Full)
            }],
            other => {
                let variant: Variant = other
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("unknown variant {other:?}")))?;
                vec![Self::base(other, variant)]
            }
        };
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSuite {
    pub variants: Vec<String>,
    pub betas: Vec<f64>,
    pub ratio: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AblationSuite {
    fn default() -> Self {
        Self {
            variants: [
                "full",
                "no_reference_finder",
                "no_knowledge_adapter",
                "relocation",
                "masked",
                "multi_span",
                "q_degraded",
                "reference_only",
                "logit_concat",
            ]
            .map(String::from)
            .to_vec(),
            betas: vec![0.0, 0.5, 1.0, 1.5, 2.5],
            ratio: 0.7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

pub struct AblationData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: &'a [Example],
    pub kb: &'a KbIndex,
    pub extractor: &'a dyn ReferenceFinder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub beta: Option<f64>,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub beta_sweep: Vec<BetaPoint>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tbeta\tdev_accuracy\ttest_accuracy\tbest_epoch\n");
        for r in &self.rows {
            let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{}",
                r.variant, beta, r.dev_accuracy, r.test_accuracy, r.best_epoch
            );
        }
        out
    }

    pub fn beta_csv(&self) -> String {
        let mut out = String::from("beta,dev_accuracy\n");
        for p in &self.beta_sweep {
            let _ = writeln!(out, "{},{:.4}", p.beta, p.dev_accuracy);
        }
        out
    }
}

type Resolved = [Vec<ResolvedExample>; 3];

/// Trains and evaluates every cell of the suite.
pub fn run_ablation(suite: &AblationSuite, data: &AblationData<'_>) -> Result<AblationTable, HarnessError> {
    let mut cells = Vec::new();
    for name in &suite.variants {
        cells.extend(VariantSpec::expand(name, &suite.betas)?);
    }
    let words = knowledge_words(data.kb.quadruples());
    let mut cache: HashMap<(bool, bool, bool), Resolved> = HashMap::new();
    let mut table = AblationTable {
        rows: Vec::new(),
        beta_sweep: Vec::new(),
    };
    for cell in cells {
        let whole = !cell.variant.uses_reference();
        let key = (whole, cell.enrich, cell.multi_span);
        if !cache.contains_key(&key) {
            let opts = ResolveOptions {
                k: suite.train.k,
                enrich: cell.enrich,
                multi_span_ratio: cell.multi_span.then_some(suite.ratio),
            };
            let finder: &dyn ReferenceFinder = if whole { &WholePassage } else { data.extractor };
            let resolved = [
                resolve_all(data.train, finder, data.kb, opts)?,
                resolve_all(data.dev, finder, data.kb, opts)?,
                resolve_all(data.test, finder, data.kb, opts)?,
            ];
            cache.insert(key, resolved);
        }
        let [train, dev, test] = &cache[&key];
        let model_config = ModelConfig {
            variant: cell.variant,
            mask: cell.mask,
            uniform_attention: cell.uniform_attention,
            ..suite.model.clone()
        };
        let outcome = train_model(train, dev, words.clone(), &model_config, &suite.train, None)?;
        let dev_accuracy = evaluate(&outcome.model, dev)?.accuracy;
        let test_accuracy = evaluate(&outcome.model, test)?.accuracy;
        let beta = cell.mask.enabled.then_some(cell.mask.beta);
        if let Some(beta) = beta {
            table.beta_sweep.push(BetaPoint { beta, dev_accuracy });
        }
        table.rows.push(AblationRow {
            variant: cell.name,
            beta,
            dev_accuracy,
            test_accuracy,
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(table)
}
