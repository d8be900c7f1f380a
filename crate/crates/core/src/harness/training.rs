use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{HarnessError, ResolvedExample};
use crate::encoder::{encoder_tokens, Vocab};
use crate::neural_kernels::{seeded_rng, Adam, ParamSet};
use crate::reknet_model::{ModelConfig, ModelState, PreparedExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub max_seq_len: usize,
    pub max_reference_len: usize,
    pub k: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs.
    pub checkpoint_interval: usize,
    /// Stop after this many epochs without a dev improvement (0 disables).
    pub patience: usize,
    pub clip_norm: f64,
    pub min_token_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            warmup_steps: 100,
            max_seq_len: 64,
            max_reference_len: 16,
            k: 5,
            seed: 42,
            checkpoint_interval: 5,
            patience: 0,
            clip_norm: 5.0,
            min_token_count: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = [
            self.batch_size,
            self.epochs,
            self.max_seq_len,
            self.max_reference_len,
            self.k,
            self.checkpoint_interval,
        ];
        if positive.contains(&0) || !(self.learning_rate > 0.0) {
            return Err(HarnessError::Config("training settings must be positive".into()));
        }
        if self.max_reference_len > self.max_seq_len {
            return Err(HarnessError::Config(
                "maximum reference length exceeds the maximum sequence length".into(),
            ));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

pub struct TrainOutcome {
    /// The parameters of the epoch with the best dev accuracy.
    pub model: ModelState,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn candidate_text(ex: &ResolvedExample, i: usize) -> String {
    format!("{} {}", ex.question.text, ex.candidates[i])
}

/// Encoder vocabulary over everything the model reads in `examples`.
pub fn build_vocab(examples: &[ResolvedExample], max_size: usize, min_count: usize) -> Vocab {
    let mut tokens = Vec::new();
    for ex in examples {
        tokens.extend(encoder_tokens(&ex.passage));
        tokens.extend(encoder_tokens(&ex.reference));
        for i in 0..ex.candidates.len() {
            tokens.extend(encoder_tokens(&candidate_text(ex, i)));
        }
    }
    Vocab::build(tokens.iter().map(String::as_str), max_size, min_count)
}

fn prepare_all(model: &ModelState, examples: &[ResolvedExample]) -> Vec<PreparedExample> {
    examples
        .iter()
        .map(|ex| {
            model.prepare(
                &ex.passage,
                &ex.reference,
                &ex.question.text,
                &ex.candidates,
                ex.quadruples.clone(),
                ex.label,
            )
        })
        .collect()
}

fn accuracy_of(model: &ModelState, prepared: &[PreparedExample]) -> Result<f64, HarnessError> {
    if prepared.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for ex in prepared {
        if model.forward(ex)?.prediction() == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / prepared.len() as f64)
}

/// Trains a fresh model. With `checkpoint_dir`, a checkpoint is written
/// every `checkpoint_interval` epochs.
pub fn train_model(
    train: &[ResolvedExample],
    dev: &[ResolvedExample],
    knowledge_words: Vec<String>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Input("training set is empty".into()));
    }
    let mut mc = model_config.clone();
    mc.k = config.k;
    mc.max_seq_len = config.max_seq_len;
    let vocab = build_vocab(train, mc.vocab_size, config.min_token_count);
    let mut model = ModelState::new(mc, vocab, knowledge_words, config.seed)?;
    let train_set = prepare_all(&model, train);
    let dev_set = prepare_all(&model, dev);

    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut lr = config.learning_rate_at(step);
        for batch in order.chunks(config.batch_size) {
            model.zero_grad();
            for &idx in batch {
                let ex = &train_set[idx];
                let (loss, trace) = model.train_step(ex, Some(&mut rng))?;
                loss_sum += loss;
                hits += usize::from(trace.prediction() == ex.label);
            }
            crate::encoder::scale_and_clip(&mut model, 1.0 / batch.len() as f64, config.clip_norm);
            lr = config.learning_rate_at(step);
            adam.update(&mut model, lr, &ModelState::is_trainable);
            step += 1;
        }
        let dev_accuracy = accuracy_of(&model, &dev_set)?;
        metrics.push(EpochMetrics {
            epoch,
            steps: step,
            learning_rate: lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: hits as f64 / train_set.len() as f64,
            dev_accuracy,
        });
        if let Some(dir) = checkpoint_dir {
            if epoch % config.checkpoint_interval == 0 {
                let path = dir.join(format!("checkpoint-epoch{epoch:03}"));
                fs::create_dir_all(&path)?;
                model.save(&path)?;
            }
        }
        let improved = best.as_ref().is_none_or(|(acc, _, _)| dev_accuracy > *acc);
        if improved {
            best = Some((dev_accuracy, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if config.patience > 0 && epoch - best_epoch >= config.patience {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate(model: &ModelState, examples: &[ResolvedExample]) -> Result<Evaluation, HarnessError> {
    let prepared = prepare_all(model, examples);
    let mut predictions = Vec::with_capacity(examples.len());
    let mut hits = 0;
    for (ex, p) in examples.iter().zip(&prepared) {
        let predicted = model.forward(p)?.prediction();
        hits += usize::from(predicted == ex.label);
        predictions.push(Prediction {
            id: ex.id.clone(),
            predicted,
            gold: ex.label,
        });
    }
    let accuracy = if examples.is_empty() {
        0.0
    } else {
        hits as f64 / examples.len() as f64
    };
    Ok(Evaluation { accuracy, predictions })
}

/// Fraction of predictions equal to their gold index.
pub fn prediction_accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().filter(|p| p.predicted == p.gold).count();
    hits as f64 / predictions.len() as f64
}

/// `id<TAB>predicted<TAB>gold` per line.
pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in predictions {
        writeln!(out, "{}\t{}\t{}", p.id, p.predicted, p.gold)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, HarnessError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let err = |reason: &str| HarnessError::Dataset {
                line: i + 1,
                reason: reason.into(),
            };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected id, predicted and gold"));
            }
            Ok(Prediction {
                id: f[0].to_string(),
                predicted: f[1].parse().map_err(|_| err("bad predicted index"))?,
                gold: f[2].parse().map_err(|_| err("bad gold index"))?,
            })
        })
        .collect()
}

/// One JSON object per epoch.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
