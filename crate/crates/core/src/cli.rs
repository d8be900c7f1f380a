//! The `reknet` command-line tool. Every subcommand prints a one-line JSON
//! summary on success.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::encoder::{
    exact_match_rate, load_span_dataset, pretrain_span_head, write_span_dataset, PretrainConfig, ReferenceFinder,
    SpanExtractor, WholePassage,
};
use crate::enricher::enrich;
use crate::harness::{
    evaluate, generate_synthetic, knowledge_stats_resolved, load_dataset, resolve_all, run_ablation, train_model,
    write_dataset, write_metrics, write_predictions, AblationData, AblationSuite, ResolveOptions, SyntheticSpec,
    TrainConfig, VariantSpec,
};
use crate::kb_store::{load_kb, KbIndex, KbStore};
use crate::neural_kernels::gradcheck::{kernel_suites, REL_ERR_FLOOR};
use crate::reknet_model::gradcheck::model_suites;
use crate::reknet_model::{knowledge_words, ModelConfig, ModelState};

#[derive(Debug, Parser)]
#[command(
    name = "reknet",
    version,
    about = "Reference-span knowledge enhancement for multi-choice reading comprehension"
)]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// JSON config for the subcommand (pretraining, training, ablation or generator settings).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    /// Extractor checkpoint directory.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Splice several reference spans instead of taking the best one.
    #[arg(long)]
    pub multi: bool,
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a KB-TSV file into an index directory.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the enriched question of every example.
    Enrich {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract reference spans with a pretrained extractor.
    ExtractRef {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        multi: bool,
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
    },
    /// Enrich, extract and retrieve knowledge for every example.
    Retrieve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        resolve: ResolveArgs,
    },
    /// Pretrain the span extractor on span-supervision JSONL.
    PretrainExtractor {
        #[arg(long)]
        dataset: PathBuf,
        /// Held-out span items scored after training.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics and the best model under --out.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Mask confidences at this threshold.
        #[arg(long)]
        beta: Option<f64>,
        #[command(flatten)]
        resolve: ResolveArgs,
    },
    /// Evaluate a training run directory on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Run directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Predictions TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every variant of an ablation suite.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Knowledge coverage statistics.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        resolve: ResolveArgs,
    },
    /// Finite-difference checks of every differentiable op.
    Gradcheck,
    /// Generate the synthetic corpora.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Model and training settings read by `train`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// What `eval` needs to resolve examples the way `train` did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    variant: String,
    resolve: ResolveOptions,
    extractor: bool,
}

const RUN_FILE: &str = "run.json";
const BEST_DIR: &str = "best";
const EXTRACTOR_DIR: &str = "extractor";

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_jsonl(path: &Path, rows: &[Value]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        writeln!(out, "{r}")?;
    }
    out.flush()?;
    Ok(())
}

fn open_kb(path: &Path) -> Result<KbIndex> {
    load_kb(path).with_context(|| format!("loading KB {}", path.display()))
}

fn open_extractor(path: &Path) -> Result<SpanExtractor> {
    SpanExtractor::load(path).with_context(|| format!("loading extractor {}", path.display()))
}

fn finder_for(ckpt: Option<&Path>) -> Result<Box<dyn ReferenceFinder>> {
    Ok(match ckpt {
        Some(p) => Box::new(open_extractor(p)?),
        None => Box::new(WholePassage),
    })
}

fn resolve_options(args: &ResolveArgs) -> ResolveOptions {
    ResolveOptions {
        k: args.k,
        enrich: true,
        multi_span_ratio: args.multi.then_some(args.ratio),
    }
}

pub fn run(cli: &Cli) -> Result<Value> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Ingest { kb, out } => {
            let mut store = KbStore::new();
            let file = fs::File::open(kb).with_context(|| format!("opening {}", kb.display()))?;
            let stored = store.ingest_assertions(std::io::BufReader::new(file))?;
            let index = store.into_index();
            index.save_dir(out)?;
            Ok(json!({"stored": stored, "quadruples": index.len()}))
        }
        Command::Enrich { dataset, out } => {
            let examples = load_dataset(dataset)?;
            let rows: Vec<Value> = examples
                .iter()
                .map(|ex| {
                    let q = enrich(&ex.question, &ex.candidates);
                    json!({
                        "id": ex.id,
                        "question": ex.question,
                        "enriched_question": q.text,
                        "prefix_tokens": q.prefix_tokens,
                    })
                })
                .collect();
            let enriched = examples
                .iter()
                .filter(|ex| enrich(&ex.question, &ex.candidates).enriched)
                .count();
            write_jsonl(out, &rows)?;
            Ok(json!({"examples": rows.len(), "enriched": enriched}))
        }
        Command::ExtractRef {
            dataset,
            ckpt,
            out,
            multi,
            ratio,
        } => {
            let examples = load_dataset(dataset)?;
            let extractor = open_extractor(ckpt)?;
            let mut rows = Vec::with_capacity(examples.len());
            for ex in &examples {
                let q = enrich(&ex.question, &ex.candidates);
                let spans = if *multi {
                    extractor.find_multi(&q.text, &ex.passage, *ratio)?
                } else {
                    crate::encoder::MultiSpan::from_spans(vec![extractor.find(&q.text, &ex.passage)?])
                };
                rows.push(json!({
                    "id": ex.id,
                    "enriched_question": q.text,
                    "reference": spans.text,
                    "spans": spans.spans,
                }));
            }
            write_jsonl(out, &rows)?;
            Ok(json!({"examples": rows.len()}))
        }
        Command::Retrieve {
            dataset,
            kb,
            out,
            resolve,
        } => {
            let examples = load_dataset(dataset)?;
            let kb = open_kb(kb)?;
            let finder = finder_for(resolve.ckpt.as_deref())?;
            let resolved = resolve_all(&examples, finder.as_ref(), &kb, resolve_options(resolve))?;
            let rows = resolved
                .iter()
                .map(serde_json::to_value)
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(out, &rows)?;
            let stats = knowledge_stats_resolved(&resolved);
            Ok(json!({"examples": rows.len(), "coverage": stats.coverage}))
        }
        Command::PretrainExtractor { dataset, heldout, out } => {
            let mut pc: PretrainConfig = read_config(config)?;
            pc.seed = cli.seed;
            let items = load_span_dataset(dataset)?;
            let (extractor, report) = pretrain_span_head(&items, &pc)?;
            extractor.save(out)?;
            fs::write(
                out.join("pretrain_report.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            let heldout_em = match heldout {
                Some(p) => Some(exact_match_rate(&extractor, &load_span_dataset(p)?)?),
                None => None,
            };
            Ok(json!({
                "items": items.len(),
                "steps": report.steps,
                "final_loss": report.epoch_losses.last(),
                "train_exact_match": report.train_exact_match,
                "heldout_exact_match": heldout_em,
            }))
        }
        Command::Train {
            dataset,
            dev,
            kb,
            out,
            variant,
            beta,
            resolve,
        } => {
            let mut rc: RunConfig = read_config(config)?;
            rc.train.seed = cli.seed;
            rc.train.k = resolve.k;
            let cell = match (variant.as_str(), beta) {
                ("masked", None) => bail!("variant masked needs --beta"),
                ("masked", Some(b)) => VariantSpec::expand("masked", &[*b])?.remove(0),
                (name, b) => {
                    let mut cell = VariantSpec::expand(name, &[])?.remove(0);
                    if let Some(b) = b {
                        cell.mask = crate::reknet_model::MaskConfig::at(*b);
                    }
                    cell
                }
            };
            let uses_extractor = cell.variant.uses_reference();
            let finder: Box<dyn ReferenceFinder> = match (uses_extractor, &resolve.ckpt) {
                (true, Some(p)) => Box::new(open_extractor(p)?),
                (true, None) => bail!("variant {} needs an extractor checkpoint (--ckpt)", cell.name),
                (false, _) => Box::new(WholePassage),
            };
            let opts = ResolveOptions {
                k: resolve.k,
                enrich: cell.enrich,
                multi_span_ratio: (resolve.multi || cell.multi_span).then_some(resolve.ratio),
            };
            let kb = open_kb(kb)?;
            let train = resolve_all(&load_dataset(dataset)?, finder.as_ref(), &kb, opts)?;
            let dev = resolve_all(&load_dataset(dev)?, finder.as_ref(), &kb, opts)?;
            let model_config = ModelConfig {
                variant: cell.variant,
                mask: cell.mask,
                uniform_attention: cell.uniform_attention,
                ..rc.model.clone()
            };
            fs::create_dir_all(out)?;
            let outcome = train_model(
                &train,
                &dev,
                knowledge_words(kb.quadruples()),
                &model_config,
                &rc.train,
                Some(out),
            )?;
            outcome.model.save(&out.join(BEST_DIR))?;
            write_metrics(&out.join("metrics.jsonl"), &outcome.metrics)?;
            if uses_extractor {
                if let Some(p) = &resolve.ckpt {
                    open_extractor(p)?.save(&out.join(EXTRACTOR_DIR))?;
                }
            }
            let info = RunInfo {
                variant: cell.name.clone(),
                resolve: opts,
                extractor: uses_extractor,
            };
            fs::write(out.join(RUN_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
            let last = outcome.metrics.last().ok_or_else(|| anyhow!("no epochs ran"))?;
            let best = &outcome.metrics[outcome.best_epoch - 1];
            Ok(json!({
                "variant": cell.name,
                "epochs": outcome.metrics.len(),
                "best_epoch": outcome.best_epoch,
                "best_dev_accuracy": best.dev_accuracy,
                "final_train_accuracy": last.train_accuracy,
            }))
        }
        Command::Eval { dataset, kb, ckpt, out } => {
            let info: RunInfo = serde_json::from_str(
                &fs::read_to_string(ckpt.join(RUN_FILE))
                    .with_context(|| format!("{} is not a training run directory", ckpt.display()))?,
            )?;
            let model = ModelState::load(&ckpt.join(BEST_DIR))?;
            let finder = finder_for(info.extractor.then(|| ckpt.join(EXTRACTOR_DIR)).as_deref())?;
            let kb = open_kb(kb)?;
            let resolved = resolve_all(&load_dataset(dataset)?, finder.as_ref(), &kb, info.resolve)?;
            let eval = evaluate(&model, &resolved)?;
            if let Some(p) = out {
                write_predictions(p, &eval.predictions)?;
            }
            Ok(json!({"variant": info.variant, "examples": resolved.len(), "accuracy": eval.accuracy}))
        }
        Command::Ablate {
            dataset,
            dev,
            test,
            kb,
            ckpt,
            out,
            k,
        } => {
            let mut suite: AblationSuite = read_config(config)?;
            suite.train.seed = cli.seed;
            suite.train.k = *k;
            let kb = open_kb(kb)?;
            let extractor = open_extractor(ckpt)?;
            let (train, dev, test) = (load_dataset(dataset)?, load_dataset(dev)?, load_dataset(test)?);
            let data = AblationData {
                train: &train,
                dev: &dev,
                test: &test,
                kb: &kb,
                extractor: &extractor,
            };
            let table = run_ablation(&suite, &data)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            fs::write(out.join("beta_sweep.csv"), table.beta_csv())?;
            let rows: Vec<Value> = table
                .rows
                .iter()
                .map(|r| json!({"variant": r.variant, "dev": r.dev_accuracy, "test": r.test_accuracy}))
                .collect();
            Ok(json!({"rows": rows}))
        }
        Command::Stats {
            dataset,
            kb,
            out,
            resolve,
        } => {
            let examples = load_dataset(dataset)?;
            let kb = open_kb(kb)?;
            let finder = finder_for(resolve.ckpt.as_deref())?;
            let resolved = resolve_all(&examples, finder.as_ref(), &kb, resolve_options(resolve))?;
            let stats = knowledge_stats_resolved(&resolved);
            if let Some(p) = out {
                fs::write(p, serde_json::to_string_pretty(&stats)? + "\n")?;
            }
            Ok(serde_json::to_value(stats)?)
        }
        Command::Gradcheck => {
            let reports: Vec<_> = kernel_suites(cli.seed)
                .into_iter()
                .chain(model_suites(cli.seed))
                .collect();
            let passed = reports.iter().all(|r| r.max_rel_error <= REL_ERR_FLOOR);
            let errors: serde_json::Map<String, Value> =
                reports.iter().map(|r| (r.op.clone(), json!(r.max_rel_error))).collect();
            if !passed {
                bail!("gradient check failed: {}", Value::Object(errors));
            }
            Ok(json!({"passed": passed, "max_rel_error": errors}))
        }
        Command::GenSynthetic { out } => {
            let spec: SyntheticSpec = read_config(config)?;
            let corpus = generate_synthetic(&spec, cli.seed)?;
            fs::create_dir_all(out)?;
            write_dataset(&out.join("dataset.jsonl"), &corpus.examples)?;
            write_dataset(&out.join("train.jsonl"), corpus.train())?;
            write_dataset(&out.join("dev.jsonl"), corpus.dev())?;
            write_dataset(&out.join("test.jsonl"), corpus.test())?;
            fs::write(out.join("kb.tsv"), corpus.kb_tsv())?;
            fs::write(out.join("kb_without_gold.tsv"), corpus.kb_tsv_without_gold(|_| true))?;
            write_span_dataset(&out.join("span_train.jsonl"), &corpus.span_train)?;
            write_span_dataset(&out.join("span_heldout.jsonl"), &corpus.span_heldout)?;
            Ok(json!({
                "examples": corpus.examples.len(),
                "train": corpus.train().len(),
                "dev": corpus.dev().len(),
                "test": corpus.test().len(),
                "assertions": corpus.kb.len(),
                "span_train": corpus.span_train.len(),
                "span_heldout": corpus.span_heldout.len(),
            }))
        }
    }
}

/// Parses `std::env::args`, runs the subcommand and returns the exit code:
/// 0 on success, 1 on operational failure, 2 on usage errors.
pub fn main_exit() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
