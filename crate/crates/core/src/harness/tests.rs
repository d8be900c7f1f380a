use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::encoder::{EncoderError, ReferenceFinder, ReferenceSpan, WholePassage};
use crate::enricher::enrich;
use crate::kb_store::{index_from_tsv, KbIndex};
use crate::neural_kernels::seeded_rng;
use crate::reknet_model::{knowledge_words, ModelConfig, ModelState};
use crate::text_prep::tokenize;

/// Returns the planted attribute token of each synthetic passage.
struct GoldFinder(HashMap<String, usize>);

impl GoldFinder {
    fn new(corpus: &SyntheticCorpus) -> Self {
        let map = corpus
            .examples
            .iter()
            .zip(&corpus.reference_token)
            .map(|(ex, &t)| (ex.passage.clone(), t))
            .collect();
        Self(map)
    }
}

impl ReferenceFinder for GoldFinder {
    fn find(&self, _question: &str, passage: &str) -> Result<ReferenceSpan, EncoderError> {
        let at = self.0[passage];
        Ok(ReferenceSpan {
            start: at,
            end: at,
            text: tokenize(passage)[at].surface.clone(),
            score: 0.0,
        })
    }
}

fn small_spec(examples: usize) -> SyntheticSpec {
    SyntheticSpec {
        examples,
        span_train: 20,
        span_heldout: 10,
        ..SyntheticSpec::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        layers: 1,
        embed_dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        warmup_steps: 0,
        learning_rate: 3e-3,
        min_token_count: 1,
        ..TrainConfig::default()
    }
}

fn resolved_corpus(examples: usize, seed: u64) -> (SyntheticCorpus, KbIndex, Vec<ResolvedExample>) {
    let corpus = generate_synthetic(&small_spec(examples), seed).unwrap();
    let kb = index_from_tsv(&corpus.kb_tsv()).unwrap();
    let finder = GoldFinder::new(&corpus);
    let resolved = resolve_all(&corpus.examples, &finder, &kb, ResolveOptions::default()).unwrap();
    (corpus, kb, resolved)
}

fn random_example(rng: &mut impl Rng, i: usize) -> Example {
    let word = |rng: &mut dyn rand::RngCore| -> String {
        let len = rng.random_range(1..8);
        (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
    };
    let n = rng.random_range(2..6);
    Example {
        id: format!("ex-{i}"),
        passage: format!("{} \"{}\"\t{}", word(rng), word(rng), word(rng)),
        question: format!("{}?", word(rng)),
        candidates: (0..n).map(|_| word(rng)).collect(),
        label: rng.random_range(0..n),
    }
}

#[test]
fn empty_dataset_is_empty() {
    assert!(parse_dataset("").unwrap().is_empty());
}

#[test]
fn single_line_parses() {
    let line = r#"{"id":"a","passage":"p","question":"q","candidates":["x","y"],"label":1}"#;
    let got = parse_dataset(line).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].candidates, ["x", "y"]);
}

#[test]
fn dataset_round_trip() {
    let mut rng = seeded_rng(3);
    let examples: Vec<Example> = (0..100).map(|i| random_example(&mut rng, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    write_dataset(&path, &examples).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), examples);
}

#[test]
fn schema_errors_name_the_line() {
    let good = r#"{"id":"a","passage":"p","question":"q","candidates":["x","y"],"label":0}"#;
    let bad_label = r#"{"id":"b","passage":"p","question":"q","candidates":["x","y"],"label":2}"#;
    match parse_dataset(&format!("{good}\n{bad_label}\n")) {
        Err(HarnessError::Dataset { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a line error, got {other:?}"),
    }
    match parse_dataset(&format!("{good}\n\n{{\"id\": 3}}")) {
        Err(HarnessError::Dataset { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a line error, got {other:?}"),
    }
    let one = r#"{"id":"c","passage":"p","question":"q","candidates":["x"],"label":0}"#;
    assert!(parse_dataset(one).is_err());
}

#[test]
fn split_is_80_10_10() {
    assert_eq!(split_ranges(2500), [0..2000, 2000..2250, 2250..2500]);
    assert_eq!(split_ranges(10), [0..8, 8..9, 9..10]);
}

#[test]
fn inconsistent_spec_is_rejected() {
    for spec in [
        SyntheticSpec {
            candidates: 1,
            ..small_spec(10)
        },
        SyntheticSpec {
            answer_pool: 41,
            ..small_spec(10)
        },
        SyntheticSpec {
            sentences: 9,
            ..small_spec(10)
        },
        SyntheticSpec {
            overlap_rate: 1.5,
            ..small_spec(10)
        },
    ] {
        assert!(matches!(generate_synthetic(&spec, 1), Err(HarnessError::Config(_))));
    }
}

#[test]
fn overlap_rate_is_reproduced() {
    let spec = SyntheticSpec {
        overlap_rate: 0.6,
        ..small_spec(1000)
    };
    let corpus = generate_synthetic(&spec, 5).unwrap();
    // counting oracle: words common to all candidates, by plain set intersection
    let shared = corpus
        .examples
        .iter()
        .filter(|ex| {
            let sets: Vec<BTreeSet<&str>> = ex.candidates.iter().map(|c| c.split_whitespace().collect()).collect();
            sets[1..].iter().fold(sets[0].clone(), |acc, s| &acc & s).len() > 0
        })
        .count();
    let rate = shared as f64 / 1000.0;
    assert!((rate - 0.6).abs() <= 0.02, "overlap {rate}");
    let enriched = corpus
        .examples
        .iter()
        .filter(|ex| enrich(&ex.question, &ex.candidates).enriched)
        .count();
    assert_eq!(enriched, shared);
}

#[test]
fn planted_spans_sit_at_recorded_indices() {
    let corpus = generate_synthetic(&small_spec(200), 9).unwrap();
    for item in corpus.span_train.iter().chain(&corpus.span_heldout) {
        let tokens = tokenize(&item.passage);
        let at = item.answer_start_token;
        assert_eq!(at, item.answer_end_token);
        assert_eq!(tokens[at - 1].surface, "is");
        let entity = &tokens[at - 2].surface;
        assert!(item.question.contains(&format!("the {entity} ")), "{item:?}");
    }
    for ((ex, &at), gold) in corpus
        .examples
        .iter()
        .zip(&corpus.reference_token)
        .zip(&corpus.gold_fact)
    {
        let attr = &tokenize(&ex.passage)[at].surface;
        let fact = &corpus.kb[gold.unwrap()];
        assert_eq!(&fact.subject, attr);
        assert_eq!(
            ex.candidates[ex.label].split_whitespace().last(),
            Some(fact.object.as_str())
        );
    }
}

/// Picks the candidate named by the most confident quadruple.
fn knowledge_oracle(ex: &ResolvedExample) -> Option<usize> {
    let best = ex.quadruples.iter().find(|q| !q.is_null())?;
    ex.candidates
        .iter()
        .position(|c| c.split_whitespace().last() == Some(best.object.as_str()))
}

#[test]
fn gold_facts_alone_decide_the_answer() {
    let (corpus, _, resolved) = resolved_corpus(600, 13);
    let hits = resolved.iter().filter(|r| knowledge_oracle(r) == Some(r.label)).count();
    assert_eq!(hits, resolved.len());

    // with the gold assertions removed, what remains about the asked attribute
    // is drawn independently of the label
    let kb = index_from_tsv(&corpus.kb_tsv_without_gold(|_| true)).unwrap();
    let finder = GoldFinder::new(&corpus);
    let deleted = resolve_all(&corpus.examples, &finder, &kb, ResolveOptions::default()).unwrap();
    for (r, ex) in deleted.iter().zip(&corpus.examples) {
        let attr = r.reference.as_str();
        for q in r.quadruples.iter().filter(|q| !q.is_null()) {
            assert_eq!(q.subject, attr);
            assert_eq!(q.relation, "relatedto", "{}", ex.id);
        }
    }
    let hits = deleted.iter().filter(|r| knowledge_oracle(r) == Some(r.label)).count();
    let rate = hits as f64 / deleted.len() as f64;
    assert!(rate < 0.2, "oracle still scores {rate}");
}

#[test]
fn planted_coverage_is_measured() {
    let spec = SyntheticSpec {
        coverage_rate: 0.7,
        ..small_spec(1000)
    };
    let corpus = generate_synthetic(&spec, 21).unwrap();
    let kb = index_from_tsv(&corpus.kb_tsv()).unwrap();
    let stats = knowledge_stats(&corpus.examples, &kb, &GoldFinder::new(&corpus), 5).unwrap();
    assert!((stats.coverage - 0.7).abs() <= 0.02, "coverage {}", stats.coverage);
    let total: usize = stats.relation_histogram.values().sum();
    assert_eq!(total as f64, stats.mean_per_question * 1000.0);
}

#[test]
fn empty_kb_has_no_coverage() {
    let corpus = generate_synthetic(&small_spec(50), 2).unwrap();
    let kb = index_from_tsv("").unwrap();
    let stats = knowledge_stats(&corpus.examples, &kb, &WholePassage, 5).unwrap();
    assert_eq!(stats.coverage, 0.0);
    assert_eq!(stats.mean_per_covered_pair, 0.0);
    assert_eq!(stats.mean_per_question, 0.0);
    assert!(stats.relation_histogram.is_empty());
}

#[test]
fn saturated_kb_gives_k_per_pair() {
    let k = 5;
    let candidates = ["water", "fire", "stone"];
    let mut tsv = String::new();
    for (c, cand) in candidates.iter().enumerate() {
        for j in 0..k {
            let w = 1.0 + (c * k + j) as f64 / 10.0;
            tsv.push_str(&format!("rafiza\tRelatedTo\t{cand}_{j}\t{w}\n"));
        }
    }
    let kb = index_from_tsv(&tsv).unwrap();
    let examples: Vec<Example> = (0..4)
        .map(|i| Example {
            id: i.to_string(),
            passage: "the cup is rafiza .".into(),
            question: "what does the cup suggest ?".into(),
            candidates: candidates.map(String::from).to_vec(),
            label: i % 3,
        })
        .collect();
    let stats = knowledge_stats(&examples, &kb, &WholePassage, k).unwrap();
    assert_eq!(stats.coverage, 1.0);
    assert_eq!(stats.mean_per_covered_pair, k as f64);
    assert_eq!(stats.mean_per_question, (k * 3) as f64);
}

#[test]
fn mcnemar_closed_forms() {
    assert_eq!(mcnemar_exact(0, 0), 1.0);
    assert!((mcnemar_exact(10, 0) - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
    assert!((mcnemar_exact(0, 10) - 0.001953125).abs() < 1e-15);
    assert_eq!(mcnemar_exact(5, 5), 1.0);
}

/// Exact two-sided binomial test with integer arithmetic.
fn binomial_oracle(b: u64, c: u64) -> f64 {
    let n = b + c;
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let tail: u128 = row[..=b.min(c) as usize].iter().sum();
    (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0)
}

fn predictions(correct: &[bool]) -> Vec<Prediction> {
    correct
        .iter()
        .enumerate()
        .map(|(i, &ok)| Prediction {
            id: format!("q{i}"),
            predicted: usize::from(!ok),
            gold: 0,
        })
        .collect()
}

#[test]
fn identical_predictions_are_not_significant() {
    let p = predictions(&[true, false, true, true]);
    assert_eq!(significance(&p, &p).unwrap(), 1.0);
}

#[test]
fn significance_needs_matching_ids() {
    let a = predictions(&[true, false]);
    let mut b = a.clone();
    b[1].id = "other".into();
    assert!(matches!(significance(&a, &b), Err(HarnessError::Input(_))));
    assert!(matches!(significance(&a, &a[..1]), Err(HarnessError::Input(_))));
}

proptest! {
    #[test]
    fn mcnemar_matches_binomial_oracle(b in 0u64..60, c in 0u64..60) {
        let got = mcnemar_exact(b, c);
        let want = binomial_oracle(b, c);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-15, "{got} vs {want}");
    }

    #[test]
    fn paired_significance_counts_discordance(outcomes in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..80)) {
        let a = predictions(&outcomes.iter().map(|o| o.0).collect::<Vec<_>>());
        let b = predictions(&outcomes.iter().map(|o| o.1).collect::<Vec<_>>());
        let only_a = outcomes.iter().filter(|o| o.0 && !o.1).count() as u64;
        let only_b = outcomes.iter().filter(|o| !o.0 && o.1).count() as u64;
        let p = significance(&a, &b).unwrap();
        prop_assert!((p - binomial_oracle(only_a, only_b)).abs() < 1e-12);
    }
}

#[test]
fn all_gold_predictions_score_one() {
    let p = predictions(&[true; 7]);
    assert_eq!(prediction_accuracy(&p), 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.tsv");
    write_predictions(&path, &p).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), p);
}

#[test]
fn memorizes_one_example() {
    let (_, kb, resolved) = resolved_corpus(10, 4);
    let one = &resolved[..1];
    let train = TrainConfig {
        batch_size: 1,
        ..tiny_train(50)
    };
    let out = train_model(one, one, knowledge_words(kb.quadruples()), &tiny_model(), &train, None).unwrap();
    assert_eq!(out.metrics.last().unwrap().steps, 50);
    assert_eq!(evaluate(&out.model, one).unwrap().accuracy, 1.0);
}

#[test]
fn training_is_deterministic_and_checkpoints() {
    let (_, kb, resolved) = resolved_corpus(40, 6);
    let words = knowledge_words(kb.quadruples());
    let config = TrainConfig {
        checkpoint_interval: 2,
        ..tiny_train(4)
    };
    let dir = tempfile::tempdir().unwrap();
    let a = train_model(
        &resolved[..32],
        &resolved[32..],
        words.clone(),
        &tiny_model(),
        &config,
        Some(dir.path()),
    )
    .unwrap();
    let b = train_model(&resolved[..32], &resolved[32..], words, &tiny_model(), &config, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_metrics(&pa, &a.metrics).unwrap();
    write_metrics(&pb, &b.metrics).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    for epoch in [2, 4] {
        let ckpt = dir.path().join(format!("checkpoint-epoch{epoch:03}"));
        assert!(ckpt.is_dir());
    }
    assert!(!dir.path().join("checkpoint-epoch001").exists());
    let reloaded = ModelState::load(&dir.path().join("checkpoint-epoch004")).unwrap();
    let ev = evaluate(&reloaded, &resolved).unwrap();
    assert!((0.0..=1.0).contains(&ev.accuracy));
}

#[test]
fn warmup_is_linear() {
    let config = TrainConfig {
        warmup_steps: 4,
        learning_rate: 1.0,
        ..TrainConfig::default()
    };
    assert!(config.validate().is_ok());
    let bad = TrainConfig {
        max_reference_len: 100,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let (_, kb, resolved) = resolved_corpus(16, 8);
    let config = TrainConfig {
        warmup_steps: 4,
        batch_size: 8,
        ..tiny_train(3)
    };
    let out = train_model(
        &resolved,
        &resolved,
        knowledge_words(kb.quadruples()),
        &tiny_model(),
        &config,
        None,
    )
    .unwrap();
    let lrs: Vec<f64> = out.metrics.iter().map(|m| m.learning_rate).collect();
    let lr = config.learning_rate;
    assert_eq!(lrs, [lr * 2.0 / 4.0, lr, lr]);
}

#[test]
fn shuffled_labels_score_near_chance() {
    let (_, kb, mut resolved) = resolved_corpus(900, 10);
    let model = ModelState::new(
        tiny_model(),
        build_vocab(&resolved, 2000, 1),
        knowledge_words(kb.quadruples()),
        1,
    )
    .unwrap();
    let mut rng = seeded_rng(77);
    for ex in &mut resolved {
        ex.label = rng.random_range(0..ex.candidates.len());
    }
    let first = evaluate(&model, &resolved).unwrap();
    assert_eq!(first.predictions.len(), resolved.len());
    let sd = (2.0f64 / 9.0 / 900.0).sqrt();
    assert!(
        (first.accuracy - 1.0 / 3.0).abs() < 4.0 * sd,
        "accuracy {}",
        first.accuracy
    );
    assert_eq!(evaluate(&model, &resolved).unwrap(), first);
}

fn tiny_suite(variants: &[&str], betas: &[f64]) -> AblationSuite {
    AblationSuite {
        variants: variants.iter().map(|s| s.to_string()).collect(),
        betas: betas.to_vec(),
        model: tiny_model(),
        train: tiny_train(2),
        ..AblationSuite::default()
    }
}

fn with_data<T>(f: impl FnOnce(&AblationData<'_>) -> T) -> T {
    let corpus = generate_synthetic(&small_spec(60), 31).unwrap();
    let kb = index_from_tsv(&corpus.kb_tsv()).unwrap();
    let finder = GoldFinder::new(&corpus);
    let data = AblationData {
        train: corpus.train(),
        dev: corpus.dev(),
        test: corpus.test(),
        kb: &kb,
        extractor: &finder,
    };
    f(&data)
}

#[test]
fn single_variant_suite_has_one_row() {
    let table = with_data(|d| run_ablation(&tiny_suite(&["full"], &[]), d)).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].variant, "full");
    assert!(table.beta_sweep.is_empty());
    assert_eq!(table.to_tsv().lines().count(), 2);
}

#[test]
fn unknown_variant_is_a_config_error() {
    let err = with_data(|d| run_ablation(&tiny_suite(&["full", "bogus"], &[]), d));
    assert!(matches!(err, Err(HarnessError::Config(_))));
}

#[test]
fn beta_sweep_ends_at_uniform_attention() {
    let betas = [0.0, 0.5, 1.0, 1.5, 2.5];
    let suite = tiny_suite(&["masked", "uniform_attention"], &betas);
    let (a, b) = with_data(|d| (run_ablation(&suite, d).unwrap(), run_ablation(&suite, d).unwrap()));
    assert_eq!(a, b);
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.beta_sweep.len(), 5);
    assert_eq!(a.beta_csv().lines().count(), 6);
    assert!(a.beta_csv().starts_with("beta,dev_accuracy\n"));
    let masked = &a.rows[4];
    let uniform = &a.rows[5];
    assert_eq!(masked.variant, "masked(beta=2.5)");
    assert_eq!(uniform.variant, "uniform_attention");
    assert_eq!(masked.dev_accuracy, uniform.dev_accuracy);
    assert_eq!(masked.test_accuracy, uniform.test_accuracy);
    for r in &a.rows {
        assert!((0.0..=1.0).contains(&r.dev_accuracy) && (0.0..=1.0).contains(&r.test_accuracy));
    }
}

#[test]
fn degraded_questions_are_left_unchanged() {
    let corpus = generate_synthetic(&small_spec(100), 17).unwrap();
    let kb = index_from_tsv(&corpus.kb_tsv()).unwrap();
    let spec = &VariantSpec::expand("q_degraded", &[]).unwrap()[0];
    let opts = ResolveOptions {
        enrich: spec.enrich,
        ..ResolveOptions::default()
    };
    let resolved = resolve_all(&corpus.examples, &WholePassage, &kb, opts).unwrap();
    for (r, ex) in resolved.iter().zip(&corpus.examples) {
        assert_eq!(r.question.text, ex.question);
    }
    let enriched = resolve_all(&corpus.examples, &WholePassage, &kb, ResolveOptions::default()).unwrap();
    assert!(enriched.iter().any(|r| r.question.text != r.question.original));
}
