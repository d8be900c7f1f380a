//! Finite-difference checks of the attention, the integrators and the whole
//! model, plus the tiny random instances they run on.

use rand::Rng;

use super::{
    attend, attend_backward, project_keys, AttentionMode, Integrator, MaskConfig, ModelConfig, ModelState,
    PreparedExample, Variant,
};
use crate::encoder::Vocab;
use crate::kb_store::{KnowledgeQuadruple, RETAINED_RELATIONS};
use crate::neural_kernels::gradcheck::{central_difference, max_relative_error, GradReport, FD_STEP, INSTANCES_PER_OP};
use crate::neural_kernels::{seeded_rng, ParamSet, Rng64, Tensor};

fn random_vec(n: usize, scale: f64, rng: &mut Rng64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn report(op: &str, worst: f64) -> GradReport {
    GradReport {
        op: op.into(),
        instances: INSTANCES_PER_OP,
        max_rel_error: worst,
    }
}

pub fn check_attention(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(500 + inst as u64));
        let (h, m) = (4, 5);
        let q = random_vec(h, 1.0, &mut rng);
        let w = random_vec(h * h, 1.0, &mut rng);
        let hs: Vec<Vec<f64>> = (0..m).map(|_| random_vec(h, 1.0, &mut rng)).collect();
        let conf: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
        let proj = random_vec(h, 1.0, &mut rng);
        let eval = |q: &[f64], w: &[f64], hs: &[Vec<f64>]| {
            let wt = Tensor::from_vec(&[h, h], w.to_vec()).unwrap();
            let out = attend(q, hs, &project_keys(&wt, hs), &conf, AttentionMode::default()).unwrap();
            out.kv.iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
        };
        let wt = Tensor::from_vec(&[h, h], w.clone()).unwrap();
        let wh = project_keys(&wt, &hs);
        let out = attend(&q, &hs, &wh, &conf, AttentionMode::default()).unwrap();
        let mut dw = vec![0.0; h * h];
        let mut d_hs = vec![vec![0.0; h]; m];
        let dq = attend_backward(&q, &hs, &wh, &conf, &out, &proj, &wt, false, &mut dw, &mut d_hs);
        let flat_hs: Vec<f64> = hs.concat();
        let unflat = |flat: &[f64]| flat.chunks(h).map(<[f64]>::to_vec).collect::<Vec<_>>();
        worst = worst
            .max(max_relative_error(&dq, &central_difference(|p| eval(p, &w, &hs), &q)))
            .max(max_relative_error(&dw, &central_difference(|p| eval(&q, p, &hs), &w)))
            .max(max_relative_error(
                &d_hs.concat(),
                &central_difference(|p| eval(&q, &w, &unflat(p)), &flat_hs),
            ));
    }
    report("attention", worst)
}

pub fn check_integrator(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(600 + inst as u64));
        let h = 4;
        let mut it = Integrator::new("it", h, 0.3, &mut rng);
        it.bias.value = Tensor::vector(random_vec(h, 0.5, &mut rng));
        let a = random_vec(h, 1.0, &mut rng);
        let b = random_vec(h, 1.0, &mut rng);
        let proj = random_vec(h, 1.0, &mut rng);
        let mask_seed = rng.random::<u64>();
        let eval = |it: &Integrator, a: &[f64], b: &[f64]| {
            let (y, _) = it.forward(a, b, Some(&mut seeded_rng(mask_seed))).unwrap();
            y.iter().zip(&proj).map(|(x, p)| x * p).sum::<f64>()
        };
        let (_, cache) = it.forward(&a, &b, Some(&mut seeded_rng(mask_seed))).unwrap();
        let (da, db) = it.backward(&cache, &proj);
        let analytic_params = crate::neural_kernels::gradcheck::flatten_grads(&it);
        let numeric_params = crate::neural_kernels::gradcheck::param_difference(&mut it, |it| eval(it, &a, &b));
        worst = worst
            .max(max_relative_error(&da, &central_difference(|p| eval(&it, p, &b), &a)))
            .max(max_relative_error(&db, &central_difference(|p| eval(&it, &a, p), &b)))
            .max(max_relative_error(&analytic_params, &numeric_params));
    }
    report("integrator", worst)
}

/// Numerical gradient of `loss` over the trainable parameters only, in
/// visitation order.
pub fn trainable_difference(model: &mut ModelState, loss: impl Fn(&ModelState) -> f64) -> Vec<f64> {
    let mut coords = Vec::new();
    let mut slot = 0;
    model.visit(&mut |p| {
        if ModelState::is_trainable(p) {
            coords.extend((0..p.value.len()).map(|i| (slot, i)));
        }
        slot += 1;
    });
    let mut out = Vec::with_capacity(coords.len());
    for (target, i) in coords {
        let shift = |model: &mut ModelState, delta: f64| {
            let mut s = 0;
            model.visit_mut(&mut |p| {
                if s == target {
                    p.value.data_mut()[i] += delta;
                }
                s += 1;
            });
        };
        shift(model, FD_STEP);
        let up = loss(model);
        shift(model, -2.0 * FD_STEP);
        let down = loss(model);
        shift(model, FD_STEP);
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

pub fn trainable_grads(model: &ModelState) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit(&mut |p| {
        if ModelState::is_trainable(p) {
            out.extend_from_slice(p.grad.data());
        }
    });
    out
}

/// Base words of the tiny test vocabularies.
const TINY_WORDS: [&str; 12] = [
    "the", "cat", "dog", "is", "red", "blue", "what", "color", "of", "it", "big", "small",
];
const TINY_KNOWLEDGE: [&str; 8] = ["cat", "dog", "red", "blue", "sky", "apple", "grass", "fire"];

/// A small model over a fixed toy vocabulary.
pub fn tiny_model(hidden: usize, k: usize, variant: Variant, seed: u64) -> ModelState {
    let vocab = Vocab::build(TINY_WORDS.iter().copied(), 100, 1);
    let mut words: Vec<String> = TINY_KNOWLEDGE.iter().map(|s| s.to_string()).collect();
    words.extend(["can", "isa", "relatedto"].map(String::from));
    words.sort();
    let config = ModelConfig {
        hidden,
        layers: 1,
        embed_dim: 4,
        max_seq_len: 24,
        k,
        dropout: 0.1,
        variant,
        knowledge_init_std: 0.5,
        ..ModelConfig::default()
    };
    ModelState::new(config, vocab, words, seed).expect("valid tiny config")
}

pub fn random_quadruple(rng: &mut Rng64) -> KnowledgeQuadruple {
    if rng.random_bool(0.3) {
        return KnowledgeQuadruple::null();
    }
    let pick = |rng: &mut Rng64| TINY_KNOWLEDGE[rng.random_range(0..TINY_KNOWLEDGE.len())].to_string();
    let subject = pick(rng);
    let object = if rng.random_bool(0.5) {
        format!("{}_{}", pick(rng), pick(rng))
    } else {
        pick(rng)
    };
    KnowledgeQuadruple {
        subject,
        relation: RETAINED_RELATIONS[rng.random_range(0..RETAINED_RELATIONS.len())].to_string(),
        object,
        confidence: (rng.random_range(0.1..2.0f64) * 1000.0).round() / 1000.0,
    }
}

/// Random ids, quadruples and label for a model with `vocab_len` tokens.
pub fn random_example(vocab_len: usize, k: usize, n: usize, rng: &mut Rng64) -> PreparedExample {
    let ids = |lo: usize, hi: usize, rng: &mut Rng64| {
        let len = rng.random_range(lo..=hi);
        (0..len)
            .map(|_| rng.random_range(0..vocab_len as u32))
            .collect::<Vec<u32>>()
    };
    PreparedExample {
        passage_ids: ids(4, 8, rng),
        reference_ids: ids(2, 4, rng),
        candidate_ids: (0..n).map(|_| ids(3, 6, rng)).collect(),
        quadruples: (0..k * n).map(|_| random_quadruple(rng)).collect(),
        label: rng.random_range(0..n),
    }
}

/// End-to-end check at `H = 8, k = 2, n = 3`, cycling through every
/// variant with dropout active under a fixed mask.
pub fn check_full_model(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(700 + inst as u64));
        let variant = Variant::ALL[inst % Variant::ALL.len()];
        let mut model = tiny_model(8, 2, variant, rng.random());
        if inst % 4 == 1 {
            model.config.mask = MaskConfig::at(1.0);
        }
        if inst % 5 == 2 {
            model.config.exclude_nulls = true;
        }
        // perturb zero-initialized biases so every path is exercised
        model.visit_mut(&mut |p| {
            if p.name.ends_with("bias") || p.name.contains(".b_") {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        });
        let ex = random_example(model.vocab.len(), 2, 3, &mut rng);
        let mask_seed: u64 = rng.random();
        let loss = |m: &ModelState| {
            let (trace, _) = m.forward_with_cache(&ex, Some(&mut seeded_rng(mask_seed))).unwrap();
            ModelState::loss(&trace, ex.label).unwrap()
        };
        model.zero_grad();
        model.train_step(&ex, Some(&mut seeded_rng(mask_seed))).unwrap();
        let analytic = trainable_grads(&model);
        let numeric = trainable_difference(&mut model, loss);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    report("full_model", worst)
}

/// Model-level suites.
pub fn model_suites(seed: u64) -> Vec<GradReport> {
    vec![check_attention(seed), check_integrator(seed), check_full_model(seed)]
}
