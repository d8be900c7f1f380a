use super::gradcheck::*;
use super::*;
use crate::neural_kernels::seeded_rng;

#[test]
fn attention_and_integrator_gradients() {
    assert!(check_attention(3).max_rel_error <= 1e-4);
    assert!(check_integrator(3).max_rel_error <= 1e-4);
}

#[test]
fn full_model_gradients() {
    let r = check_full_model(3);
    eprintln!("{r:?}");
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

#[test]
fn probabilities_sum_to_one_for_every_variant() {
    let mut rng = seeded_rng(11);
    for v in Variant::ALL {
        let model = tiny_model(8, 2, v, 5);
        for _ in 0..5 {
            let ex = random_example(model.vocab.len(), 2, 3, &mut rng);
            let t = model.forward(&ex).unwrap();
            assert!((t.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(t.logits.len(), 3);
        }
    }
}

#[test]
fn quadruple_count_contract() {
    let model = tiny_model(8, 2, Variant::Full, 5);
    let mut ex = random_example(model.vocab.len(), 2, 3, &mut seeded_rng(1));
    ex.quadruples.pop();
    assert!(matches!(model.forward(&ex), Err(ModelError::Contract(_))));
}

#[test]
fn shared_encoder_identity() {
    let model = tiny_model(8, 2, Variant::Full, 5);
    let mut ex = random_example(model.vocab.len(), 2, 3, &mut seeded_rng(2));
    ex.reference_ids = ex.passage_ids.clone();
    let t = model.forward(&ex).unwrap();
    assert_eq!(t.pv, t.rv);
    assert_eq!(model.encode_pv(&ex, 1).unwrap(), model.encode_rv(&ex, 1).unwrap());
}

#[test]
fn candidate_changes_pv() {
    let model = tiny_model(8, 2, Variant::Full, 5);
    let mut ex = random_example(model.vocab.len(), 2, 3, &mut seeded_rng(3));
    ex.candidate_ids[1] = ex.candidate_ids[0].clone();
    assert_eq!(model.encode_pv(&ex, 0).unwrap(), model.encode_pv(&ex, 1).unwrap());
    ex.candidate_ids[1].push(5);
    assert_ne!(model.encode_pv(&ex, 0).unwrap(), model.encode_pv(&ex, 1).unwrap());
}

#[test]
fn masks_and_uniform_attention() {
    let mut rng = seeded_rng(4);
    let mut model = tiny_model(8, 2, Variant::Full, 5);
    let ex = random_example(model.vocab.len(), 2, 3, &mut rng);
    model.config.mask = MaskConfig::at(0.0);
    let t = model.forward(&ex).unwrap();
    for (j, q) in ex.quadruples.iter().enumerate() {
        if q.is_null() {
            assert_eq!(t.scores[0][j], 0.0);
        }
    }
    model.config.mask = MaskConfig::at(2.5);
    let t = model.forward(&ex).unwrap();
    for w in t.weights.iter().flatten() {
        assert!((w - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn triplet_degeneration_equals_zero_beta() {
    let mut rng = seeded_rng(5);
    let mut model = tiny_model(8, 2, Variant::Full, 6);
    for _ in 0..10 {
        let ex = random_example(model.vocab.len(), 2, 3, &mut rng);
        let mut triplets = ex.clone();
        triplets.quadruples = degenerate_to_triplets(&ex.quadruples);
        model.config.mask = MaskConfig::default();
        let a = model.forward(&triplets).unwrap();
        model.config.mask = MaskConfig::at(0.0);
        let b = model.forward(&ex).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn no_knowledge_adapter_leaves_knowledge_untouched() {
    let mut model = tiny_model(8, 2, Variant::NoKnowledgeAdapter, 7);
    let ex = random_example(model.vocab.len(), 2, 3, &mut seeded_rng(8));
    model.zero_grad();
    model.train_step(&ex, None).unwrap();
    assert!(model.attention.grad.data().iter().all(|&g| g == 0.0));
    model
        .knowledge_gru
        .visit(&mut |p| assert!(p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn loss_examples() {
    let trace = ForwardTrace {
        pv: vec![],
        rv: vec![],
        kv: vec![],
        scores: vec![],
        weights: vec![],
        logits: vec![0.0; 3],
        probabilities: vec![1.0 / 3.0; 3],
    };
    assert!((ModelState::loss(&trace, 1).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!(ModelState::loss(&trace, 3).is_err());
}

#[test]
fn save_and_load_round_trip() {
    let mut rng = seeded_rng(9);
    let model = tiny_model(8, 2, Variant::Relocation, 10);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = ModelState::load(dir.path()).unwrap();
    let ex = random_example(model.vocab.len(), 2, 3, &mut rng);
    let a = model.forward(&ex).unwrap();
    let b = back.forward(&ex).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() < 1e-4);
    }
    assert_eq!(back.config.variant, Variant::Relocation);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("sideways".parse::<Variant>().is_err());
}
