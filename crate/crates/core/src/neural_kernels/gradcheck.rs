//! Central finite-difference checks for the hand-written backward passes.

use rand::Rng;
use serde::Serialize;

use super::{
    dropout, linear, linear_backward, seeded_rng, softmax, softmax_backward, softmax_cross_entropy, GruWeights,
    ParamSet, Tensor,
};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to round-off are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;
pub const INSTANCES_PER_OP: usize = 20;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Numerical gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn flatten_values<P: ParamSet + ?Sized>(params: &P) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit(&mut |p| out.extend_from_slice(p.value.data()));
    out
}

pub fn flatten_grads<P: ParamSet + ?Sized>(params: &P) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit(&mut |p| out.extend_from_slice(p.grad.data()));
    out
}

pub fn assign_values<P: ParamSet + ?Sized>(params: &mut P, flat: &[f64]) {
    let mut offset = 0;
    params.visit_mut(&mut |p| {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    });
}

/// Numerical gradient of `loss` with respect to every value in `params`.
pub fn param_difference<P: ParamSet + ?Sized>(params: &mut P, mut loss: impl FnMut(&P) -> f64) -> Vec<f64> {
    let base = flatten_values(params);
    let mut probe = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + FD_STEP;
        assign_values(params, &probe);
        let up = loss(params);
        probe[i] = base[i] - FD_STEP;
        assign_values(params, &probe);
        let down = loss(params);
        probe[i] = base[i];
        out.push((up - down) / (2.0 * FD_STEP));
    }
    assign_values(params, &base);
    out
}

fn random_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn projected(proj: &[f64], y: &[f64]) -> f64 {
    proj.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn check_linear(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(inst as u64));
        let (rows, d_in, d_out) = (2, 4, 3);
        let x = random_vec(rows * d_in, 1.0, &mut rng);
        let w = random_vec(d_in * d_out, 1.0, &mut rng);
        let b = random_vec(d_out, 1.0, &mut rng);
        let proj = random_vec(rows * d_out, 1.0, &mut rng);
        let eval = |x: &[f64], w: &[f64], b: &[f64]| {
            let y = linear(
                &Tensor::from_vec(&[rows, d_in], x.to_vec()).unwrap(),
                &Tensor::from_vec(&[d_in, d_out], w.to_vec()).unwrap(),
                &Tensor::vector(b.to_vec()),
            )
            .unwrap();
            projected(&proj, y.data())
        };
        let grads = linear_backward(
            &Tensor::from_vec(&[rows, d_in], x.clone()).unwrap(),
            &Tensor::from_vec(&[d_in, d_out], w.clone()).unwrap(),
            &Tensor::from_vec(&[rows, d_out], proj.clone()).unwrap(),
        )
        .unwrap();
        let ndx = central_difference(|p| eval(p, &w, &b), &x);
        let ndw = central_difference(|p| eval(&x, p, &b), &w);
        let ndb = central_difference(|p| eval(&x, &w, p), &b);
        worst = worst
            .max(max_relative_error(grads.dx.data(), &ndx))
            .max(max_relative_error(grads.dw.data(), &ndw))
            .max(max_relative_error(grads.db.data(), &ndb));
    }
    report("linear", worst)
}

fn report(op: &str, worst: f64) -> GradReport {
    GradReport {
        op: op.into(),
        instances: INSTANCES_PER_OP,
        max_rel_error: worst,
    }
}

fn random_gru<R: Rng>(d_in: usize, hidden: usize, rng: &mut R) -> GruWeights {
    let mut w = GruWeights::new("g", d_in, hidden, rng);
    for b in [&mut w.b_z, &mut w.b_r, &mut w.b_n] {
        b.value = Tensor::vector(random_vec(hidden, 0.5, rng));
    }
    w
}

pub fn check_gru_step(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(100 + inst as u64));
        let (d_in, hidden) = (3, 4);
        let mut w = random_gru(d_in, hidden, &mut rng);
        let x = random_vec(d_in, 1.0, &mut rng);
        let h = random_vec(hidden, 1.0, &mut rng);
        let proj = random_vec(hidden, 1.0, &mut rng);

        w.zero_grad();
        let (_, cache) = w.step(&x, &h).unwrap();
        let (dx, dh) = w.step_backward(&cache, &proj);
        let analytic_params = flatten_grads(&w);

        let ndx = central_difference(|p| projected(&proj, &w.step(p, &h).unwrap().0), &x);
        let ndh = central_difference(|p| projected(&proj, &w.step(&x, p).unwrap().0), &h);
        let ndp = param_difference(&mut w, |w| projected(&proj, &w.step(&x, &h).unwrap().0));
        worst = worst
            .max(max_relative_error(&dx, &ndx))
            .max(max_relative_error(&dh, &ndh))
            .max(max_relative_error(&analytic_params, &ndp));
    }
    report("gru_step", worst)
}

pub fn check_gru_sequence(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(200 + inst as u64));
        let (d_in, hidden, len) = (3, 4, 5);
        let mut w = random_gru(d_in, hidden, &mut rng);
        let xs: Vec<Vec<f64>> = (0..len).map(|_| random_vec(d_in, 1.0, &mut rng)).collect();
        let h0 = random_vec(hidden, 1.0, &mut rng);
        let projs: Vec<Vec<f64>> = (0..len).map(|_| random_vec(hidden, 1.0, &mut rng)).collect();
        let loss = |w: &GruWeights, xs: &[Vec<f64>], h0: &[f64]| -> f64 {
            let (states, _) = w.run(xs, h0).unwrap();
            states.iter().zip(&projs).map(|(s, p)| projected(p, s)).sum()
        };

        w.zero_grad();
        let (_, caches) = w.run(&xs, &h0).unwrap();
        let (dxs, dh0) = w.run_backward(&caches, &projs);
        let analytic_params = flatten_grads(&w);

        let flat_x: Vec<f64> = xs.concat();
        let ndx = central_difference(
            |p| {
                let seq: Vec<Vec<f64>> = p.chunks(d_in).map(<[f64]>::to_vec).collect();
                loss(&w, &seq, &h0)
            },
            &flat_x,
        );
        let ndh = central_difference(|p| loss(&w, &xs, p), &h0);
        let ndp = param_difference(&mut w, |w| loss(w, &xs, &h0));
        worst = worst
            .max(max_relative_error(&dxs.concat(), &ndx))
            .max(max_relative_error(&dh0, &ndh))
            .max(max_relative_error(&analytic_params, &ndp));
    }
    report("gru_sequence", worst)
}

pub fn check_softmax(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(300 + inst as u64));
        let m = 2 + inst % 6;
        let x = random_vec(m, 3.0, &mut rng);
        let proj = random_vec(m, 1.0, &mut rng);
        let y = softmax(&x).unwrap();
        let dx = softmax_backward(&y, &proj);
        let ndx = central_difference(|p| projected(&proj, &softmax(p).unwrap()), &x);
        worst = worst.max(max_relative_error(&dx, &ndx));
    }
    report("softmax", worst)
}

pub fn check_cross_entropy(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(400 + inst as u64));
        let n = 2 + inst % 5;
        let logits = random_vec(n, 3.0, &mut rng);
        let label = rng.random_range(0..n);
        let (_, _, grad) = softmax_cross_entropy(&logits, label).unwrap();
        let num = central_difference(|p| softmax_cross_entropy(p, label).unwrap().0, &logits);
        worst = worst.max(max_relative_error(&grad, &num));
    }
    report("cross_entropy", worst)
}

pub fn check_dropout(seed: u64) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES_PER_OP {
        let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(500 + inst as u64));
        let x = random_vec(8, 1.0, &mut rng);
        let proj = random_vec(8, 1.0, &mut rng);
        let mask_seed = rng.random::<u64>();
        let eval = |p: &[f64]| {
            let (y, _) = dropout(p, 0.3, true, &mut seeded_rng(mask_seed));
            projected(&proj, &y)
        };
        let (_, mask) = dropout(&x, 0.3, true, &mut seeded_rng(mask_seed));
        let mask = mask.expect("train mode");
        let dx: Vec<f64> = proj.iter().zip(&mask).map(|(g, m)| g * m).collect();
        worst = worst.max(max_relative_error(&dx, &central_difference(eval, &x)));
    }
    report("dropout", worst)
}

/// All kernel-level suites.
pub fn kernel_suites(seed: u64) -> Vec<GradReport> {
    vec![
        check_linear(seed),
        check_gru_step(seed),
        check_gru_sequence(seed),
        check_softmax(seed),
        check_cross_entropy(seed),
        check_dropout(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_gradients_match_finite_differences() {
        for r in kernel_suites(7) {
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-7);
    }
}
