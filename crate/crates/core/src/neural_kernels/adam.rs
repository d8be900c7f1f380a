use super::{ParamSet, Parameter};

/// Adam with bias correction. Moment buffers are keyed by visitation order,
/// so one optimizer must always be used with the same parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter for which `trainable` returns true.
    /// Frozen parameters keep their value and their moments stay untouched.
    pub fn update<P: ParamSet + ?Sized>(&mut self, params: &mut P, lr: f64, trainable: &dyn Fn(&Parameter) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut slot = 0;
        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |p| {
            if first.len() == slot {
                first.push(vec![0.0; p.value.len()]);
                second.push(vec![0.0; p.value.len()]);
            }
            if trainable(p) {
                adam_update(
                    p.value.data_mut(),
                    p.grad.data(),
                    &mut first[slot],
                    &mut second[slot],
                    lr,
                    b1,
                    b2,
                    eps,
                    c1,
                    c2,
                );
            }
            slot += 1;
        });
    }
}

/// Elementwise Adam step given bias-correction factors `c1 = 1 - b1^t`,
/// `c2 = 1 - b2^t`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        if g == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
            continue;
        }
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_kernels::Tensor;

    struct One(Parameter);
    impl ParamSet for One {
        fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = One(Parameter::new("p", Tensor::vector(vec![1.0, -2.0])));
        let mut opt = Adam::default();
        opt.update(&mut p, 0.1, &|_| true);
        assert_eq!(p.0.value.data(), [1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let lr = 0.01;
        for g in [0.3, -2.0, 1e-3] {
            let mut p = One(Parameter::new("p", Tensor::vector(vec![0.5])));
            p.0.grad = Tensor::vector(vec![g]);
            let mut opt = Adam::default();
            opt.update(&mut p, lr, &|_| true);
            let expected = 0.5 - lr * g / ((g * g).sqrt() + 1e-8);
            assert!((p.0.value.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_descends() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // far enough away that 100 steps of size ~lr never overshoot
        let center: Vec<f64> = (0..5)
            .map(|_| rng.random_range(5.0..10.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut p = One(Parameter::new("p", Tensor::vector(vec![0.0; 5])));
        let loss = |x: &[f64]| -> f64 { x.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum() };
        let mut opt = Adam::default();
        let mut losses = Vec::new();
        for _ in 0..100 {
            let g: Vec<f64> =
                p.0.value
                    .data()
                    .iter()
                    .zip(&center)
                    .map(|(a, c)| 2.0 * (a - c))
                    .collect();
            p.0.grad = Tensor::vector(g);
            opt.update(&mut p, 0.05, &|_| true);
            losses.push(loss(p.0.value.data()));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
        assert!(losses[99] < losses[0]);
    }
}
