use rand::Rng;

use super::ops::{matvec, matvec_t_acc, outer_acc, sigmoid};
use super::{KernelError, ParamSet, Parameter, Tensor};

pub const UPDATE_GATE_BIAS: f64 = 1.0;

/// Weights of one gated recurrent unit.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + r * (U_n h) + b_n)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub d_in: usize,
    pub hidden: usize,
    pub w_z: Parameter,
    pub w_r: Parameter,
    pub w_n: Parameter,
    pub u_z: Parameter,
    pub u_r: Parameter,
    pub u_n: Parameter,
    pub b_z: Parameter,
    pub b_r: Parameter,
    pub b_n: Parameter,
}

/// Values saved by the forward step for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub un_h: Vec<f64>,
}

impl GruWeights {
    pub fn zeros(prefix: &str, d_in: usize, hidden: usize) -> Self {
        let p = |name: &str, shape: &[usize]| Parameter::new(format!("{prefix}.{name}"), Tensor::zeros(shape));
        Self {
            d_in,
            hidden,
            w_z: p("w_z", &[hidden, d_in]),
            w_r: p("w_r", &[hidden, d_in]),
            w_n: p("w_n", &[hidden, d_in]),
            u_z: p("u_z", &[hidden, hidden]),
            u_r: p("u_r", &[hidden, hidden]),
            u_n: p("u_n", &[hidden, hidden]),
            b_z: p("b_z", &[hidden]),
            b_r: p("b_r", &[hidden]),
            b_n: p("b_n", &[hidden]),
        }
    }

    /// Matrices uniform in `±1/sqrt(fan_in)`. The update-gate bias starts at
    /// [`UPDATE_GATE_BIAS`] and the other biases at zero.
    pub fn new<R: Rng>(prefix: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(prefix, d_in, hidden);
        let bx = 1.0 / (d_in as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        for m in [&mut w.w_z, &mut w.w_r, &mut w.w_n] {
            m.value = Tensor::uniform(&[hidden, d_in], bx, rng);
        }
        for m in [&mut w.u_z, &mut w.u_r, &mut w.u_n] {
            m.value = Tensor::uniform(&[hidden, hidden], bh, rng);
        }
        w.b_z.value.fill(UPDATE_GATE_BIAS);
        w
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<(), KernelError> {
        if x.len() != self.d_in || h.len() != self.hidden {
            return Err(KernelError::Shape(format!(
                "gru step expects x[{}], h[{}]; got x[{}], h[{}]",
                self.d_in,
                self.hidden,
                x.len(),
                h.len()
            )));
        }
        Ok(())
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache), KernelError> {
        self.check(x, h)?;
        let hn = self.hidden;
        let mut z = self.b_z.value.data().to_vec();
        let mut r = self.b_r.value.data().to_vec();
        let mut n = self.b_n.value.data().to_vec();
        let mut tmp = vec![0.0; hn];
        let mut un_h = vec![0.0; hn];

        matvec(self.w_z.value.data(), x, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        matvec(self.u_z.value.data(), h, &mut tmp);
        z.iter_mut().zip(&tmp).for_each(|(a, b)| *a = sigmoid(*a + b));

        matvec(self.w_r.value.data(), x, &mut tmp);
        r.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        matvec(self.u_r.value.data(), h, &mut tmp);
        r.iter_mut().zip(&tmp).for_each(|(a, b)| *a = sigmoid(*a + b));

        matvec(self.w_n.value.data(), x, &mut tmp);
        matvec(self.u_n.value.data(), h, &mut un_h);
        for i in 0..hn {
            n[i] = (n[i] + tmp[i] + r[i] * un_h[i]).tanh();
        }

        let h_new: Vec<f64> = (0..hn).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect();
        Ok((
            h_new,
            GruCache {
                x: x.to_vec(),
                h: h.to_vec(),
                z,
                r,
                n,
                un_h,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `(dx, dh)`.
    pub fn step_backward(&mut self, cache: &GruCache, dh_new: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hn = self.hidden;
        let mut dx = vec![0.0; self.d_in];
        let mut dh: Vec<f64> = (0..hn).map(|i| dh_new[i] * cache.z[i]).collect();

        let mut da_n = vec![0.0; hn];
        let mut da_z = vec![0.0; hn];
        let mut da_r = vec![0.0; hn];
        let mut d_unh = vec![0.0; hn];
        for i in 0..hn {
            let dn = dh_new[i] * (1.0 - cache.z[i]);
            let dz = dh_new[i] * (cache.h[i] - cache.n[i]);
            da_n[i] = dn * (1.0 - cache.n[i] * cache.n[i]);
            let dr = da_n[i] * cache.un_h[i];
            d_unh[i] = da_n[i] * cache.r[i];
            da_r[i] = dr * cache.r[i] * (1.0 - cache.r[i]);
            da_z[i] = dz * cache.z[i] * (1.0 - cache.z[i]);
        }

        for (da, w, u, b, hin) in [
            (&da_n, &mut self.w_n, &mut self.u_n, &mut self.b_n, &d_unh),
            (&da_r, &mut self.w_r, &mut self.u_r, &mut self.b_r, &da_r),
            (&da_z, &mut self.w_z, &mut self.u_z, &mut self.b_z, &da_z),
        ] {
            outer_acc(w.grad.data_mut(), da, &cache.x);
            matvec_t_acc(w.value.data(), da, &mut dx);
            b.grad.data_mut().iter_mut().zip(da.iter()).for_each(|(g, d)| *g += d);
            outer_acc(u.grad.data_mut(), hin, &cache.h);
            matvec_t_acc(u.value.data(), hin, &mut dh);
        }
        (dx, dh)
    }

    /// Runs the cell over a sequence starting from `h0`; returns every hidden state.
    pub fn run(&self, inputs: &[Vec<f64>], h0: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<GruCache>), KernelError> {
        let mut states = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        let mut h = h0.to_vec();
        for x in inputs {
            let (next, cache) = self.step(x, &h)?;
            states.push(next.clone());
            caches.push(cache);
            h = next;
        }
        Ok((states, caches))
    }

    /// Backward through [`GruWeights::run`]. `d_states[t]` is the gradient
    /// arriving at hidden state `t` from outside the recurrence. Returns the
    /// input gradients and the gradient with respect to `h0`.
    pub fn run_backward(&mut self, caches: &[GruCache], d_states: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut dxs = vec![Vec::new(); caches.len()];
        let mut carry = vec![0.0; self.hidden];
        for t in (0..caches.len()).rev() {
            carry.iter_mut().zip(&d_states[t]).for_each(|(c, d)| *c += d);
            let (dx, dh) = self.step_backward(&caches[t], &carry);
            dxs[t] = dx;
            carry = dh;
        }
        (dxs, carry)
    }
}

impl ParamSet for GruWeights {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for p in [
            &self.w_z, &self.w_r, &self.w_n, &self.u_z, &self.u_r, &self.u_n, &self.b_z, &self.b_r, &self.b_n,
        ] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_n,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_n,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_n,
        ] {
            f(p);
        }
    }
}

/// Single GRU step on tensors.
pub fn gru_step(x: &Tensor, h: &Tensor, weights: &GruWeights) -> Result<Tensor, KernelError> {
    let (h_new, _) = weights.step(x.data(), h.data())?;
    Ok(Tensor::vector(h_new))
}
