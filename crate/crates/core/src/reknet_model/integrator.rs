use crate::neural_kernels::{dropout, linear, linear_backward, KernelError, ParamSet, Parameter, Rng64, Tensor};

/// `dropout(linear([a; b]))`, reducing `2H` back to `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrator {
    pub weight: Parameter,
    pub bias: Parameter,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct IntegratorCache {
    x: Tensor,
    mask: Option<Vec<f64>>,
}

impl Integrator {
    pub fn new(prefix: &str, hidden: usize, dropout: f64, rng: &mut Rng64) -> Self {
        let bound = 1.0 / ((2 * hidden) as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{prefix}.weight"),
                Tensor::uniform(&[2 * hidden, hidden], bound, rng),
            ),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[hidden])),
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.bias.value.len()
    }

    /// Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        a: &[f64],
        b: &[f64],
        rng: Option<&mut Rng64>,
    ) -> Result<(Vec<f64>, IntegratorCache), KernelError> {
        let h = self.hidden();
        if a.len() != h || b.len() != h {
            return Err(KernelError::Shape(format!(
                "integrator of width {h} got inputs of {} and {}",
                a.len(),
                b.len()
            )));
        }
        let mut x = Vec::with_capacity(2 * h);
        x.extend_from_slice(a);
        x.extend_from_slice(b);
        let x = Tensor::vector(x);
        let y = linear(&x, &self.weight.value, &self.bias.value)?.into_data();
        let (y, mask) = match rng {
            Some(rng) => dropout(&y, self.dropout, true, rng),
            None => (y, None),
        };
        Ok((y, IntegratorCache { x, mask }))
    }

    /// Accumulates parameter gradients; returns the gradients of `a` and `b`.
    pub fn backward(&mut self, cache: &IntegratorCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dy: Vec<f64> = match &cache.mask {
            Some(mask) => dy.iter().zip(mask).map(|(g, m)| g * m).collect(),
            None => dy.to_vec(),
        };
        let g =
            linear_backward(&cache.x, &self.weight.value, &Tensor::vector(dy)).expect("shapes fixed at forward time");
        self.weight
            .grad
            .data_mut()
            .iter_mut()
            .zip(g.dw.data())
            .for_each(|(a, b)| *a += b);
        self.bias
            .grad
            .data_mut()
            .iter_mut()
            .zip(g.db.data())
            .for_each(|(a, b)| *a += b);
        let dx = g.dx.into_data();
        let h = self.hidden();
        (dx[..h].to_vec(), dx[h..].to_vec())
    }
}

impl ParamSet for Integrator {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_kernels::seeded_rng;

    #[test]
    fn zero_weights_zero_output() {
        let mut it = Integrator::new("i", 3, 0.0, &mut seeded_rng(0));
        it.weight.value.fill(0.0);
        let (y, _) = it.forward(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], None).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_block_passes_first_input() {
        let h = 4;
        let mut it = Integrator::new("i", h, 0.5, &mut seeded_rng(0));
        it.weight.value.fill(0.0);
        for d in 0..h {
            it.weight.value.row_mut(d)[d] = 1.0;
        }
        let a = [0.5, -1.0, 2.0, 0.25];
        let (y, _) = it.forward(&a, &[9.0; 4], None).unwrap();
        assert_eq!(y, a.to_vec());
        assert!(it.forward(&a, &[1.0], None).is_err());
    }
}
