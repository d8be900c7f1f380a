use rand::Rng;

use super::{KernelError, Tensor};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[i] = sum_j m[i, j] * x[j]` for a row-major `[rows, x.len()]` matrix.
pub fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * cols..(i + 1) * cols], x);
    }
}

/// `out[j] += sum_i m[i, j] * v[i]`
pub fn matvec_t_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &vi) in v.iter().enumerate() {
        if vi != 0.0 {
            axpy(vi, &m[i * cols..(i + 1) * cols], out);
        }
    }
}

/// `m[i, j] += u[i] * v[j]`
pub fn outer_acc(m: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            axpy(ui, v, &mut m[i * cols..(i + 1) * cols]);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x W + b` with `x: [.., d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
pub fn linear(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, KernelError> {
    let (d_in, d_out) = linear_dims(x, weights, bias)?;
    let rows = x.rows();
    let mut out_shape = x.shape().to_vec();
    match out_shape.last_mut() {
        Some(last) => *last = d_out,
        None => out_shape.push(d_out),
    }
    let mut y = Tensor::zeros(&out_shape);
    for r in 0..rows {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        let yr = &mut y.data_mut()[r * d_out..(r + 1) * d_out];
        yr.copy_from_slice(bias.data());
        matvec_t_acc(weights.data(), xr, yr);
    }
    Ok(y)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize), KernelError> {
    let [d_in, d_out] = w.shape() else {
        return Err(KernelError::Shape(format!(
            "linear weights must be 2-d, got {:?}",
            w.shape()
        )));
    };
    if x.cols() != *d_in || b.shape() != [*d_out] || x.shape().is_empty() {
        return Err(KernelError::Shape(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((*d_in, *d_out))
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of `linear` given the upstream gradient `dy`.
pub fn linear_backward(x: &Tensor, weights: &Tensor, dy: &Tensor) -> Result<LinearGrads, KernelError> {
    let [d_in, d_out] = *weights.shape() else {
        return Err(KernelError::Shape("linear weights must be 2-d".into()));
    };
    if dy.cols() != d_out || dy.rows() != x.rows() || x.cols() != d_in {
        return Err(KernelError::Shape("linear_backward: inconsistent shapes".into()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[d_out]);
    for r in 0..x.rows() {
        let xr = &x.data()[r * d_in..(r + 1) * d_in];
        let dyr = &dy.data()[r * d_out..(r + 1) * d_out];
        matvec(weights.data(), dyr, &mut dx.data_mut()[r * d_in..(r + 1) * d_in]);
        outer_acc(dw.data_mut(), xr, dyr);
        axpy(1.0, dyr, db.data_mut());
    }
    Ok(LinearGrads { dx, dw, db })
}

/// Max-subtracted softmax. Entries equal to `-inf` map to exactly zero.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>, KernelError> {
    if x.is_empty() {
        return Err(KernelError::Domain("softmax of an empty vector".into()));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(KernelError::Domain("softmax over all -inf entries".into()));
    }
    if max.is_nan() || max == f64::INFINITY {
        return Err(KernelError::Domain("softmax input is not finite".into()));
    }
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Vector-Jacobian product of softmax: `dx = y * (dy - <y, dy>)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - inner)).collect()
}

/// `-ln(probs[label])`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, KernelError> {
    let p = probs.get(label).ok_or(KernelError::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.ln())
}

/// Fused log-softmax cross entropy on raw logits. Returns the loss, the
/// probabilities, and the gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>, Vec<f64>), KernelError> {
    if label >= logits.len() {
        return Err(KernelError::Index {
            index: label,
            len: logits.len(),
        });
    }
    let probs = softmax(logits)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    Ok((loss, probs, grad))
}

/// Inverted dropout. Returns the output and the per-entry scale that was
/// applied (`0` or `1 / (1 - rate)`), which doubles as the backward mask.
pub fn dropout<R: Rng>(x: &[f64], rate: f64, train_mode: bool, rng: &mut R) -> (Vec<f64>, Option<Vec<f64>>) {
    if !train_mode || rate <= 0.0 {
        return (x.to_vec(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let y = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
    (y, Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_trivial_weights() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let zero = linear(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        assert!(matches!(
            linear(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])),
            Err(KernelError::Shape(_))
        ));
    }

    #[test]
    fn softmax_analytic_values() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), [0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[f64::NEG_INFINITY, 1.0]).unwrap();
        assert_eq!(p, [0.0, 1.0]);
        assert!(matches!(softmax(&[f64::NEG_INFINITY; 3]), Err(KernelError::Domain(_))));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        let l = cross_entropy(&[0.25; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
        assert!(matches!(
            cross_entropy(&[0.5, 0.5], 2),
            Err(KernelError::Index { index: 2, len: 2 })
        ));
        let (loss, _, _) = softmax_cross_entropy(&[0.0; 4], 1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(dropout(&x, 0.0, true, &mut rng).0, x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).0, x);
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..100_000).map(|i| 1.0 + (i % 7) as f64).collect();
        let (y, mask) = dropout(&x, 0.5, true, &mut rng);
        let survivors = mask.unwrap().iter().filter(|&&m| m > 0.0).count() as f64 / x.len() as f64;
        assert!((survivors - 0.5).abs() <= 0.01, "{survivors}");
        let mean_x: f64 = x.iter().sum::<f64>() / x.len() as f64;
        let mean_y: f64 = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean_y - mean_x).abs() / mean_x <= 0.02);
    }
}
