use crate::neural_kernels::ops::{axpy, dot, matvec, matvec_t_acc, outer_acc};
use crate::neural_kernels::{softmax, softmax_backward, KernelError, Tensor};

/// One candidate's attention over all `m` quadruples.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub kv: Vec<f64>,
}

/// `W h_j` for every key; shared by all queries of an example.
pub fn project_keys(w: &Tensor, hs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    hs.iter()
        .map(|h| {
            let mut out = vec![0.0; w.rows()];
            matvec(w.data(), h, &mut out);
            out
        })
        .collect()
}

/// How scores are turned into weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionMode<'a> {
    /// Keys scored `-inf` (ignored when every key is excluded).
    pub excluded: Option<&'a [bool]>,
    /// Forces every score to zero.
    pub uniform: bool,
}

/// Scores `(qᵀ W h_j) · c_j`, weights `softmax(scores)`, and `KV = Σ w_j h_j`,
/// given the projected keys `wh[j] = W h_j`.
pub fn attend(
    query: &[f64],
    hs: &[Vec<f64>],
    wh: &[Vec<f64>],
    conf: &[f64],
    mode: AttentionMode<'_>,
) -> Result<AttentionOutput, KernelError> {
    let m = hs.len();
    if m == 0 || wh.len() != m || conf.len() != m {
        return Err(KernelError::Shape(format!(
            "attention over {m} keys with {} projections and {} confidences",
            wh.len(),
            conf.len()
        )));
    }
    let excluded = mode.excluded.filter(|e| e.len() == m && !e.iter().all(|&x| x));
    let scores: Vec<f64> = (0..m)
        .map(|j| {
            if excluded.is_some_and(|e| e[j]) {
                f64::NEG_INFINITY
            } else if mode.uniform {
                0.0
            } else {
                dot(query, &wh[j]) * conf[j]
            }
        })
        .collect();
    let weights = softmax(&scores)?;
    let mut kv = vec![0.0; hs[0].len()];
    for (h, &wj) in hs.iter().zip(&weights) {
        axpy(wj, h, &mut kv);
    }
    Ok(AttentionOutput { scores, weights, kv })
}

/// Convenience form of [`attend`] that projects the keys itself.
pub fn weighted_attention(
    query: &[f64],
    w: &Tensor,
    hs: &[Vec<f64>],
    conf: &[f64],
) -> Result<AttentionOutput, KernelError> {
    attend(query, hs, &project_keys(w, hs), conf, AttentionMode::default())
}

/// Backward of [`attend`]. Accumulates into `dw` and `d_hs`; returns the
/// query gradient.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    query: &[f64],
    hs: &[Vec<f64>],
    wh: &[Vec<f64>],
    conf: &[f64],
    out: &AttentionOutput,
    d_kv: &[f64],
    w: &Tensor,
    uniform: bool,
    dw: &mut [f64],
    d_hs: &mut [Vec<f64>],
) -> Vec<f64> {
    let m = hs.len();
    let d_weights: Vec<f64> = hs.iter().map(|h| dot(d_kv, h)).collect();
    for j in 0..m {
        axpy(out.weights[j], d_kv, &mut d_hs[j]);
    }
    let mut d_query = vec![0.0; query.len()];
    if uniform {
        return d_query;
    }
    let d_scores = softmax_backward(&out.weights, &d_weights);
    let mut wt_q = vec![0.0; w.cols()];
    matvec_t_acc(w.data(), query, &mut wt_q);
    let mut mixed = vec![0.0; w.cols()];
    for j in 0..m {
        if out.scores[j] == f64::NEG_INFINITY {
            continue;
        }
        let g = d_scores[j] * conf[j];
        if g == 0.0 {
            continue;
        }
        axpy(g, &wh[j], &mut d_query);
        axpy(g, &hs[j], &mut mixed);
        axpy(g, &wt_q, &mut d_hs[j]);
    }
    outer_acc(dw, query, &mixed);
    d_query
}
