//! Scaled dot-product attention kernel.

use super::{NnError, Real, Tensor};

/// `softmax(Q·Kᵀ/√d)·V` for `Q: n×d`, `K: m×d`, `V: m×dv`. `mask[j] == false`
/// marks key `j` as padding; it receives exactly zero weight. A query whose
/// keys are all masked gets an all-zero weight row.
pub fn attention<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    mask: Option<&[bool]>,
) -> Result<(Tensor<R>, Tensor<R>), NnError> {
    if q.cols != k.cols || k.rows != v.rows {
        return Err(NnError::ShapeMismatch(format!(
            "attention q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != k.rows {
            return Err(NnError::ShapeMismatch(format!("mask of {} for {} keys", m.len(), k.rows)));
        }
    }
    let (n, m) = (q.rows, k.rows);
    let keep = |j: usize| mask.map_or(true, |ms| ms[j]);
    let scale = R::from_f64(1.0 / (q.cols as f64).sqrt());
    let mut w = Tensor::zeros(n, m);
    super::tensor::gemm(scale, q, false, k, true, R::ZERO, &mut w);
    for i in 0..n {
        let row = w.row_mut(i);
        let mut hi: Option<R> = None;
        for (j, &s) in row.iter().enumerate() {
            if keep(j) {
                hi = Some(hi.map_or(s, |h| h.max(s)));
            }
        }
        let Some(hi) = hi else {
            row.fill(R::ZERO);
            continue;
        };
        let mut z = R::ZERO;
        for (j, s) in row.iter_mut().enumerate() {
            *s = if keep(j) { (*s - hi).exp() } else { R::ZERO };
            z += *s;
        }
        for s in row.iter_mut() {
            *s = *s / z;
        }
    }
    let mut out = Tensor::zeros(n, v.cols);
    super::tensor::gemm(R::ONE, &w, false, v, false, R::ZERO, &mut out);
    Ok((out, w))
}
