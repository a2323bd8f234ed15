//! Scaled dot-product and multi-head attention with optional rotary modulation.
//!
//! Rotary phases are applied to queries and keys only; values are never rotated.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Result, RetoError};
use crate::rope::{apply_rotary, PhaseTable};

/// Rows of queries processed together when the weight matrix is not materialized.
const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub values: Array2<f64>,
    /// Row-stochastic `N x N` weights, present only when requested.
    pub weights: Option<Array2<f64>>,
}

/// In-place row softmax with the row maximum subtracted first.
pub fn softmax_rows(mut logits: ArrayViewMut2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Full softmax weight matrix for already-rotated queries and keys.
pub(crate) fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|v| v * scale);
    softmax_rows(logits.view_mut());
    logits
}

/// Attention over already-rotated queries and keys, computed in row blocks.
///
/// `on_row(i, weights_i)` sees every softmax row exactly once, in increasing `i`,
/// so callers can reduce rows (entropy, export) without an `N x N` allocation.
pub(crate) fn attend_rows<F>(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, mut on_row: F) -> Array2<f64>
where
    F: FnMut(usize, &[f64]),
{
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = Array2::zeros((n, v.ncols()));
    let mut start = 0;
    while start < n {
        let end = (start + ROW_CHUNK).min(n);
        let mut logits = q.slice(s![start..end, ..]).dot(&k.t());
        logits.mapv_inplace(|x| x * scale);
        softmax_rows(logits.view_mut());
        for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
            on_row(start + r, row.as_slice().expect("standard layout"));
        }
        out.slice_mut(s![start..end, ..]).assign(&logits.dot(&v));
        start = end;
    }
    out
}

/// `softmax(Q̃ K̃ᵀ / √d_k) V`, with `Q̃ = R Q`, `K̃ = R K` when phases are given.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    phases: Option<&PhaseTable>,
    retain_weights: bool,
) -> Result<AttentionOutput> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || k.ncols() != q.ncols() {
        return Err(RetoError::Shape(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n == 0 {
        return Err(RetoError::EmptyInput("attention over zero points".into()));
    }
    let (q, k) = match phases {
        Some(p) => (apply_rotary(q, p)?, apply_rotary(k, p)?),
        None => (q.to_owned(), k.to_owned()),
    };
    if retain_weights {
        let w = attention_weights(q.view(), k.view());
        let values = w.dot(&v);
        return Ok(AttentionOutput {
            values,
            weights: Some(w),
        });
    }
    let values = attend_rows(q.view(), k.view(), v, |_, _| {});
    Ok(AttentionOutput {
        values,
        weights: None,
    })
}

/// Per-head projection matrices, each `D x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// `Concat(head_1..head_H) W^O` with `head_h = Attention(X W^Q_h, X W^K_h, X W^V_h)`.
///
/// All heads share the same phase table.
pub fn multi_head_attention(
    x: ArrayView2<f64>,
    heads: &[HeadProjections],
    wo: ArrayView2<f64>,
    phases: Option<&PhaseTable>,
) -> Result<Array2<f64>> {
    let d = x.ncols();
    let h = heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(RetoError::Config(format!(
            "latent width {d} not divisible by {h} heads"
        )));
    }
    let dh = d / h;
    for (i, p) in heads.iter().enumerate() {
        for w in [&p.wq, &p.wk, &p.wv] {
            if w.dim() != (d, dh) {
                return Err(RetoError::Shape(format!(
                    "head {i} projection is {:?}, expected ({d}, {dh})",
                    w.dim()
                )));
            }
        }
    }
    if wo.dim() != (d, d) {
        return Err(RetoError::Shape(format!("W^O is {:?}, expected ({d}, {d})", wo.dim())));
    }
    let mut concat = Array2::zeros((x.nrows(), d));
    for (i, p) in heads.iter().enumerate() {
        let out = scaled_dot_attention(x.dot(&p.wq).view(), x.dot(&p.wk).view(), x.dot(&p.wv).view(), phases, false)?;
        concat.slice_mut(s![.., i * dh..(i + 1) * dh]).assign(&out.values);
    }
    Ok(concat.dot(&wo))
}
