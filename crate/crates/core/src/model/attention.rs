//! Scaled dot-product attention with an explicit visibility mask.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_bt, Float, Tensor};

/// Row-major `[rows × cols]` visibility; `true` means the query may read that key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    /// Position `t` sees positions `0..=t`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|i| i % len <= i / len).collect();
        AttentionMask {
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// In-place softmax over the first `visible` entries of `row`; later entries
/// are set to exactly zero.
pub(crate) fn causal_softmax_row<T: Float>(row: &mut [T], visible: usize) {
    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in &mut row[..visible] {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in &mut row[..visible] {
        *x /= sum;
    }
    row[visible..].iter_mut().for_each(|x| *x = T::zero());
}

/// Softmax with masked logits at −∞; a fully masked row yields zeros.
pub(crate) fn masked_softmax_row<T: Float>(row: &mut [T], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (x, &a) in row.iter_mut().zip(allowed) {
        *x = if a { (*x - max).exp() } else { T::zero() };
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Attention weights `softmax(Q·Kᵀ/√d_k)` under `mask`, shaped `[tq × tk]`.
pub fn attention_weights<T: Float>(q: &Tensor<T>, k: &Tensor<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
    let (tq, dk) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != dk {
        return Err(Error::Shape(format!("Q has width {dk}, K has width {}", k.cols())));
    }
    if mask.rows != tq || mask.cols != tk || mask.allowed.len() != tq * tk {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match scores {tq}×{tk}",
            mask.rows, mask.cols
        )));
    }
    let mut scores = Tensor::zeros(&[tq, tk]);
    matmul_bt(q.data(), k.data(), scores.data_mut(), tq, dk, tk, false);
    let scale = T::one() / T::lit(dk as f64).sqrt();
    scores.scale(scale);
    for r in 0..tq {
        let allowed = &mask.allowed[r * tk..(r + 1) * tk];
        masked_softmax_row(scores.row_mut(r), allowed);
    }
    Ok(scores)
}

/// `softmax(Q·Kᵀ/√d_k) · V` with masked scores at −∞.
pub fn attention<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
    if v.rows() != k.rows() {
        return Err(Error::Shape(format!("K has {} rows, V has {}", k.rows(), v.rows())));
    }
    let w = attention_weights(q, k, mask)?;
    let (tq, tk, dv) = (q.rows(), k.rows(), v.cols());
    let mut out = Tensor::zeros(&[tq, dv]);
    matmul(w.data(), v.data(), out.data_mut(), tq, tk, dv, false);
    Ok(out)
}
