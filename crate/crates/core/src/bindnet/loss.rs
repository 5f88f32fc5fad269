//! Temperature-scaled logits and the graded contrastive loss.
//!
//! For a logits matrix `S` and targets `p`, row `i` contributes
//! `-(p_i log q_i + (1 - p_i) log(1 - q_i))` with `q_i` the row softmax at the
//! diagonal. `log(1 - q_i)` is evaluated as the off-diagonal log-sum-exp minus
//! the full log-sum-exp, which stays finite when `q_i` rounds to 1.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// `S[i][j] = (a_i · b_j) / tau`.
pub fn pair_logits(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "logit inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(a.dot(&b.t()) / tau)
}

/// Softmax of every row.
pub fn row_softmax(s: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = s.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check(s: &ArrayView2<'_, f64>, p: &[f64]) -> Result<usize> {
    let (rows, cols) = s.dim();
    if rows < 2 {
        return Err(Error::DegenerateBatch(rows));
    }
    if rows != cols || p.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "loss needs a square B×B logits matrix and B targets, got {rows}×{cols} and {}",
            p.len()
        )));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("target {bad} outside [0, 1]")));
    }
    Ok(rows)
}

/// Graded InfoNCE over row-softmaxes of `s` with diagonal targets `p`.
pub fn graded_infonce(s: ArrayView2<'_, f64>, p: &[f64]) -> Result<f64> {
    let b = check(&s, p)?;
    let mut total = 0.0;
    for (i, row) in s.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        let log_q = row[i] - lse;
        let mut term = p[i] * log_q;
        if p[i] < 1.0 {
            let off = log_sum_exp(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v));
            term += (1.0 - p[i]) * (off - lse);
        }
        total -= term;
    }
    Ok(total / b as f64)
}

/// Loss and its gradient with respect to every logit.
///
/// `d loss_i / d S_ij = softmax_ij - p_i [i = j] - (1 - p_i) offsoftmax_ij`, where
/// `offsoftmax` is the softmax over the off-diagonal entries of row `i`.
pub(crate) fn graded_infonce_grad(s: ArrayView2<'_, f64>, p: &[f64]) -> Result<(f64, Array2<f64>)> {
    let b = check(&s, p)?;
    let scale = 1.0 / b as f64;
    let mut grad = Array2::zeros((b, b));
    let mut total = 0.0;
    for (i, row) in s.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        let mut term = p[i] * (row[i] - lse);
        let mut g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - lse).exp() * scale;
        }
        g[i] -= p[i] * scale;
        if p[i] < 1.0 {
            let off = log_sum_exp(row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v));
            term += (1.0 - p[i]) * (off - lse);
            let w = (1.0 - p[i]) * scale;
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    g[j] -= w * (v - off).exp();
                }
            }
        }
        total -= term;
    }
    Ok((total * scale, grad))
}
