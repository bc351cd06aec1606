//! Soft targets for the UDA baseline.

use crate::augment::{speed_perturb, AugmentError};
use crate::matrix::Matrix;

use super::TrainError;

/// Maps per-frame posteriors computed on clean stacked frames onto the
/// stacked frames of a speed-perturbed copy.
///
/// The posteriors are expanded to the raw frame rate (each stacked row
/// repeated `stack` times, truncated to `raw_frames`), resampled with the
/// same linear interpolation as [`speed_perturb`], and re-grouped by
/// averaging every `stack` rows. The result has exactly as many rows as the
/// perturbed features have after stacking.
pub fn align_soft_targets(clean: &Matrix, raw_frames: usize, factor: f64, stack: usize) -> Result<Matrix, AugmentError> {
    if factor == 1.0 {
        return Ok(clean.clone());
    }
    let c = clean.cols();
    let mut expanded = Matrix::zeros(raw_frames, c);
    for r in 0..raw_frames {
        expanded.row_mut(r).copy_from_slice(clean.row((r / stack).min(clean.rows() - 1)));
    }
    let sped = speed_perturb(&expanded, factor)?;
    let rows = sped.rows().div_ceil(stack);
    let mut out = Matrix::zeros(rows, c);
    for g in 0..rows {
        let members = g * stack..((g + 1) * stack).min(sped.rows());
        let n = members.len() as f64;
        let dst = out.row_mut(g);
        for r in members {
            for (o, x) in dst.iter_mut().zip(sped.row(r)) {
                *o += x;
            }
        }
        dst.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

/// Summed per-frame cross-entropy `-sum_t sum_k q_tk log p_tk` between soft
/// targets `q` and `p = softmax(logits)`, with its gradient on the logits.
pub fn soft_target_loss(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix), TrainError> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(TrainError::FrameMismatch {
            expected: targets.rows(),
            got: logits.rows(),
        });
    }
    let logp = logits.log_softmax_rows();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for t in 0..logits.rows() {
        let q = targets.row(t);
        let mass: f64 = q.iter().sum();
        let lp = logp.row(t);
        let g = grad.row_mut(t);
        for k in 0..q.len() {
            if q[k] > 0.0 {
                loss -= q[k] * lp[k];
            }
            g[k] = mass * lp[k].exp() - q[k];
        }
    }
    Ok((loss, grad))
}
