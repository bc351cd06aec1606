//! CTC loss and its gradient with respect to per-frame logits.
//!
//! Forward-backward runs over the blank-augmented label lattice
//! `(blank, y1, blank, y2, ..., yL, blank)` entirely in log space.

use thiserror::Error;

use crate::matrix::{log_add, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    /// The label sequence needs more frames than the input has. The loss is
    /// `+inf` for such a pair; callers decide whether to skip it.
    #[error("infeasible alignment: {frames} frames, {required} required")]
    Infeasible { frames: usize, required: usize },
    #[error("label {label} is blank or outside {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("blank index {blank} outside {classes} classes")]
    BadBlank { blank: usize, classes: usize },
    #[error("brute-force enumeration of {paths} paths exceeds the limit of {limit}")]
    TooLarge { paths: f64, limit: f64 },
}

/// Loss in nats and `d loss / d logits`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    pub loss: f64,
    pub grad_logits: Matrix,
}

/// Merges adjacent duplicates, then removes blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn check_labels(labels: &[usize], blank: usize, classes: usize) -> Result<(), CtcError> {
    if blank >= classes {
        return Err(CtcError::BadBlank { blank, classes });
    }
    if let Some(&label) = labels.iter().find(|&&l| l == blank || l >= classes) {
        return Err(CtcError::BadLabel { label, classes });
    }
    Ok(())
}

/// CTC negative log-likelihood of `labels` given per-frame `logits`
/// (softmax is applied internally), with the exact gradient.
pub fn ctc_loss_grad(logits: &Matrix, labels: &[usize], blank: usize) -> Result<CtcResult, CtcError> {
    let (t_len, classes) = (logits.rows(), logits.cols());
    check_labels(labels, blank, classes)?;
    let required = crate::corpus::min_ctc_frames(labels);
    if t_len < required.max(1) {
        return Err(CtcError::Infeasible { frames: t_len, required: required.max(1) });
    }

    let logp = logits.log_softmax_rows();
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };
    // A skip from s-2 to s is allowed into a label that differs from the previous label.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && labels[s / 2] != labels[s / 2 - 1];

    let neg = f64::NEG_INFINITY;
    let mut alpha = Matrix::from_vec(t_len, s_len, vec![neg; t_len * s_len]);
    alpha.set(0, 0, logp.get(0, blank));
    if s_len > 1 {
        alpha.set(0, 1, logp.get(0, ext(1)));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha.get(t - 1, s);
            if s >= 1 {
                a = log_add(a, alpha.get(t - 1, s - 1));
            }
            if can_skip(s) {
                a = log_add(a, alpha.get(t - 1, s - 2));
            }
            if a != neg {
                alpha.set(t, s, a + logp.get(t, ext(s)));
            }
        }
    }

    // beta(t, s): log mass of completing the path from (t, s), excluding frame t's emission.
    let mut beta = Matrix::from_vec(t_len, s_len, vec![neg; t_len * s_len]);
    beta.set(t_len - 1, s_len - 1, 0.0);
    if s_len > 1 {
        beta.set(t_len - 1, s_len - 2, 0.0);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta.get(t + 1, s) + logp.get(t + 1, ext(s));
            if s + 1 < s_len {
                b = log_add(b, beta.get(t + 1, s + 1) + logp.get(t + 1, ext(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta.get(t + 1, s + 2) + logp.get(t + 1, ext(s + 2)));
            }
            beta.set(t, s, b);
        }
    }

    let mut log_lik = alpha.get(t_len - 1, s_len - 1);
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha.get(t_len - 1, s_len - 2));
    }
    if log_lik == neg {
        return Err(CtcError::Infeasible { frames: t_len, required });
    }

    // d(-log P)/d logit_k = softmax_k - occupancy_k / P
    let mut grad = Matrix::zeros(t_len, classes);
    let mut occ = vec![neg; classes];
    for t in 0..t_len {
        occ.fill(neg);
        for s in 0..s_len {
            let k = ext(s);
            occ[k] = log_add(occ[k], alpha.get(t, s) + beta.get(t, s));
        }
        let row = grad.row_mut(t);
        for k in 0..classes {
            row[k] = logp.get(t, k).exp() - (occ[k] - log_lik).exp();
        }
    }
    Ok(CtcResult { loss: -log_lik, grad_logits: grad })
}

/// Largest enumeration [`brute_force_ctc`] accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// `P(labels | probs)` by summing over every frame-level path whose collapse
/// equals `labels`. Exponential; an oracle for small instances only.
pub fn brute_force_ctc(probs: &Matrix, labels: &[usize], blank: usize) -> Result<f64, CtcError> {
    let (t_len, classes) = (probs.rows(), probs.cols());
    check_labels(labels, blank, classes)?;
    let paths = (classes as f64).powi(t_len as i32);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(CtcError::TooLarge { paths, limit: BRUTE_FORCE_LIMIT });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for_each_path(&mut path, 0, classes, &mut |p| {
        if collapse(p, blank) == labels {
            total += p.iter().enumerate().map(|(t, &k)| probs.get(t, k)).product::<f64>();
        }
    });
    Ok(total)
}

pub(crate) fn for_each_path(path: &mut [usize], pos: usize, classes: usize, f: &mut impl FnMut(&[usize])) {
    if pos == path.len() {
        f(path);
        return;
    }
    for k in 0..classes {
        path[pos] = k;
        for_each_path(path, pos + 1, classes, f);
    }
}
