//! Spectrogram-level augmentation: speed perturbation along the time axis
//! and frequency/time masking.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("speed factor must be positive and finite, got {0}")]
    BadFactor(f64),
    #[error("speed factor {factor} turns {frames} frames into zero frames")]
    EmptyOutput { frames: usize, factor: f64 },
    #[error("pseudo-label is empty")]
    EmptyPseudoLabel,
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    /// Number of frequency masks.
    pub freq_masks: usize,
    /// Maximum frequency-mask width (clamped to D).
    pub freq_mask_width: usize,
    /// Number of time masks.
    pub time_masks: usize,
    /// Maximum time-mask width (clamped to T).
    pub time_mask_width: usize,
    pub mask_value: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.0, 1.1],
            freq_masks: 1,
            freq_mask_width: 8,
            time_masks: 2,
            time_mask_width: 16,
            mask_value: 0.0,
        }
    }
}

impl AugmentConfig {
    /// No speed change and no masks: every augmentation is the identity.
    pub fn identity() -> Self {
        Self {
            speed_factors: vec![1.0],
            freq_masks: 0,
            freq_mask_width: 0,
            time_masks: 0,
            time_mask_width: 0,
            mask_value: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.speed_factors.is_empty() {
            return Err(AugmentError::InvalidConfig("at least one speed factor is required".into()));
        }
        if let Some(&f) = self.speed_factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(AugmentError::BadFactor(f));
        }
        if !self.mask_value.is_finite() {
            return Err(AugmentError::InvalidConfig("mask value must be finite".into()));
        }
        Ok(())
    }
}

/// Output length of speed perturbation: `round(T / factor)`, half away from zero.
pub fn perturbed_len(frames: usize, factor: f64) -> usize {
    (frames as f64 / factor).round() as usize
}

/// Resamples the time axis by linear interpolation. Output row `t` reads the
/// source at position `t * factor`, clamping to the last frame.
pub fn speed_perturb(features: &Matrix, factor: f64) -> Result<Matrix, AugmentError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(AugmentError::BadFactor(factor));
    }
    if factor == 1.0 {
        return Ok(features.clone());
    }
    let (t, d) = (features.rows(), features.cols());
    let out_len = perturbed_len(t, factor);
    if out_len == 0 {
        return Err(AugmentError::EmptyOutput { frames: t, factor });
    }
    let mut out = Matrix::zeros(out_len, d);
    for r in 0..out_len {
        let pos = r as f64 * factor;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let dst = out.row_mut(r);
        if lo >= t - 1 {
            dst.copy_from_slice(features.row(t - 1));
        } else if frac == 0.0 {
            dst.copy_from_slice(features.row(lo));
        } else {
            let (a, b) = (features.row(lo), features.row(lo + 1));
            for ((o, x), y) in dst.iter_mut().zip(a).zip(b) {
                *o = (1.0 - frac) * x + frac * y;
            }
        }
    }
    Ok(out)
}

/// Applies frequency masks then time masks, each with a width drawn
/// uniformly from `0..=max` and a uniform start among valid positions.
pub fn spectral_mask(features: &Matrix, cfg: &AugmentConfig, seed: u64) -> Matrix {
    let mut out = features.clone();
    let (t, d) = (features.rows(), features.cols());
    let mut rng = rng_from_seed(seed);
    for _ in 0..cfg.freq_masks {
        let width = rng.gen_range(0..=cfg.freq_mask_width.min(d));
        let start = rng.gen_range(0..=d - width);
        for r in 0..t {
            out.row_mut(r)[start..start + width].fill(cfg.mask_value);
        }
    }
    for _ in 0..cfg.time_masks {
        let width = rng.gen_range(0..=cfg.time_mask_width.min(t));
        let start = rng.gen_range(0..=t - width);
        for r in start..start + width {
            out.row_mut(r).fill(cfg.mask_value);
        }
    }
    out
}

/// Distorted variants of one utterance: one per speed factor, each masked
/// with its own derived seed. Labels are copied unchanged.
pub fn augment_supervised(
    features: &Matrix,
    labels: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<(Matrix, Vec<usize>)>, AugmentError> {
    (0..cfg.speed_factors.len())
        .map(|i| Ok((augment_variant(features, cfg, i, seed)?, labels.to_vec())))
        .collect()
}

/// Variant `index` of [`augment_supervised`]: speed factor `index`, then
/// masking seeded from `(seed, index)`.
pub fn augment_variant(features: &Matrix, cfg: &AugmentConfig, index: usize, seed: u64) -> Result<Matrix, AugmentError> {
    let sped = speed_perturb(features, cfg.speed_factors[index])?;
    Ok(spectral_mask(&sped, cfg, derive_seed(seed, &[index as u64])))
}

/// Same as [`augment_supervised`] but for an unlabeled utterance whose
/// pseudo-label was decoded from the clean features.
pub fn augment_unsupervised(
    features: &Matrix,
    pseudo_labels: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<(Matrix, Vec<usize>)>, AugmentError> {
    if pseudo_labels.is_empty() {
        return Err(AugmentError::EmptyPseudoLabel);
    }
    augment_supervised(features, pseudo_labels, cfg, seed)
}
