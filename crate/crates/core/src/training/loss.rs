use serde::{Deserialize, Serialize};

use crate::data::tokens::TokenId;
use crate::error::{ensure_dim, Error, Result};
use crate::pca::PcaBasis;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub latent_loss: f64,
    pub total: f64,
    pub lambda_latent: f64,
    pub latent_positions: usize,
    pub lm_positions: usize,
}

impl LossBreakdown {
    pub fn new(lm_loss: f64, latent_loss: f64, lambda_latent: f64, lm_positions: usize, latent_positions: usize) -> Self {
        Self {
            lm_loss,
            latent_loss,
            total: lm_loss + lambda_latent * latent_loss,
            lambda_latent,
            latent_positions,
            lm_positions,
        }
    }

    /// Unweighted mean of per-example losses.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let lm = items.iter().map(|b| b.lm_loss).sum::<f64>() / n;
        let lat = items.iter().map(|b| b.latent_loss).sum::<f64>() / n;
        let lambda = items.first().map_or(0.0, |b| b.lambda_latent);
        Self::new(
            lm,
            lat,
            lambda,
            items.iter().map(|b| b.lm_positions).sum(),
            items.iter().map(|b| b.latent_positions).sum(),
        )
    }
}

/// Mean squared distance between PCA-decoded predictions and targets.
pub fn latent_loss(basis: &PcaBasis, coeffs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if coeffs.is_empty() {
        return Err(Error::InvalidArgument("latent loss over zero positions".into()));
    }
    ensure_dim("latent_loss positions", coeffs.len(), targets.len())?;
    let mut sum = 0.0;
    for (c, v) in coeffs.iter().zip(targets) {
        ensure_dim("latent_loss target", basis.dim(), v.len())?;
        let r = basis.reconstruct(c)?;
        sum += r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / coeffs.len() as f64)
}

/// `ln Σ exp(x)`, shifted by the max.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood over rows whose mask is `true`.
pub fn lm_loss(logit_rows: &[Vec<f64>], targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    ensure_dim("lm_loss targets", logit_rows.len(), targets.len())?;
    ensure_dim("lm_loss mask", logit_rows.len(), mask.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((row, &t), &m) in logit_rows.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::InvalidArgument(format!("target {t} outside vocabulary of {}", row.len())));
        }
        sum += log_sum_exp(row) - row[t];
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("every position is masked".into()));
    }
    Ok(sum / n as f64)
}
