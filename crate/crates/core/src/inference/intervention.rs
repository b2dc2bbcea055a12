use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2, Rng};
use crate::pca::PcaBasis;

/// What happens to the latent content during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionMode {
    Clean,
    /// The span is never entered.
    ZeroLatent,
    /// Coefficients replaced by `scale·√λⱼ·N(0, 1)` draws.
    Noise { scale: f64, norm_match: bool },
}

impl InterventionMode {
    pub fn noise() -> Self {
        InterventionMode::Noise {
            scale: 1.0,
            norm_match: true,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InterventionMode::Clean => "clean",
            InterventionMode::ZeroLatent => "zero_latent",
            InterventionMode::Noise { .. } => "noise",
        }
    }
}

/// The vector injected for predicted coefficients `c` under `mode`.
pub fn apply_intervention(mode: &InterventionMode, c: &[f64], basis: &PcaBasis, rng: &mut Rng) -> Result<Vec<f64>> {
    match *mode {
        InterventionMode::Clean => basis.reconstruct(c),
        InterventionMode::ZeroLatent => Err(Error::InvalidArgument(
            "zero_latent decoding never produces latent content".into(),
        )),
        InterventionMode::Noise { scale, norm_match } => {
            crate::error::ensure_dim("intervention coefficients", basis.k(), c.len())?;
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::InvalidArgument(format!("noise scale {scale} must be positive")));
            }
            let mut noise: Vec<f64> = basis.eigenvalues()[..basis.k()]
                .iter()
                .map(|&lam| scale * lam.max(0.0).sqrt() * rng.normal())
                .collect();
            if norm_match {
                // P has orthonormal columns, so centered norms equal coefficient norms.
                let target = l2(&basis.components().matvec(c)?);
                let current = l2(&basis.components().matvec(&noise)?);
                if current == 0.0 {
                    return Err(Error::ZeroNorm("noise reconstruction"));
                }
                let s = target / current;
                for x in &mut noise {
                    *x *= s;
                }
            }
            basis.reconstruct(&noise)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis() -> PcaBasis {
        let mut rng = Rng::new(4);
        let samples: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..6).map(|j| (j + 1) as f64 * rng.normal()).collect())
            .collect();
        PcaBasis::fit_rank(&samples, 3).unwrap()
    }

    #[test]
    fn clean_is_reconstruction() {
        let b = basis();
        let c = vec![0.5, -1.0, 2.0];
        let v = apply_intervention(&InterventionMode::Clean, &c, &b, &mut Rng::new(0)).unwrap();
        assert_eq!(v, b.reconstruct(&c).unwrap());
    }

    #[test]
    fn noise_matches_centered_norm_and_is_reproducible() {
        let b = basis();
        let c = vec![0.5, -1.0, 2.0];
        let clean = b.reconstruct(&c).unwrap();
        let centered = |v: &[f64]| l2(&v.iter().zip(b.mean()).map(|(a, m)| a - m).collect::<Vec<_>>());
        let v = apply_intervention(&InterventionMode::noise(), &c, &b, &mut Rng::new(9)).unwrap();
        assert!((centered(&v) - centered(&clean)).abs() < 1e-9);
        assert!(b.off_subspace_norm(&v).unwrap() < 1e-8);
        let again = apply_intervention(&InterventionMode::noise(), &c, &b, &mut Rng::new(9)).unwrap();
        assert_eq!(v, again);
        assert_ne!(v, clean);
    }

    #[test]
    fn zero_latent_rejected() {
        let b = basis();
        assert!(apply_intervention(&InterventionMode::ZeroLatent, &[0.0; 3], &b, &mut Rng::new(0)).is_err());
    }
}
