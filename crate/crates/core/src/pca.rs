//! Empirical PCA subspace over latent target vectors.
//!
//! The basis is fitted once and then only queried: `project` maps a vector to
//! its coefficients `Pₖᵀ(v − μ)`, `reconstruct` maps coefficients back to
//! `Pₖc + μ`. Anything produced by `reconstruct` lies in the affine span of
//! the basis.
//!
//! Binary format (little-endian): magic `LLPB`, `u32` format version, `u64 d`,
//! `u64 k`, then `d` doubles of μ, `d` doubles of the eigenvalue spectrum
//! (descending), and `d·k` doubles of `Pₖ` in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{axpy, sym_eig, Mat};

const MAGIC: &[u8; 4] = b"LLPB";
const FORMAT_VERSION: u32 = 1;

/// Directions with eigenvalue below this fraction of the total variance are
/// never retained.
pub const DEGENERATE_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Vec<f64>,
    /// `d × k`, orthonormal columns.
    components: Mat,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

impl PcaBasis {
    /// Fits μ and the 1/N covariance, keeping the smallest k whose retained
    /// variance ratio reaches `variance_target`.
    pub fn fit(samples: &[Vec<f64>], variance_target: f64) -> Result<Self> {
        if !(variance_target > 0.0 && variance_target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "variance_target must be in (0, 1], got {variance_target}"
            )));
        }
        let spectrum = Spectrum::of(samples)?;
        let k = spectrum.rank_for(variance_target)?;
        spectrum.into_basis(k)
    }

    /// Fits with an explicit component count.
    pub fn fit_rank(samples: &[Vec<f64>], k: usize) -> Result<Self> {
        let spectrum = Spectrum::of(samples)?;
        let d = spectrum.mean.len();
        if k == 0 || k > d {
            return Err(Error::InvalidArgument(format!("k must be in 1..={d}, got {k}")));
        }
        spectrum.check_non_degenerate(k)?;
        spectrum.into_basis(k)
    }

    /// Assembles a basis from parts; `components` must have orthonormal columns.
    pub fn from_parts(mean: Vec<f64>, components: Mat, eigenvalues: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        ensure_dim("PcaBasis components rows", d, components.rows())?;
        ensure_dim("PcaBasis eigenvalues", d, eigenvalues.len())?;
        if components.cols() > d {
            return Err(Error::InvalidArgument("k exceeds d".into()));
        }
        let gram = components.transpose().matmul(&components)?;
        for r in 0..gram.rows() {
            for c in 0..gram.cols() {
                let want = if r == c { 1.0 } else { 0.0 };
                if (gram[(r, c)] - want).abs() > 1e-8 {
                    return Err(Error::InvalidArgument(
                        "basis components are not orthonormal".into(),
                    ));
                }
            }
        }
        if eigenvalues.iter().any(|&l| l < -1e-10 || !l.is_finite()) {
            return Err(Error::InvalidArgument("eigenvalues must be non-negative".into()));
        }
        let total_variance = eigenvalues.iter().sum();
        Ok(Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Mat {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// `Pₖᵀ(v − μ)`.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("PcaBasis::project", self.dim(), v.len())?;
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.matvec_t(&centered)
    }

    /// `Pₖc + μ`.
    pub fn reconstruct(&self, c: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("PcaBasis::reconstruct", self.k(), c.len())?;
        let mut out = self.components.matvec(c)?;
        axpy(1.0, &self.mean, &mut out);
        Ok(out)
    }

    /// Norm of the component of `v − μ` orthogonal to the retained subspace.
    pub fn off_subspace_norm(&self, v: &[f64]) -> Result<f64> {
        let c = self.project(v)?;
        let inside = self.components.matvec(&c)?;
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&inside)
            .map(|((a, m), p)| {
                let r = a - m - p;
                r * r
            })
            .sum::<f64>()
            .sqrt())
    }

    /// Relative reconstruction error in residual-ratio form:
    /// mean ‖v − v̂‖² over mean ‖v − μ‖².
    pub fn rel_mse(&self, samples: &[Vec<f64>]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("rel_mse of an empty sample list".into()));
        }
        let mut residual = 0.0;
        let mut energy = 0.0;
        for v in samples {
            let c = self.project(v)?;
            let v_hat = self.reconstruct(&c)?;
            residual += v.iter().zip(&v_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            energy += v.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>();
        }
        if energy <= 0.0 {
            return Err(Error::ZeroNorm("rel_mse centered energy"));
        }
        Ok(residual / energy)
    }

    /// Relative reconstruction error from the spectrum: `1 − Σ_{j≤k} λⱼ / Σ λⱼ`.
    pub fn spectral_rel_mse(&self) -> f64 {
        1.0 - self.eigenvalues[..self.k()].iter().sum::<f64>() / self.total_variance
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.k() as u64).to_le_bytes())?;
        for v in self.mean.iter().chain(&self.eigenvalues) {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in 0..self.k() {
            for r in 0..self.dim() {
                w.write_all(&self.components[(r, c)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::FileFormat("not a PCA basis file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::FileFormat(format!("unsupported basis version {version}")));
        }
        let d = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        if d == 0 || k == 0 || k > d {
            return Err(Error::FileFormat(format!("bad basis header d={d} k={k}")));
        }
        let mean = read_f64s(&mut r, d)?;
        let eigenvalues = read_f64s(&mut r, d)?;
        let col_major = read_f64s(&mut r, d * k)?;
        let components = Mat::from_fn(d, k, |row, col| col_major[col * d + row]);
        Self::from_parts(mean, components, eigenvalues)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Mean, covariance spectrum and eigenvectors of a sample set.
struct Spectrum {
    mean: Vec<f64>,
    values: Vec<f64>,
    vectors: Mat,
    total: f64,
}

impl Spectrum {
    fn of(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA fit needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let d = samples[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("PCA samples are empty vectors".into()));
        }
        for s in samples {
            ensure_dim("PCA sample", d, s.len())?;
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("PCA sample"));
            }
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            axpy(1.0, s, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n);

        let mut cov = Mat::zeros(d, d);
        let mut centered = vec![0.0; d];
        for s in samples {
            for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
                *c = v - m;
            }
            for r in 0..d {
                let cr = centered[r];
                if cr != 0.0 {
                    axpy(cr, &centered[r..], &mut cov.row_mut(r)[r..]);
                }
            }
        }
        for r in 0..d {
            for c in r..d {
                let v = cov[(r, c)] / n;
                cov[(r, c)] = v;
                cov[(c, r)] = v;
            }
        }
        let eig = sym_eig(&cov)?;
        let total: f64 = eig.values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateFit(
                "samples have zero total variance".into(),
            ));
        }
        Ok(Self {
            mean,
            values: eig.values,
            vectors: eig.vectors,
            total,
        })
    }

    fn rank_for(&self, variance_target: f64) -> Result<usize> {
        let mut cumulative = 0.0;
        for (j, &l) in self.values.iter().enumerate() {
            cumulative += l;
            if cumulative / self.total >= variance_target - 1e-12 {
                let k = j + 1;
                self.check_non_degenerate(k)?;
                return Ok(k);
            }
        }
        Err(Error::DegenerateFit(format!(
            "variance target {variance_target} not reachable"
        )))
    }

    fn check_non_degenerate(&self, k: usize) -> Result<()> {
        let smallest = self.values[k - 1];
        if smallest < DEGENERATE_RATIO * self.total {
            return Err(Error::DegenerateFit(format!(
                "component {k} has eigenvalue {smallest:e}, below {DEGENERATE_RATIO:e} of total variance"
            )));
        }
        Ok(())
    }

    fn into_basis(self, k: usize) -> Result<PcaBasis> {
        let d = self.mean.len();
        let components = Mat::from_fn(d, k, |r, c| self.vectors[(r, c)]);
        Ok(PcaBasis {
            mean: self.mean,
            components,
            eigenvalues: self.values,
            total_variance: self.total,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
