//! Diagonal Gaussians and reproducible noise streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Real;

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("standard deviation {value} at index {index} is not positive and finite")]
    InvalidStd { index: usize, value: f64 },
    #[error("dimension must be at least 1")]
    ZeroDimension,
}

fn check_dim(expected: usize, got: usize) -> Result<(), DistError> {
    if expected == got {
        Ok(())
    } else {
        Err(DistError::DimensionMismatch { expected, got })
    }
}

/// Product of independent normals, parametrized by per-dimension standard
/// deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Real> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self, DistError> {
        if mean.is_empty() {
            return Err(DistError::ZeroDimension);
        }
        check_dim(mean.len(), std.len())?;
        for (index, s) in std.iter().enumerate() {
            let value = s.value();
            if !(value > 0.0 && value.is_finite()) {
                return Err(DistError::InvalidStd { index, value });
            }
        }
        Ok(Self { mean, std })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self, DistError> {
        if dim == 0 {
            return Err(DistError::ZeroDimension);
        }
        Ok(Self {
            mean: vec![T::cst(0.0); dim],
            std: vec![T::cst(1.0); dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    /// `Σ_i −½ln(2π) − ln σ_i − (x_i − μ_i)² / (2σ_i²)`
    pub fn logpdf(&self, point: &[T]) -> Result<T, DistError> {
        check_dim(self.dim(), point.len())?;
        let terms: Vec<T> = point
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&mu, &sigma))| {
                let r = (x - mu) / sigma;
                T::cst(-HALF_LN_2PI) - sigma.ln() - r.square() * T::cst(0.5)
            })
            .collect();
        Ok(T::sum(&terms))
    }

    /// `μ + σ ⊙ ε`
    pub fn reparam_sample(&self, eps: &[f64]) -> Result<Vec<T>, DistError> {
        check_dim(self.dim(), eps.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(eps)
            .map(|((&mu, &sigma), &e)| mu + sigma * T::cst(e))
            .collect())
    }

    /// Plain-number copy of the parameters.
    pub fn detach(&self) -> DiagGaussian<f64> {
        DiagGaussian {
            mean: self.mean.iter().map(|v| v.value()).collect(),
            std: self.std.iter().map(|v| v.value()).collect(),
        }
    }
}

/// `N(0, I)` over `dim` dimensions.
pub fn standard_normal(dim: usize) -> Result<DiagGaussian<f64>, DistError> {
    DiagGaussian::standard(dim)
}

/// `KL(a ‖ b) = Σ ln(σ_b/σ_a) + (σ_a² + (μ_a − μ_b)²) / (2σ_b²) − ½`
pub fn kl_closed_form(a: &DiagGaussian<f64>, b: &DiagGaussian<f64>) -> Result<f64, DistError> {
    check_dim(a.dim(), b.dim())?;
    Ok((0..a.dim())
        .map(|i| {
            let (ma, sa, mb, sb) = (a.mean[i], a.std[i], b.mean[i], b.std[i]);
            (sb / sa).ln() + (sa * sa + (ma - mb).powi(2)) / (2.0 * sb * sb) - 0.5
        })
        .sum())
}

/// Standard-normal noise tagged with the stream it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps: Vec<f64>,
    pub seed: u64,
    pub index: u64,
}

impl NoiseDraw {
    pub fn zeros(dim: usize) -> Self {
        Self {
            eps: vec![0.0; dim],
            seed: 0,
            index: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.eps.len()
    }

    /// Consecutive blocks of noise from the stream keyed by `(seed, index)`.
    ///
    /// The stream depends only on the key, so sample `k` of an estimate is
    /// the same whatever order (or thread) it is computed in.
    pub fn blocks(seed: u64, index: u64, dims: &[usize]) -> Vec<NoiseDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        dims.iter()
            .map(|&d| NoiseDraw {
                eps: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
                seed,
                index,
            })
            .collect()
    }
}

/// Seed for step `step` of a run seeded with `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(step.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
