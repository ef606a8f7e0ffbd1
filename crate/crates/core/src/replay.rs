//! Per-class Gaussian statistics of frozen `[CLS]` features and pseudo-feature
//! sampling for old-class calibration.
//!
//! Sums run in input order. Covariance is the population covariance (divided
//! by the count). Sampling draws from `N(mean, Σ + ε·s·I)` with
//! `s = trace(Σ)/d`, falling back to `s = |mean|²/d` (or 1 for a zero mean)
//! when the covariance is zero so that the shrinkage never vanishes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::rng::{self, EngineRng};
use crate::{Error, Result};

pub const DEFAULT_SHRINKAGE: f64 = 1e-4;
/// Floor applied to the shrinkage factor.
pub const MIN_SHRINKAGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub class_id: u32,
    pub mean: Vec<f64>,
    pub covariance: Matrix,
    pub count: usize,
}

pub fn record_statistics<F: AsRef<[f64]>>(class_id: u32, features: &[F]) -> Result<ClassStatistics> {
    let first = features.first().ok_or(Error::EmptyClass(class_id))?;
    let d = first.as_ref().len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        let f = f.as_ref();
        if f.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: f.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut covariance = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for f in features {
        for ((c, x), m) in centred.iter_mut().zip(f.as_ref()).zip(&mean) {
            *c = x - m;
        }
        covariance.add_outer(1.0 / n, &centred, &centred);
    }
    Ok(ClassStatistics {
        class_id,
        mean,
        covariance,
        count: features.len(),
    })
}

/// A Cholesky factor of the regularized covariance, reusable across draws.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    class_id: u32,
    mean: Vec<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    /// `diagonal` keeps only the variances, for large `d`.
    pub fn new(stats: &ClassStatistics, epsilon: f64, diagonal: bool) -> Result<Self> {
        let d = stats.mean.len();
        let mut cov = DMatrix::from_row_slice(d, d, stats.covariance.as_slice());
        if diagonal {
            cov = DMatrix::from_diagonal(&cov.diagonal());
        }
        let trace = cov.trace();
        let scale = if trace > 0.0 {
            trace / d as f64
        } else {
            let m2 = dot(&stats.mean, &stats.mean) / d as f64;
            if m2 > 0.0 {
                m2
            } else {
                1.0
            }
        };
        let jitter = epsilon.max(MIN_SHRINKAGE) * scale;
        for i in 0..d {
            cov[(i, i)] += jitter;
        }
        let chol = cov.cholesky().ok_or(Error::DegenerateCovariance(stats.class_id))?;
        Ok(Self {
            class_id: stats.class_id,
            mean: stats.mean.clone(),
            factor: chol.l(),
        })
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn sample(&self, rng: &mut EngineRng) -> Vec<f64> {
        let d = self.mean.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng::standard_normal(rng)));
        let x = &self.factor * z;
        self.mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }
}

pub fn sample_pseudo_features(stats: &ClassStatistics, count: usize, epsilon: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let sampler = GaussianSampler::new(stats, epsilon, false)?;
    let mut r = rng::rng_from_seed(seed);
    Ok((0..count).map(|_| sampler.sample(&mut r)).collect())
}
