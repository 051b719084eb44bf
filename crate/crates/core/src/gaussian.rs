//! Per-class Gaussian feature statistics: estimation with Ledoit–Wolf
//! shrinkage, averaging, and seeded sampling for generative replay.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::{self, EIG_FLOOR};

/// Jitter added to the diagonal when a covariance fails to factorize.
pub const SAMPLING_JITTER: f64 = 1e-8;

/// Mean, covariance and sample count of one class's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStat {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    count: usize,
}

impl GaussianStat {
    /// Builds a statistic, checking shapes and symmetry. The covariance is
    /// symmetrized so the stored value is exactly symmetric.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        if covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariance.ncols(),
            });
        }
        let scale = covariance.amax().max(1.0);
        let asym = spd::max_asymmetry(&covariance);
        if asym > spd::SYMMETRY_TOL * scale || !asym.is_finite() {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self {
            mean,
            covariance: spd::symmetrize(&covariance),
            count,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Labeled feature rows. `features` is n×d with one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    pub features: DMatrix<f64>,
    pub labels: Vec<u32>,
    pub task_ids: Vec<u32>,
}

impl FeatureBatch {
    pub fn new(features: DMatrix<f64>, labels: Vec<u32>, task_ids: Vec<u32>) -> Result<Self> {
        let n = features.nrows();
        for len in [labels.len(), task_ids.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        check_finite(&features)?;
        Ok(Self {
            features,
            labels,
            task_ids,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: DMatrix::zeros(0, dim),
            labels: Vec::new(),
            task_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Sorted, deduplicated class ids.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Rows whose label is `class`, in their original order.
    pub fn rows_of(&self, class: u32) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.features.select_rows(idx.iter())
    }

    /// Subset of rows by index.
    pub fn select(&self, idx: &[usize]) -> FeatureBatch {
        FeatureBatch {
            features: self.features.select_rows(idx.iter()),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            task_ids: idx.iter().map(|&i| self.task_ids[i]).collect(),
        }
    }

    /// Row-wise concatenation. Both batches must share the feature dimension.
    pub fn concat(&self, other: &FeatureBatch) -> Result<FeatureBatch> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let (n1, n2) = (self.len(), other.len());
        let d = self.dim();
        let features = DMatrix::from_fn(n1 + n2, d, |i, j| {
            if i < n1 {
                self.features[(i, j)]
            } else {
                other.features[(i - n1, j)]
            }
        });
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut task_ids = self.task_ids.clone();
        task_ids.extend_from_slice(&other.task_ids);
        Ok(FeatureBatch {
            features,
            labels,
            task_ids,
        })
    }
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::InvalidFeature { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn validate(features: &DMatrix<f64>) -> Result<()> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::NoSamples);
    }
    check_finite(features)
}

/// Sample mean and centered rows.
fn center(features: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.nrows() as f64;
    let mean = features.row_sum().transpose() / n;
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    (mean, centered)
}

/// Shrinkage intensity and scatter pieces shared by the estimator.
struct Shrinkage {
    weight: f64,
    scatter: DMatrix<f64>,
    target_variance: f64,
}

fn shrinkage(centered: &DMatrix<f64>) -> Shrinkage {
    let (n, d) = centered.shape();
    let nf = n as f64;
    let df = d as f64;
    let scatter = centered.transpose() * centered / nf;
    let mu = scatter.trace() / df;

    // Dispersion of S around its scaled-identity target.
    let mut delta = scatter.norm_squared() - 2.0 * mu * scatter.trace() + df * mu * mu;
    delta /= df;

    // Variance of the per-sample outer products around S.
    let fourth: f64 = centered.row_iter().map(|r| r.norm_squared().powi(2)).sum();
    let beta = ((fourth / nf - scatter.norm_squared()) / (df * nf)).max(0.0);

    let weight = if delta <= 0.0 {
        1.0
    } else {
        (beta.min(delta) / delta).clamp(0.0, 1.0)
    };
    Shrinkage {
        weight,
        scatter,
        target_variance: mu.max(EIG_FLOOR),
    }
}

/// Ledoit–Wolf shrinkage intensity toward `(trace(S)/d)·I`, in `[0, 1]`.
pub fn ledoit_wolf_weight(features: &DMatrix<f64>) -> Result<f64> {
    validate(features)?;
    let (_, centered) = center(features);
    Ok(shrinkage(&centered).weight)
}

/// Sample mean and Ledoit–Wolf shrunk covariance (1/n normalization).
///
/// The result is strictly positive definite: if the shrunk matrix still has
/// an eigenvalue below [`EIG_FLOOR`] (zero shrinkage on rank-deficient
/// scatter), the diagonal is lifted until the smallest eigenvalue reaches it.
pub fn estimate_gaussian(features: &DMatrix<f64>) -> Result<GaussianStat> {
    validate(features)?;
    let (mean, centered) = center(features);
    let Shrinkage {
        weight,
        scatter,
        target_variance,
    } = shrinkage(&centered);
    let d = features.ncols();
    let mut cov = scatter * (1.0 - weight);
    for i in 0..d {
        cov[(i, i)] += weight * target_variance;
    }
    let cov = spd::symmetrize(&cov);
    let lowest = spd::min_eigenvalue(&cov);
    let cov = if lowest < EIG_FLOOR {
        cov + DMatrix::identity(d, d) * (EIG_FLOOR - lowest)
    } else {
        cov
    };
    GaussianStat::new(mean, cov, features.nrows())
}

/// Draws `n` i.i.d. rows from `N(mean, covariance)` via a Cholesky factor.
pub fn sample_gaussian<R: Rng + ?Sized>(
    stat: &GaussianStat,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = stat.dim();
    let factor = match Cholesky::new(stat.covariance.clone()) {
        Some(c) => c,
        None => {
            let jittered = &stat.covariance + DMatrix::identity(d, d) * SAMPLING_JITTER;
            Cholesky::new(jittered).ok_or(Error::DegenerateCovariance)?
        }
    };
    let l = factor.l();
    let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = z * l.transpose();
    for mut row in out.row_iter_mut() {
        row += stat.mean.transpose();
    }
    Ok(out)
}

/// Arithmetic mean of means and of covariances; counts are summed.
pub fn average_stats<'a, I>(stats: I) -> Result<GaussianStat>
where
    I: IntoIterator<Item = &'a GaussianStat>,
{
    let mut iter = stats.into_iter();
    let first = iter.next().ok_or(Error::EmptyStats)?;
    let d = first.dim();
    let mut mean = first.mean.clone();
    let mut cov = first.covariance.clone();
    let mut count = first.count;
    let mut k = 1usize;
    for s in iter {
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: s.dim(),
            });
        }
        mean += &s.mean;
        cov += &s.covariance;
        count += s.count;
        k += 1;
    }
    let kf = k as f64;
    GaussianStat::new(mean / kf, cov / kf, count)
}
