//! Closed-form optimal transport between Gaussians and its use for
//! calibrating stored class memories after an encoder update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianStat;
use crate::spd::{self, spd_inv_sqrt, spd_sqrt};

/// Affine map `x ↦ linear·x + offset` with a symmetric positive-definite
/// linear part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportMap {
    linear: DMatrix<f64>,
    offset: DVector<f64>,
}

impl TransportMap {
    pub fn new(linear: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let d = offset.len();
        if linear.nrows() != d || linear.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: linear.nrows(),
            });
        }
        let scale = linear.amax().max(1.0);
        let asym = spd::max_asymmetry(&linear);
        if asym > spd::SYMMETRY_TOL * scale || !asym.is_finite() {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self {
            linear: spd::symmetrize(&linear),
            offset,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            linear: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
        }
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }
}

fn same_dim(a: &GaussianStat, b: &GaussianStat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// `(A^{1/2} B A^{1/2})^{1/2}`.
fn bures_cross(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a_half = spd_sqrt(a)?;
    let inner = spd::symmetrize(&(&a_half * b * &a_half));
    spd_sqrt(&inner)
}

/// Common scale used to condition both covariances before the eigen floor
/// is applied. The transport map is invariant under joint rescaling, and
/// the Bures term is homogeneous of degree one.
fn joint_scale(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a.nrows() as f64;
    (a.trace() + b.trace()) / (2.0 * d)
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_distance_sq(a: &GaussianStat, b: &GaussianStat) -> Result<f64> {
    same_dim(a, b)?;
    let mean_term = (a.mean() - b.mean()).norm_squared();
    let s = joint_scale(a.covariance(), b.covariance());
    if !(s.is_finite() && s > 0.0) {
        return Ok(mean_term);
    }
    let (ca, cb) = (a.covariance() / s, b.covariance() / s);
    let cross = bures_cross(&ca, &cb)?;
    let trace_term = (ca.trace() + cb.trace() - 2.0 * cross.trace()).max(0.0) * s;
    Ok(mean_term + trace_term)
}

/// Affine optimal-transport map pushing `N(pre)` onto `N(post)`.
pub fn ot_map(pre: &GaussianStat, post: &GaussianStat) -> Result<TransportMap> {
    same_dim(pre, post)?;
    let d = pre.dim();
    let s = pre.covariance().trace() / d as f64;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::DegenerateSource);
    }
    let (a, b) = (pre.covariance() / s, post.covariance() / s);
    let a_inv_half = spd_inv_sqrt(&a)?;
    let cross = bures_cross(&a, &b)?;
    let linear = spd::symmetrize(&(&a_inv_half * cross * &a_inv_half));
    if linear.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSource);
    }
    let offset = post.mean() - &linear * pre.mean();
    Ok(TransportMap { linear, offset })
}

/// `N(Tμ + b, TΣTᵀ)`, with the covariance re-symmetrized.
pub fn apply_map_to_stat(map: &TransportMap, stat: &GaussianStat) -> Result<GaussianStat> {
    if map.dim() != stat.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            found: stat.dim(),
        });
    }
    let t = &map.linear;
    let mean = t * stat.mean() + &map.offset;
    let cov = spd::symmetrize(&(t * stat.covariance() * t.transpose()));
    GaussianStat::new(mean, cov, stat.count())
}

/// Applies `map` to every stored class. Fails as a whole if any class fails.
pub fn calibrate_memory(
    map: &TransportMap,
    memory: &BTreeMap<u32, GaussianStat>,
) -> Result<BTreeMap<u32, GaussianStat>> {
    memory
        .iter()
        .map(|(&class, stat)| Ok((class, apply_map_to_stat(map, stat)?)))
        .collect()
}

/// Per-class maps with their parameters averaged elementwise.
pub fn ot_map_per_class_averaged(
    pre_stats: &[GaussianStat],
    post_stats: &[GaussianStat],
) -> Result<TransportMap> {
    if pre_stats.len() != post_stats.len() {
        return Err(Error::LengthMismatch {
            left: pre_stats.len(),
            right: post_stats.len(),
        });
    }
    let Some(first) = pre_stats.first() else {
        return Err(Error::EmptyStats);
    };
    let d = first.dim();
    let mut linear = DMatrix::zeros(d, d);
    let mut offset = DVector::zeros(d);
    for (pre, post) in pre_stats.iter().zip(post_stats) {
        if pre.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: pre.dim(),
            });
        }
        let m = ot_map(pre, post)?;
        linear += m.linear;
        offset += m.offset;
    }
    let k = pre_stats.len() as f64;
    Ok(TransportMap {
        linear: spd::symmetrize(&(linear / k)),
        offset: offset / k,
    })
}
