//! Linear vision-encoder stand-in with unit-norm outputs, the symmetric
//! contrastive adaptation loss against frozen class anchors, and per-class
//! statistic extraction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, estimate_gaussian, FeatureBatch, GaussianStat};
use crate::optim::{Optimizer, Schedule};
use crate::random::{orthonormal_rows, standard_normal_matrix, stream_rng};

const INIT_STREAM: u64 = 0x656e_635f;
const ANCHOR_STREAM: u64 = 0x616e_6368;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    weights: DMatrix<f64>,
    version: u64,
    seed: Option<u64>,
}

impl Encoder {
    /// Wraps explicit weights (`d_out × d_in`) at version 0.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        gaussian::check_finite(&weights)?;
        Ok(Self {
            weights,
            version: 0,
            seed: None,
        })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json(crate::persist::ENCODER, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json(crate::persist::ENCODER, text)
    }
}

/// Random encoder with orthonormal rows.
pub fn init_encoder(d_in: usize, d_out: usize, seed: u64) -> Result<Encoder> {
    if d_out == 0 || d_in < d_out {
        return Err(Error::InvalidDims { d_in, d_out });
    }
    let mut rng = stream_rng(seed, INIT_STREAM, 0);
    Ok(Encoder {
        weights: orthonormal_rows(d_out, d_in, &mut rng),
        version: 0,
        seed: Some(seed),
    })
}

struct Projection {
    out: DMatrix<f64>,
    norms: Vec<f64>,
}

fn project(enc: &Encoder, inputs: &DMatrix<f64>) -> Result<Projection> {
    if inputs.ncols() != enc.d_in() {
        return Err(Error::DimensionMismatch {
            expected: enc.d_in(),
            found: inputs.ncols(),
        });
    }
    gaussian::check_finite(inputs)?;
    let mut out = inputs * enc.weights.transpose();
    let mut norms = Vec::with_capacity(out.nrows());
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = row.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateInput(i));
        }
        row /= n;
        norms.push(n);
    }
    Ok(Projection { out, norms })
}

/// `W·x / ‖W·x‖` for every input row.
pub fn encode(enc: &Encoder, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(project(enc, inputs)?.out)
}

/// Frozen unit vectors standing in for hard-prompt text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: BTreeMap<u32, DVector<f64>>,
}

impl AnchorSet {
    /// One Gaussian-direction anchor per class. Each anchor depends only on
    /// `(seed, class)`, not on which other classes are requested.
    pub fn random(classes: &[u32], dim: usize, seed: u64) -> Self {
        let anchors = classes
            .iter()
            .map(|&c| {
                let mut rng = stream_rng(seed, ANCHOR_STREAM, u64::from(c));
                let v = standard_normal_matrix(dim, 1, &mut rng).column(0).into_owned();
                (c, v.normalize())
            })
            .collect();
        Self { anchors }
    }

    /// Anchors from explicit vectors; each is normalized.
    pub fn from_vectors(anchors: BTreeMap<u32, DVector<f64>>) -> Self {
        Self {
            anchors: anchors.into_iter().map(|(c, v)| (c, v.normalize())).collect(),
        }
    }

    pub fn get(&self, class: u32) -> Option<&DVector<f64>> {
        self.anchors.get(&class)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &DVector<f64>)> {
        self.anchors.iter()
    }
}

/// Symmetric image↔anchor contrastive loss over a batch and its gradient
/// with respect to the encoder weights.
pub fn contrastive_loss_and_grad(
    enc: &Encoder,
    inputs: &DMatrix<f64>,
    labels: &[u32],
    anchors: &AnchorSet,
    tau: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let b = inputs.nrows();
    if b < 2 {
        return Err(Error::ContrastiveUndefined(b));
    }
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            found: labels.len(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    let d = enc.d_out();
    let mut text = DMatrix::zeros(b, d);
    for (i, l) in labels.iter().enumerate() {
        let a = anchors.get(*l).ok_or(Error::MissingAnchor(*l))?;
        text.row_mut(i).copy_from(&a.transpose());
    }
    let proj = project(enc, inputs)?;
    let z = &proj.out;

    // sim[i, j] = ⟨z_i, t_j⟩ / τ.
    let sim = z * text.transpose() / tau;
    let mut row_soft = DMatrix::zeros(b, b);
    let mut col_soft = DMatrix::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let row = sim.row(i);
        let max = row.max();
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + denom.ln() - sim[(i, i)];
        for j in 0..b {
            row_soft[(i, j)] = (sim[(i, j)] - max).exp() / denom;
        }
    }
    for j in 0..b {
        let col = sim.column(j);
        let max = col.max();
        let denom: f64 = col.iter().map(|v| (v - max).exp()).sum();
        loss += max + denom.ln() - sim[(j, j)];
        for i in 0..b {
            col_soft[(i, j)] = (sim[(i, j)] - max).exp() / denom;
        }
    }
    let bf = b as f64;
    loss /= 2.0 * bf;

    let mut dsim = row_soft + col_soft;
    for i in 0..b {
        dsim[(i, i)] -= 2.0;
    }
    dsim /= 2.0 * bf;
    let dz = dsim * &text / tau;

    // Back through the row normalization z = u / ‖u‖.
    let mut du = dz;
    for (i, mut row) in du.row_iter_mut().enumerate() {
        let zi = z.row(i);
        let radial = zi.dot(&row);
        row -= zi * radial;
        row /= proj.norms[i];
    }
    Ok((loss, du.transpose() * inputs))
}

/// Indices of one contrastive mini-batch: all rows when the task is
/// smaller than the batch, otherwise a uniform draw without replacement.
pub(crate) fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    index::sample(rng, n, batch_size.min(n)).into_vec()
}

/// Hyperparameters of encoder adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderTraining {
    pub schedule: Schedule,
    pub tau: f64,
}

/// Gradient descent on the contrastive loss over one task's raw inputs.
/// Anchors stay fixed; the returned encoder's version is one higher.
pub fn adapt_encoder<R: Rng + ?Sized>(
    enc: &Encoder,
    task_data: &FeatureBatch,
    anchors: &AnchorSet,
    training: &EncoderTraining,
    rng: &mut R,
) -> Result<Encoder> {
    training.schedule.validate()?;
    if task_data.is_empty() {
        return Err(Error::EmptyTask);
    }
    if task_data.len() < 2 {
        return Err(Error::ContrastiveUndefined(task_data.len()));
    }
    let mut out = enc.clone();
    let mut opt = Optimizer::new(
        training.schedule.optimizer,
        training.schedule.learning_rate,
        out.weights.len(),
    );
    for _ in 0..training.schedule.steps {
        let idx = batch_indices(task_data.len(), training.schedule.batch_size, rng);
        let batch = task_data.select(&idx);
        let (_, grad) =
            contrastive_loss_and_grad(&out, &batch.features, &batch.labels, anchors, training.tau)?;
        opt.step(out.weights.as_mut_slice(), grad.as_slice());
    }
    out.version += 1;
    Ok(out)
}

/// Encodes `data` and fits one shrunk Gaussian per label.
pub fn extract_class_stats(enc: &Encoder, data: &FeatureBatch) -> Result<BTreeMap<u32, GaussianStat>> {
    if data.is_empty() {
        return Err(Error::EmptyTask);
    }
    let features = encode(enc, &data.features)?;
    stats_by_class(&features, &data.labels)
}

/// Groups rows by label and fits one shrunk Gaussian per class.
pub fn stats_by_class(features: &DMatrix<f64>, labels: &[u32]) -> Result<BTreeMap<u32, GaussianStat>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(c, idx)| {
            if idx.is_empty() {
                return Err(Error::MissingClassSamples(c));
            }
            Ok((c, estimate_gaussian(&features.select_rows(idx.iter()))?))
        })
        .collect()
}
