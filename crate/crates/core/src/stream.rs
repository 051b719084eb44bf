//! Task streams: synthetic generation, the binary feature-file format and
//! manifest-driven import/export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::FeatureBatch;
use crate::random::{orthonormal_rows, standard_normal_matrix, stream_rng};

const CENTER_STREAM: u64 = 0x6365_6e74;
const SAMPLE_STREAM: u64 = 0x7361_6d70;
const MIXING_STREAM: u64 = 0x6d69_786d;

/// Parameters of a synthetic class-incremental stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    /// Typical distance between two latent class centers.
    pub class_separation: f64,
    /// Standard deviation of isotropic within-class noise.
    pub within_class_scale: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Tasks after the first reuse the first task's class generators under
    /// fresh class ids.
    pub drift_diagnostic: bool,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            num_tasks: 10,
            classes_per_task: 5,
            input_dim: 32,
            feature_dim: 16,
            class_separation: 6.0,
            within_class_scale: 1.0,
            train_per_class: 100,
            eval_per_class: 100,
            drift_diagnostic: false,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_tasks == 0 {
            return fail("num_tasks must be at least 1");
        }
        if self.classes_per_task == 0 {
            return fail("classes_per_task must be at least 1");
        }
        if self.feature_dim == 0 || self.input_dim < self.feature_dim {
            return fail("need input_dim >= feature_dim >= 1");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return fail("class_separation must be positive");
        }
        if !(self.within_class_scale > 0.0 && self.within_class_scale.is_finite()) {
            return fail("within_class_scale must be positive");
        }
        if self.train_per_class == 0 || self.eval_per_class == 0 {
            return fail("train and eval sample counts must be positive");
        }
        if (self.num_tasks * self.classes_per_task) as u64 > i32::MAX as u64 {
            return fail("too many classes");
        }
        Ok(())
    }
}

/// One task's classes with disjoint train and eval splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: u32,
    pub classes: Vec<u32>,
    pub train: FeatureBatch,
    pub eval: FeatureBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub input_dim: usize,
    /// Output dimension for the encoder that consumes this stream.
    pub feature_dim: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Checks class disjointness across tasks and label/task consistency.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
        for task in &self.tasks {
            for &c in &task.classes {
                if let Some(&t) = owner.get(&c) {
                    return Err(Error::NotClassIncremental { class: c, task: t });
                }
                owner.insert(c, task.id);
            }
        }
        for task in &self.tasks {
            for batch in [&task.train, &task.eval] {
                if batch.dim() != self.input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.input_dim,
                        found: batch.dim(),
                    });
                }
                for (&l, &t) in batch.labels.iter().zip(&batch.task_ids) {
                    match owner.get(&l) {
                        Some(&o) if o == task.id && t == task.id => {}
                        Some(&o) => return Err(Error::NotClassIncremental { class: l, task: o }),
                        None => return Err(Error::UnknownLabel(l)),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Synthetic stream with one isotropic Gaussian generator per class.
///
/// Generators live in a latent space of dimension `feature_dim` that is
/// embedded in the input space by a fixed random isometry, so inputs span a
/// `feature_dim`-dimensional subspace.
///
/// Values are rounded to `f32` precision so that a stream written to the
/// feature-file format reads back bit-for-bit.
pub fn generate_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let d = spec.input_dim;
    let latent = spec.feature_dim;
    let mixing = orthonormal_rows(latent, d, &mut stream_rng(spec.seed, MIXING_STREAM, 0));
    let center_scale = spec.class_separation / (2.0 * latent as f64).sqrt();
    let center_of = |generator: u64| {
        let mut rng = stream_rng(spec.seed, CENTER_STREAM, generator);
        standard_normal_matrix(1, latent, &mut rng) * center_scale
    };

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for k in 0..spec.num_tasks {
        let classes: Vec<u32> = (0..spec.classes_per_task)
            .map(|j| (k * spec.classes_per_task + j) as u32)
            .collect();
        let mut splits = [Vec::new(), Vec::new()];
        let mut labels = [Vec::new(), Vec::new()];
        for (j, &c) in classes.iter().enumerate() {
            let generator = if spec.drift_diagnostic { j as u64 } else { u64::from(c) };
            let center = center_of(generator);
            for (split, count) in [spec.train_per_class, spec.eval_per_class].into_iter().enumerate() {
                let mut rng = stream_rng(spec.seed, SAMPLE_STREAM, u64::from(c) * 2 + split as u64);
                let mut points = standard_normal_matrix(count, latent, &mut rng) * spec.within_class_scale;
                for mut row in points.row_iter_mut() {
                    row += &center;
                }
                let points = points * &mixing;
                for row in points.row_iter() {
                    splits[split].extend(row.iter().map(|&v| f32_exact(v)));
                }
                labels[split].extend(std::iter::repeat_n(c, count));
            }
        }
        let id = k as u32;
        let make = |split: usize| {
            let n = labels[split].len();
            FeatureBatch::new(
                DMatrix::from_row_slice(n, d, &splits[split]),
                labels[split].clone(),
                vec![id; n],
            )
        };
        tasks.push(Task {
            id,
            classes,
            train: make(0)?,
            eval: make(1)?,
        });
    }
    Ok(TaskStream {
        input_dim: d,
        feature_dim: spec.feature_dim,
        tasks,
    })
}

/// Twelve magic bytes followed by a little-endian `u32` version.
pub const FEATURE_MAGIC: &[u8; 12] = b"DMC-FEATURES";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

/// Serializes rows as `f32` and labels as `i32`, little-endian.
pub fn encode_feature_file(features: &DMatrix<f64>, labels: &[u32]) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let (n32, d32) = match (u32::try_from(n), u32::try_from(d)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::InvalidSpec("feature table too large".into())),
    };
    let mut out = Vec::with_capacity((HEADER_LEN as usize) + 8 + 4 * n * (d + 1));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&(features[(i, j)] as f32).to_le_bytes());
        }
    }
    for &l in labels {
        let l = i32::try_from(l).map_err(|_| Error::UnknownLabel(l))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

/// Parsed feature file. Labels keep their signed on-disk value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub features: DMatrix<f64>,
    pub labels: Vec<i32>,
}

pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<FeatureTable> {
    let found = bytes.len() as u64;
    if found < HEADER_LEN + 8 {
        if found >= 12 && &bytes[..12] != FEATURE_MAGIC {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: "bad magic".into(),
            });
        }
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN + 8,
            found,
        });
    }
    if &bytes[..12] != FEATURE_MAGIC {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "bad magic".into(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(12);
    if version != FEATURE_VERSION {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let n = word(16) as usize;
    let d = word(20) as usize;
    let expected = HEADER_LEN + 8 + 4 * (n as u64) * (d as u64 + 1);
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("{} trailing bytes after {expected}", found - expected),
        });
    }
    let body = &bytes[(HEADER_LEN as usize + 8)..];
    let float = |k: usize| f32::from_le_bytes(body[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
    let features = DMatrix::from_fn(n, d, |i, j| float(i * d + j));
    let label_base = 4 * n * d;
    let labels = (0..n)
        .map(|i| {
            let at = label_base + 4 * i;
            i32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"))
        })
        .collect();
    Ok(FeatureTable { features, labels })
}

pub fn write_feature_file(path: &Path, features: &DMatrix<f64>, labels: &[u32]) -> Result<()> {
    let bytes = encode_feature_file(features, labels)?;
    crate::persist::write_atomic(path, &bytes)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes, path)
}

/// What the rows of a feature file hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    /// Encoder outputs; rows are expected to be unit norm.
    #[default]
    Features,
    /// Raw encoder inputs, as written by the synthetic generator.
    Inputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: u32,
    pub classes: Vec<u32>,
}

/// Task table and split file names for an on-disk stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default)]
    pub kind: RowKind,
    /// Encoder output dimension; defaults to the row dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    pub train: String,
    pub eval: String,
    #[serde(rename = "task")]
    pub tasks: Vec<ManifestTask>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Tolerance on row norms before imported features are renormalized.
pub const UNIT_NORM_TOL: f64 = 1e-3;

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Manifest {
            path: path.into(),
            reason: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Manifest {
                path: path.into(),
                reason: format!("unsupported version {}", m.version),
            });
        }
        m.class_owner()?;
        Ok(m)
    }

    /// Class → task map, rejecting classes listed under two tasks.
    pub fn class_owner(&self) -> Result<BTreeMap<u32, u32>> {
        let mut owner = BTreeMap::new();
        let mut seen_tasks = BTreeSet::new();
        for t in &self.tasks {
            if !seen_tasks.insert(t.id) {
                return Err(Error::InvalidSpec(format!("task {} listed twice", t.id)));
            }
            for &c in &t.classes {
                if let Some(prev) = owner.insert(c, t.id) {
                    return Err(Error::NotClassIncremental { class: c, task: prev });
                }
            }
        }
        Ok(owner)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

fn renormalize_rows(features: &mut DMatrix<f64>, path: &Path) -> Result<()> {
    let mut fixed = 0usize;
    for (i, mut row) in features.row_iter_mut().enumerate() {
        let n = row.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateInput(i));
        }
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            row /= n;
            fixed += 1;
        }
    }
    if fixed > 0 {
        warn!("{}: renormalized {fixed} rows that were not unit norm", path.display());
    }
    Ok(())
}

fn load_split(
    path: &Path,
    kind: RowKind,
    owner: &BTreeMap<u32, u32>,
) -> Result<(DMatrix<f64>, Vec<u32>)> {
    let mut table = read_feature_file(path)?;
    crate::gaussian::check_finite(&table.features)?;
    let mut labels = Vec::with_capacity(table.labels.len());
    for &l in &table.labels {
        match u32::try_from(l) {
            Ok(c) if owner.contains_key(&c) => labels.push(c),
            _ => {
                return Err(Error::LabelNotInManifest {
                    label: i64::from(l),
                    path: path.into(),
                })
            }
        }
    }
    if kind == RowKind::Features {
        renormalize_rows(&mut table.features, path)?;
    }
    Ok((table.features, labels))
}

/// Reads a manifest and its two split files into a stream, ordered as the
/// manifest lists its tasks.
pub fn import_features(manifest_path: &Path) -> Result<TaskStream> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text, manifest_path)?;
    let owner = manifest.class_owner()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let train_path = base.join(&manifest.train);
    let eval_path = base.join(&manifest.eval);
    let (train_x, train_y) = load_split(&train_path, manifest.kind, &owner)?;
    let (eval_x, eval_y) = load_split(&eval_path, manifest.kind, &owner)?;
    if train_x.ncols() != eval_x.ncols() && !eval_y.is_empty() && !train_y.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: train_x.ncols(),
            found: eval_x.ncols(),
        });
    }
    let d = train_x.ncols();
    let feature_dim = manifest.feature_dim.unwrap_or(d);
    if feature_dim == 0 || feature_dim > d {
        return Err(Error::InvalidDims { d_in: d, d_out: feature_dim });
    }

    let split_for = |x: &DMatrix<f64>, y: &[u32], task: u32| -> Result<FeatureBatch> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| owner[&y[i]] == task).collect();
        FeatureBatch::new(
            x.select_rows(idx.iter()),
            idx.iter().map(|&i| y[i]).collect(),
            vec![task; idx.len()],
        )
    };
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for t in &manifest.tasks {
        let train = split_for(&train_x, &train_y, t.id)?;
        for &c in &t.classes {
            if !train.labels.contains(&c) {
                return Err(Error::MissingClassSamples(c));
            }
        }
        tasks.push(Task {
            id: t.id,
            classes: t.classes.clone(),
            train,
            eval: split_for(&eval_x, &eval_y, t.id)?,
        });
    }
    let stream = TaskStream {
        input_dim: d,
        feature_dim,
        tasks,
    };
    stream.validate()?;
    Ok(stream)
}

/// Writes `train.feat`, `eval.feat` and `manifest.toml` under `dir` and
/// returns the manifest path.
pub fn export_stream(stream: &TaskStream, dir: &Path, kind: RowKind) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = stream.input_dim;
    let gather = |pick: fn(&Task) -> &FeatureBatch| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for t in &stream.tasks {
            let b = pick(t);
            for i in 0..b.len() {
                rows.extend(b.features.row(i).iter().copied());
            }
            labels.extend_from_slice(&b.labels);
        }
        (DMatrix::from_row_slice(labels.len(), d, &rows), labels)
    };
    let (train_x, train_y) = gather(|t| &t.train);
    let (eval_x, eval_y) = gather(|t| &t.eval);
    write_feature_file(&dir.join("train.feat"), &train_x, &train_y)?;
    write_feature_file(&dir.join("eval.feat"), &eval_x, &eval_y)?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        kind,
        feature_dim: (stream.feature_dim != d).then_some(stream.feature_dim),
        train: "train.feat".into(),
        eval: "eval.feat".into(),
        tasks: stream
            .tasks
            .iter()
            .map(|t| ManifestTask {
                id: t.id,
                classes: t.classes.clone(),
            })
            .collect(),
    };
    let path = dir.join("manifest.toml");
    crate::persist::write_atomic(&path, manifest.to_toml()?.as_bytes())?;
    Ok(path)
}
