//! Soft-prompt prototype classifier.
//!
//! Each class owns an `M×d` block of prompt tokens and each task owns one
//! shared block. A block is encoded by mean-pooling its rows, applying a
//! frozen orthogonal projector and L2-normalizing. The class embedding is the
//! renormalized sum of the class encoding and `beta` times its task
//! encoding. Classification is by cosine similarity against all class
//! embeddings.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::FeatureBatch;
use crate::optim::{Optimizer, Schedule};
use crate::random::{orthonormal_rows, stream_rng};

/// Standard deviation of freshly initialized prompt tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Below this norm the composed class/task sum is treated as cancelled.
pub const CANCEL_EPS: f64 = 1e-12;

/// Frozen text-encoder stand-in: a `d×d` orthogonal matrix generated from a
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    seed: Option<u64>,
    matrix: DMatrix<f64>,
}

impl Projector {
    pub fn random(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x7072_6f6a, 0);
        Self {
            seed: Some(seed),
            matrix: orthonormal_rows(dim, dim, &mut rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            seed: None,
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Forward pass of [`encode_prompt`], kept for the backward pass.
#[derive(Debug, Clone)]
struct Encoded {
    out: DVector<f64>,
    norm: f64,
    rows: usize,
}

fn encode_forward(tokens: &DMatrix<f64>, projector: &Projector) -> Result<Encoded> {
    if tokens.ncols() != projector.dim() {
        return Err(Error::DimensionMismatch {
            expected: projector.dim(),
            found: tokens.ncols(),
        });
    }
    if tokens.nrows() == 0 {
        return Err(Error::DegeneratePrompt);
    }
    let pooled = tokens.row_sum().transpose() / tokens.nrows() as f64;
    let projected = projector.matrix() * pooled;
    let norm = projected.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::DegeneratePrompt);
    }
    Ok(Encoded {
        out: projected / norm,
        norm,
        rows: tokens.nrows(),
    })
}

/// Pulls an upstream gradient on the encoding back onto the token block.
fn encode_backward(enc: &Encoded, projector: &Projector, upstream: &DVector<f64>) -> DMatrix<f64> {
    let radial = enc.out.dot(upstream);
    let d_projected = (upstream - &enc.out * radial) / enc.norm;
    let d_pooled = projector.matrix().transpose() * d_projected / enc.rows as f64;
    DMatrix::from_fn(enc.rows, d_pooled.len(), |_, j| d_pooled[j])
}

/// Unit-norm encoding of a token block.
pub fn encode_prompt(tokens: &DMatrix<f64>, projector: &Projector) -> Result<DVector<f64>> {
    Ok(encode_forward(tokens, projector)?.out)
}

/// Vector-Jacobian product of [`encode_prompt`]: `∂⟨upstream, f(tokens)⟩/∂tokens`.
pub fn encode_prompt_vjp(
    tokens: &DMatrix<f64>,
    projector: &Projector,
    upstream: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let enc = encode_forward(tokens, projector)?;
    Ok(encode_backward(&enc, projector, upstream))
}

#[derive(Debug, Clone)]
struct Composed {
    out: DVector<f64>,
    norm: f64,
}

fn compose_forward(class: &DVector<f64>, task: &DVector<f64>, beta: f64) -> Result<Composed> {
    let sum = class + task * beta;
    let norm = sum.norm();
    if norm.is_nan() || norm < CANCEL_EPS {
        return Err(Error::CancelledEmbedding);
    }
    Ok(Composed {
        out: sum / norm,
        norm,
    })
}

/// Gradient with respect to the (unnormalized) class/task sum.
fn compose_backward(c: &Composed, upstream: &DVector<f64>) -> DVector<f64> {
    (upstream - &c.out * c.out.dot(upstream)) / c.norm
}

/// `(f(class) + beta·f(task)) / ‖·‖`.
pub fn compose_embedding(
    class_tokens: &DMatrix<f64>,
    task_tokens: &DMatrix<f64>,
    beta: f64,
    projector: &Projector,
) -> Result<DVector<f64>> {
    if class_tokens.shape() != task_tokens.shape() {
        return Err(Error::DimensionMismatch {
            expected: class_tokens.nrows(),
            found: task_tokens.nrows(),
        });
    }
    let class = encode_forward(class_tokens, projector)?;
    let task = encode_forward(task_tokens, projector)?;
    Ok(compose_forward(&class.out, &task.out, beta)?.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub task: u32,
    pub tokens: DMatrix<f64>,
}

/// Learnable class and task prompt blocks plus the frozen projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    prompt_len: usize,
    dim: usize,
    beta: f64,
    projector: Projector,
    class_prompts: BTreeMap<u32, ClassPrompt>,
    task_prompts: BTreeMap<u32, DMatrix<f64>>,
}

impl PromptBank {
    pub fn new(prompt_len: usize, beta: f64, projector: Projector) -> Result<Self> {
        if prompt_len == 0 {
            return Err(Error::InvalidConfig("prompt length must be positive".into()));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {beta}")));
        }
        Ok(Self {
            prompt_len,
            dim: projector.dim(),
            beta,
            projector,
            class_prompts: BTreeMap::new(),
            task_prompts: BTreeMap::new(),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn class_prompts(&self) -> &BTreeMap<u32, ClassPrompt> {
        &self.class_prompts
    }

    pub fn task_prompts(&self) -> &BTreeMap<u32, DMatrix<f64>> {
        &self.task_prompts
    }

    pub fn classes_of(&self, task: u32) -> Vec<u32> {
        self.class_prompts
            .iter()
            .filter(|(_, p)| p.task == task)
            .map(|(&c, _)| c)
            .collect()
    }

    fn check_block(&self, tokens: &DMatrix<f64>) -> Result<()> {
        if tokens.nrows() != self.prompt_len {
            return Err(Error::DimensionMismatch {
                expected: self.prompt_len,
                found: tokens.nrows(),
            });
        }
        if tokens.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: tokens.ncols(),
            });
        }
        Ok(())
    }

    pub fn insert_task_prompt(&mut self, task: u32, tokens: DMatrix<f64>) -> Result<()> {
        self.check_block(&tokens)?;
        self.task_prompts.insert(task, tokens);
        Ok(())
    }

    /// Adds a class prompt. The owning task prompt must already exist.
    pub fn insert_class_prompt(&mut self, class: u32, task: u32, tokens: DMatrix<f64>) -> Result<()> {
        self.check_block(&tokens)?;
        if !self.task_prompts.contains_key(&task) {
            return Err(Error::UnknownTask(task));
        }
        if let Some(existing) = self.class_prompts.get(&class) {
            if existing.task != task {
                return Err(Error::NotClassIncremental {
                    class,
                    task: existing.task,
                });
            }
        }
        self.class_prompts.insert(class, ClassPrompt { task, tokens });
        Ok(())
    }

    /// Initializes one task prompt and one prompt per class with i.i.d.
    /// `N(0, PROMPT_INIT_STD²)` tokens.
    pub fn init_task<R: Rng + ?Sized>(&mut self, task: u32, classes: &[u32], rng: &mut R) -> Result<()> {
        if self.task_prompts.contains_key(&task) {
            return Err(Error::InvalidConfig(format!("task {task} already has prompts")));
        }
        for &c in classes {
            if let Some(p) = self.class_prompts.get(&c) {
                return Err(Error::NotClassIncremental { class: c, task: p.task });
            }
        }
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let (m, d) = (self.prompt_len, self.dim);
        let mut block = || DMatrix::from_fn(m, d, |_, _| normal.sample(rng));
        let task_tokens = block();
        self.task_prompts.insert(task, task_tokens);
        for &c in classes {
            let tokens = block();
            self.class_prompts.insert(c, ClassPrompt { task, tokens });
        }
        Ok(())
    }

    fn forward(&self) -> Result<SoftForward> {
        let tasks = self
            .task_prompts
            .iter()
            .map(|(&t, tokens)| Ok((t, encode_forward(tokens, &self.projector)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut classes = BTreeMap::new();
        for (&c, p) in &self.class_prompts {
            let task = tasks.get(&p.task).ok_or(Error::UnknownTask(p.task))?;
            let enc = encode_forward(&p.tokens, &self.projector)?;
            let composed = compose_forward(&enc.out, &task.out, self.beta)?;
            classes.insert(c, (enc, composed));
        }
        Ok(SoftForward { tasks, classes })
    }

    /// Current class and task embeddings.
    pub fn soft_embeddings(&self) -> Result<SoftEmbeddingSet> {
        let fwd = self.forward()?;
        Ok(SoftEmbeddingSet {
            classes: fwd.classes.into_iter().map(|(c, (_, w))| (c, w.out)).collect(),
            tasks: fwd.tasks.into_iter().map(|(t, e)| (t, e.out)).collect(),
        })
    }

    /// Pulls per-class embedding gradients back to every token block.
    fn backprop(&self, fwd: &SoftForward, class_grads: &BTreeMap<u32, DVector<f64>>) -> PromptGrads {
        let mut grads = PromptGrads::default();
        let mut task_up: BTreeMap<u32, DVector<f64>> = BTreeMap::new();
        for (&c, g) in class_grads {
            let (enc, composed) = &fwd.classes[&c];
            let ds = compose_backward(composed, g);
            let task = self.class_prompts[&c].task;
            grads.class.insert(c, encode_backward(enc, &self.projector, &ds));
            if self.beta != 0.0 {
                let up = task_up.entry(task).or_insert_with(|| DVector::zeros(self.dim));
                *up += &ds * self.beta;
            }
        }
        for (t, up) in task_up {
            grads.add_task(t, encode_backward(&fwd.tasks[&t], &self.projector, &up));
        }
        grads
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json(crate::persist::PROMPT_BANK, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json(crate::persist::PROMPT_BANK, text)
    }
}

struct SoftForward {
    tasks: BTreeMap<u32, Encoded>,
    classes: BTreeMap<u32, (Encoded, Composed)>,
}

/// Unit class embeddings and encoded task prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftEmbeddingSet {
    pub classes: BTreeMap<u32, DVector<f64>>,
    pub tasks: BTreeMap<u32, DVector<f64>>,
}

impl SoftEmbeddingSet {
    pub fn from_classes(classes: BTreeMap<u32, DVector<f64>>) -> Self {
        Self {
            classes,
            tasks: BTreeMap::new(),
        }
    }
}

/// Gradients keyed by class id and task id, each shaped like its token block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptGrads {
    pub class: BTreeMap<u32, DMatrix<f64>>,
    pub task: BTreeMap<u32, DMatrix<f64>>,
}

impl PromptGrads {
    fn add_task(&mut self, task: u32, g: DMatrix<f64>) {
        match self.task.get_mut(&task) {
            Some(existing) => *existing += g,
            None => {
                self.task.insert(task, g);
            }
        }
    }

    fn add_scaled(&mut self, other: PromptGrads, scale: f64) {
        for (c, g) in other.class {
            match self.class.get_mut(&c) {
                Some(existing) => *existing += g * scale,
                None => {
                    self.class.insert(c, g * scale);
                }
            }
        }
        for (t, g) in other.task {
            self.add_task(t, g * scale);
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

/// Mean cross-entropy of cosine-similarity logits `⟨z, w_y⟩/τ` over all
/// classes, with the gradient on each class embedding.
pub fn ce_loss_on_embeddings(
    features: &DMatrix<f64>,
    labels: &[u32],
    embeddings: &SoftEmbeddingSet,
    tau: f64,
) -> Result<(f64, BTreeMap<u32, DVector<f64>>)> {
    check_tau(tau)?;
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::NoSamples);
    }
    let ids: Vec<u32> = embeddings.classes.keys().copied().collect();
    let d = features.ncols();
    let w = DMatrix::from_fn(ids.len(), d, |i, j| embeddings.classes[&ids[i]][j]);
    let targets = labels
        .iter()
        .map(|l| ids.binary_search(l).map_err(|_| Error::UnknownLabel(*l)))
        .collect::<Result<Vec<usize>>>()?;

    let logits = features * w.transpose() / tau;
    let mut dlogits = DMatrix::zeros(n, ids.len());
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.max();
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss += max + denom.ln() - row[targets[i]];
        for k in 0..ids.len() {
            dlogits[(i, k)] = (row[k] - max).exp() / denom;
        }
        dlogits[(i, targets[i])] -= 1.0;
    }
    let nf = n as f64;
    let dw = dlogits.transpose() * features / (nf * tau);
    let grads = ids
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, dw.row(k).transpose()))
        .collect();
    Ok((loss / nf, grads))
}

/// Cross-entropy over the bank's classes with gradients on every token block.
pub fn ce_loss_and_grad(
    bank: &PromptBank,
    features: &DMatrix<f64>,
    labels: &[u32],
    tau: f64,
) -> Result<(f64, PromptGrads)> {
    let fwd = bank.forward()?;
    let embeddings = SoftEmbeddingSet {
        classes: fwd.classes.iter().map(|(&c, (_, w))| (c, w.out.clone())).collect(),
        tasks: BTreeMap::new(),
    };
    let (loss, class_grads) = ce_loss_on_embeddings(features, labels, &embeddings, tau)?;
    Ok((loss, bank.backprop(&fwd, &class_grads)))
}

/// Mean squared pairwise inner product over ordered pairs `i ≠ j`, with the
/// gradient on each embedding. Zero for a single embedding.
pub fn ortho_loss_on_embeddings(embeddings: &[DVector<f64>]) -> (f64, Vec<DVector<f64>>) {
    let k = embeddings.len();
    let mut grads: Vec<DVector<f64>> = embeddings.iter().map(|e| DVector::zeros(e.len())).collect();
    if k < 2 {
        return (0.0, grads);
    }
    let norm = 1.0 / (k * (k - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let c = embeddings[i].dot(&embeddings[j]);
            loss += 2.0 * c * c;
            grads[i] += &embeddings[j] * (4.0 * norm * c);
            grads[j] += &embeddings[i] * (4.0 * norm * c);
        }
    }
    (loss * norm, grads)
}

/// Orthogonality penalty over all encoded task prompts in the bank.
pub fn ortho_loss_and_grad(bank: &PromptBank) -> Result<(f64, PromptGrads)> {
    let ids: Vec<u32> = bank.task_prompts.keys().copied().collect();
    let encs = ids
        .iter()
        .map(|t| encode_forward(&bank.task_prompts[t], &bank.projector))
        .collect::<Result<Vec<_>>>()?;
    let outs: Vec<DVector<f64>> = encs.iter().map(|e| e.out.clone()).collect();
    let (loss, egrads) = ortho_loss_on_embeddings(&outs);
    let mut grads = PromptGrads::default();
    for ((t, enc), g) in ids.iter().zip(&encs).zip(&egrads) {
        grads.task.insert(*t, encode_backward(enc, &bank.projector, g));
    }
    Ok((loss, grads))
}

/// `ce + lambda_ortho · ortho`.
pub fn total_loss(ce: f64, ortho: f64, lambda_ortho: f64) -> f64 {
    ce + lambda_ortho * ortho
}

/// Combined objective and its token gradients.
pub fn objective_and_grad(
    bank: &PromptBank,
    features: &DMatrix<f64>,
    labels: &[u32],
    tau: f64,
    lambda_ortho: f64,
) -> Result<(f64, PromptGrads)> {
    let (ce, mut grads) = ce_loss_and_grad(bank, features, labels, tau)?;
    if lambda_ortho == 0.0 {
        return Ok((ce, grads));
    }
    let (ortho, ograds) = ortho_loss_and_grad(bank)?;
    grads.add_scaled(ograds, lambda_ortho);
    Ok((total_loss(ce, ortho, lambda_ortho), grads))
}

/// Class with the highest cosine similarity; ties go to the lowest id.
pub fn predict(feature: &DVector<f64>, embeddings: &SoftEmbeddingSet) -> Result<u32> {
    let norm = feature.norm();
    let mut best: Option<(u32, f64)> = None;
    for (&c, w) in &embeddings.classes {
        let sim = feature.dot(w) / (norm * w.norm());
        match best {
            Some((_, b)) if sim <= b => {}
            _ => best = Some((c, sim)),
        }
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyEmbeddings)
}

/// Predictions for every row of `features`.
pub fn predict_batch(features: &DMatrix<f64>, embeddings: &SoftEmbeddingSet) -> Result<Vec<u32>> {
    features
        .row_iter()
        .map(|r| predict(&r.transpose(), embeddings))
        .collect()
}

/// Hyperparameters of prompt training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptTraining {
    pub schedule: Schedule,
    pub tau: f64,
    pub lambda_ortho: f64,
}

/// Flat view over the prompt blocks of one task.
struct Trainable {
    classes: Vec<u32>,
    task: u32,
}

impl Trainable {
    fn gather(&self, bank: &PromptBank) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.classes {
            out.extend_from_slice(bank.class_prompts[c].tokens.as_slice());
        }
        out.extend_from_slice(bank.task_prompts[&self.task].as_slice());
        out
    }

    fn scatter(&self, bank: &mut PromptBank, flat: &[f64]) {
        let block = bank.prompt_len * bank.dim;
        for (i, c) in self.classes.iter().enumerate() {
            let tokens = &mut bank.class_prompts.get_mut(c).expect("trainable class").tokens;
            tokens.as_mut_slice().copy_from_slice(&flat[i * block..(i + 1) * block]);
        }
        let off = self.classes.len() * block;
        bank.task_prompts
            .get_mut(&self.task)
            .expect("trainable task")
            .as_mut_slice()
            .copy_from_slice(&flat[off..off + block]);
    }

    fn gather_grads(&self, bank: &PromptBank, grads: &PromptGrads) -> Vec<f64> {
        let block = bank.prompt_len * bank.dim;
        let mut out = Vec::with_capacity((self.classes.len() + 1) * block);
        for c in &self.classes {
            match grads.class.get(c) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, block)),
            }
        }
        match grads.task.get(&self.task) {
            Some(g) => out.extend_from_slice(g.as_slice()),
            None => out.extend(std::iter::repeat_n(0.0, block)),
        }
        out
    }
}

/// Real and replayed row counts for one mini-batch: half and half when
/// replay is available, all real otherwise.
pub fn batch_split(batch_size: usize, n_real: usize, n_replay: usize) -> (usize, usize) {
    if n_replay == 0 {
        (batch_size.min(n_real), 0)
    } else {
        let half = batch_size.div_ceil(2);
        (half.min(n_real), (batch_size - half).max(1).min(n_replay))
    }
}

fn draw_batch<R: Rng + ?Sized>(
    real: &FeatureBatch,
    replay: &FeatureBatch,
    batch_size: usize,
    rng: &mut R,
) -> Result<FeatureBatch> {
    let (n_real, n_replay) = batch_split(batch_size, real.len(), replay.len());
    let real_idx = index::sample(rng, real.len(), n_real).into_vec();
    let batch = real.select(&real_idx);
    if n_replay == 0 {
        return Ok(batch);
    }
    let replay_idx = index::sample(rng, replay.len(), n_replay).into_vec();
    batch.concat(&replay.select(&replay_idx))
}

/// Optimizer state over the prompts of one task. Every other block of the
/// bank is left untouched by [`PromptTrainer::step`].
pub struct PromptTrainer {
    trainable: Trainable,
    params: Vec<f64>,
    opt: Optimizer,
    training: PromptTraining,
}

impl PromptTrainer {
    pub fn new(bank: &PromptBank, task: u32, training: &PromptTraining) -> Result<Self> {
        training.schedule.validate()?;
        check_tau(training.tau)?;
        if !bank.task_prompts.contains_key(&task) {
            return Err(Error::UnknownTask(task));
        }
        let trainable = Trainable {
            classes: bank.classes_of(task),
            task,
        };
        let params = trainable.gather(bank);
        let opt = Optimizer::new(
            training.schedule.optimizer,
            training.schedule.learning_rate,
            params.len(),
        );
        Ok(Self {
            trainable,
            params,
            opt,
            training: *training,
        })
    }

    /// One optimizer step on `batch`; returns the objective before the step.
    pub fn step(&mut self, bank: &mut PromptBank, batch: &FeatureBatch) -> Result<f64> {
        let (loss, grads) = objective_and_grad(
            bank,
            &batch.features,
            &batch.labels,
            self.training.tau,
            self.training.lambda_ortho,
        )?;
        let flat = self.trainable.gather_grads(bank, &grads);
        self.opt.step(&mut self.params, &flat);
        self.trainable.scatter(bank, &self.params);
        Ok(loss)
    }
}

/// Gradient descent on the prompt objective over real and replayed features.
///
/// Only the prompts of `task` (its class prompts and its task prompt) are
/// updated; every other block is returned bitwise unchanged.
pub fn train_prompts<R: Rng + ?Sized>(
    bank: &PromptBank,
    task: u32,
    real: &FeatureBatch,
    replay: &FeatureBatch,
    training: &PromptTraining,
    rng: &mut R,
) -> Result<PromptBank> {
    if real.is_empty() {
        training.schedule.validate()?;
        return Err(Error::EmptyTask);
    }
    let mut out = bank.clone();
    let mut trainer = PromptTrainer::new(&out, task, training)?;

    let batch_size = training.schedule.batch_size;
    let per_batch = batch_split(batch_size, real.len(), replay.len()).0.max(1);
    let epoch_len = real.len().div_ceil(per_batch);
    let mut epoch_loss = 0.0;
    let mut previous: Option<f64> = None;

    for step in 0..training.schedule.steps {
        let batch = draw_batch(real, replay, batch_size, rng)?;
        epoch_loss += trainer.step(&mut out, &batch)?;
        if (step + 1) % epoch_len == 0 {
            let mean = epoch_loss / epoch_len as f64;
            if let Some(prev) = previous {
                if mean > prev {
                    debug!("prompt loss rose from {prev:.6} to {mean:.6} at step {}", step + 1);
                }
            }
            previous = Some(mean);
            epoch_loss = 0.0;
        }
    }
    Ok(out)
}
