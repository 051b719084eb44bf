//! Task-by-task training loop: pre-drift statistics, encoder adaptation,
//! transport calibration of the class memory, replay construction, prompt
//! training and memory update, plus evaluation and the ablation variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{
    self, adapt_encoder, contrastive_loss_and_grad, encode, extract_class_stats, init_encoder, AnchorSet, Encoder,
};
use crate::error::{Error, Result};
use crate::gaussian::{average_stats, sample_gaussian, FeatureBatch, GaussianStat};
use crate::optim::Optimizer;
use crate::prompt::{self, batch_split, train_prompts, PromptBank, PromptTrainer, Projector};
use crate::random::stream_rng;
use crate::stream::{Task, TaskStream};
use crate::transport::{calibrate_memory, ot_map, ot_map_per_class_averaged, TransportMap};

const ENCODER_BATCHES: u64 = 1;
const PROMPT_INIT: u64 = 2;
const REPLAY: u64 = 3;
const PROMPT_BATCHES: u64 = 4;
const PROJECTOR: u64 = 5;

/// How stored statistics are carried across an encoder update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    /// One map between the task-averaged pre and post Gaussians.
    Averaged,
    /// Per-class maps with averaged parameters.
    PerClassAveraged,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunVariant {
    /// Two-stage training, averaged transport calibration, task prompts.
    DmcOt,
    /// Two-stage training without calibration or task prompts.
    Dmc,
    /// `Dmc` with encoder and prompt steps interleaved in one loop.
    Simultaneous,
    /// `DmcOt` with beta forced to zero and no orthogonality term.
    NoTaskPrompt,
    /// `DmcOt` with per-class maps averaged into one.
    AltOt,
    /// `DmcOt` without calibration.
    NoOt,
}

impl RunVariant {
    pub const ALL: [RunVariant; 6] = [
        RunVariant::DmcOt,
        RunVariant::Dmc,
        RunVariant::NoOt,
        RunVariant::AltOt,
        RunVariant::NoTaskPrompt,
        RunVariant::Simultaneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunVariant::DmcOt => "dmc_ot",
            RunVariant::Dmc => "dmc",
            RunVariant::Simultaneous => "simultaneous",
            RunVariant::NoTaskPrompt => "no_task_prompt",
            RunVariant::AltOt => "alt_ot",
            RunVariant::NoOt => "no_ot",
        }
    }

    pub fn calibration(self) -> Calibration {
        match self {
            RunVariant::DmcOt | RunVariant::NoTaskPrompt => Calibration::Averaged,
            RunVariant::AltOt => Calibration::PerClassAveraged,
            RunVariant::Dmc | RunVariant::NoOt | RunVariant::Simultaneous => Calibration::None,
        }
    }

    pub fn uses_task_prompts(self) -> bool {
        matches!(self, RunVariant::DmcOt | RunVariant::AltOt | RunVariant::NoOt)
    }

    pub fn two_stage(self) -> bool {
        self != RunVariant::Simultaneous
    }
}

impl fmt::Display for RunVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        RunVariant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s}")))
    }
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub encoder: Encoder,
    pub bank: PromptBank,
    /// Calibrated Gaussian memory of every class of every finished task.
    pub memory: BTreeMap<u32, GaussianStat>,
    pub seen_tasks: Vec<u32>,
    pub anchors: AnchorSet,
    /// Class → owning task for every finished task.
    pub class_tasks: BTreeMap<u32, u32>,
    /// Root seed; every per-task random stream is derived from it and the
    /// number of finished tasks.
    pub seed: u64,
}

impl PipelineState {
    /// Fresh state for a run: random encoder, per-class anchors for
    /// `classes`, and an empty prompt bank.
    pub fn new(
        seed: u64,
        input_dim: usize,
        feature_dim: usize,
        classes: &[u32],
        config: &RunConfig,
        variant: RunVariant,
    ) -> Result<Self> {
        let encoder = init_encoder(input_dim, feature_dim, seed)?;
        let anchors = AnchorSet::random(classes, feature_dim, seed);
        let beta = if variant.uses_task_prompts() { config.beta } else { 0.0 };
        let projector = Projector::random(feature_dim, seed ^ PROJECTOR.rotate_left(32));
        let bank = PromptBank::new(config.prompt_len, beta, projector)?;
        Ok(Self {
            encoder,
            bank,
            memory: BTreeMap::new(),
            seen_tasks: Vec::new(),
            anchors,
            class_tasks: BTreeMap::new(),
            seed,
        })
    }

    pub fn for_stream(stream: &TaskStream, config: &RunConfig, variant: RunVariant, seed: u64) -> Result<Self> {
        Self::new(
            seed,
            stream.input_dim,
            stream.feature_dim,
            &stream.all_classes(),
            config,
            variant,
        )
    }

    fn rng(&self, purpose: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.seed, purpose, self.seen_tasks.len() as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::persist::to_json(crate::persist::PIPELINE_STATE, self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::persist::from_json(crate::persist::PIPELINE_STATE, text)
    }
}

/// Samples `per_class` rows from every stored Gaussian and rescales each
/// row to unit length. `task_of` supplies the task id recorded per row.
pub fn build_replay_batch<R: Rng + ?Sized>(
    memory: &BTreeMap<u32, GaussianStat>,
    per_class: usize,
    dim: usize,
    task_of: impl Fn(u32) -> u32,
    rng: &mut R,
) -> Result<FeatureBatch> {
    if memory.is_empty() || per_class == 0 {
        return Ok(FeatureBatch::empty(dim));
    }
    let mut rows = Vec::with_capacity(memory.len() * per_class * dim);
    let mut labels = Vec::with_capacity(memory.len() * per_class);
    let mut tasks = Vec::with_capacity(memory.len() * per_class);
    for (&class, stat) in memory {
        if stat.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: stat.dim(),
            });
        }
        let samples = sample_gaussian(stat, per_class, rng)?;
        for (i, row) in samples.row_iter().enumerate() {
            let n = row.norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::DegenerateInput(i));
            }
            rows.extend(row.iter().map(|v| v / n));
        }
        labels.extend(std::iter::repeat_n(class, per_class));
        tasks.extend(std::iter::repeat_n(task_of(class), per_class));
    }
    FeatureBatch::new(DMatrix::from_row_slice(labels.len(), dim, &rows), labels, tasks)
}

fn transport_for(calibration: Calibration, pre: &BTreeMap<u32, GaussianStat>, post: &BTreeMap<u32, GaussianStat>) -> Result<Option<TransportMap>> {
    match calibration {
        Calibration::None => Ok(None),
        Calibration::Averaged => {
            let pre_avg = average_stats(pre.values())?;
            let post_avg = average_stats(post.values())?;
            Ok(Some(ot_map(&pre_avg, &post_avg)?))
        }
        Calibration::PerClassAveraged => {
            let pre: Vec<GaussianStat> = pre.values().cloned().collect();
            let post: Vec<GaussianStat> = post.values().cloned().collect();
            Ok(Some(ot_map_per_class_averaged(&pre, &post)?))
        }
    }
}

/// Single-stage training: encoder and prompt steps alternate on the same
/// task data until both step budgets are spent.
fn train_simultaneously(
    state: &mut PipelineState,
    task: &Task,
    replay: &FeatureBatch,
    config: &RunConfig,
    variant: RunVariant,
) -> Result<()> {
    let enc_training = config.encoder_training();
    enc_training.schedule.validate()?;
    let prompt_training = config.prompt_training(variant);
    let mut enc_rng = state.rng(ENCODER_BATCHES);
    let mut prompt_rng = state.rng(PROMPT_BATCHES);
    let mut enc_opt = Optimizer::new(
        enc_training.schedule.optimizer,
        enc_training.schedule.learning_rate,
        state.encoder.weights().len(),
    );
    let mut trainer = PromptTrainer::new(&state.bank, task.id, &prompt_training)?;
    let data = &task.train;
    if data.len() < 2 {
        return Err(Error::ContrastiveUndefined(data.len()));
    }
    let enc_steps = enc_training.schedule.steps;
    let prompt_steps = prompt_training.schedule.steps;
    let steps = enc_steps.max(prompt_steps);
    // Each module's step budget is spread evenly over the joint stage.
    let due = |budget: usize, t: usize| (t + 1) * budget / steps > t * budget / steps;
    for step in 0..steps {
        if due(enc_steps, step) {
            let idx = encoder::batch_indices(data.len(), enc_training.schedule.batch_size, &mut enc_rng);
            let batch = data.select(&idx);
            let (_, grad) = contrastive_loss_and_grad(
                &state.encoder,
                &batch.features,
                &batch.labels,
                &state.anchors,
                enc_training.tau,
            )?;
            enc_opt.step(state.encoder.weights_mut().as_mut_slice(), grad.as_slice());
        }
        if due(prompt_steps, step) {
            let (n_real, n_replay) = batch_split(prompt_training.schedule.batch_size, data.len(), replay.len());
            let real_idx = index::sample(&mut prompt_rng, data.len(), n_real).into_vec();
            let mut real = data.select(&real_idx);
            real.features = encode(&state.encoder, &real.features)?;
            let batch = if n_replay > 0 {
                let replay_idx = index::sample(&mut prompt_rng, replay.len(), n_replay).into_vec();
                real.concat(&replay.select(&replay_idx))?
            } else {
                real
            };
            trainer.step(&mut state.bank, &batch)?;
        }
    }
    state.encoder.bump_version();
    Ok(())
}

/// Runs one task of the class-incremental loop and returns the new state.
pub fn run_task(state: &PipelineState, task: &Task, config: &RunConfig, variant: RunVariant) -> Result<PipelineState> {
    for &c in &task.classes {
        if let Some(&t) = state.class_tasks.get(&c) {
            return Err(Error::NotClassIncremental { class: c, task: t });
        }
    }
    if state.seen_tasks.contains(&task.id) {
        return Err(Error::InvalidConfig(format!("task {} already trained", task.id)));
    }
    if task.train.is_empty() {
        return Err(Error::EmptyTask);
    }
    for &c in &task.classes {
        if !task.train.labels.contains(&c) {
            return Err(Error::MissingClassSamples(c));
        }
    }
    let mut next = state.clone();

    // Statistics of the new classes under the encoder before adaptation.
    let pre = extract_class_stats(&state.encoder, &task.train)?;

    let mut init_rng = state.rng(PROMPT_INIT);
    next.bank.init_task(task.id, &task.classes, &mut init_rng)?;

    let prompt_training = config.prompt_training(variant);
    let feature_dim = state.encoder.d_out();
    let owners = state.class_tasks.clone();
    let task_of = |c: u32| owners.get(&c).copied().unwrap_or(task.id);

    if variant.two_stage() {
        let mut enc_rng = state.rng(ENCODER_BATCHES);
        next.encoder = adapt_encoder(
            &state.encoder,
            &task.train,
            &state.anchors,
            &config.encoder_training(),
            &mut enc_rng,
        )?;
        let post = extract_class_stats(&next.encoder, &task.train)?;

        if !state.memory.is_empty() {
            if let Some(map) = transport_for(variant.calibration(), &pre, &post)? {
                next.memory = calibrate_memory(&map, &state.memory)?;
            }
        }

        let replay = build_replay_batch(
            &next.memory,
            config.replay_per_class,
            feature_dim,
            task_of,
            &mut state.rng(REPLAY),
        )?;
        let mut real = task.train.clone();
        real.features = encode(&next.encoder, &task.train.features)?;
        next.bank = train_prompts(
            &next.bank,
            task.id,
            &real,
            &replay,
            &prompt_training,
            &mut state.rng(PROMPT_BATCHES),
        )?;
        next.memory.extend(post);
    } else {
        let replay = build_replay_batch(
            &state.memory,
            config.replay_per_class,
            feature_dim,
            task_of,
            &mut state.rng(REPLAY),
        )?;
        train_simultaneously(&mut next, task, &replay, config, variant)?;
        let post = extract_class_stats(&next.encoder, &task.train)?;
        if !state.memory.is_empty() {
            if let Some(map) = transport_for(variant.calibration(), &pre, &post)? {
                next.memory = calibrate_memory(&map, &next.memory)?;
            }
        }
        next.memory.extend(post);
    }

    for &c in &task.classes {
        next.class_tasks.insert(c, task.id);
    }
    next.seen_tasks.push(task.id);
    debug!(
        "task {} done: encoder v{}, {} classes in memory",
        task.id,
        next.encoder.version(),
        next.memory.len()
    );
    Ok(next)
}

/// Percentage of correctly classified rows per evaluation set, predicting
/// over every class in the bank (no task masking).
pub fn evaluate(state: &PipelineState, eval_sets: &[&FeatureBatch]) -> Result<Vec<f64>> {
    let embeddings = state.bank.soft_embeddings()?;
    eval_sets
        .par_iter()
        .map(|set| {
            if set.is_empty() {
                return Err(Error::EmptyEvalSet(set.task_ids.first().copied().unwrap_or(0)));
            }
            let features = encode(&state.encoder, &set.features)?;
            let preds = prompt::predict_batch(&features, &embeddings)?;
            let correct = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
            Ok(100.0 * correct as f64 / set.len() as f64)
        })
        .collect()
}

/// Lower-triangular accuracy table; row `k` holds accuracies on tasks
/// `0..=k` after training task `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::IncompleteMatrix("no rows".into()));
        }
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::IncompleteMatrix(format!(
                    "row {} has {} entries, expected {}",
                    k + 1,
                    row.len(),
                    k + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::IncompleteMatrix(format!("entry {v} outside [0, 100]")));
            }
        }
        Ok(Self { rows })
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `R[k][i]`, zero-based.
    pub fn get(&self, k: usize, i: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(i)).copied()
    }

    /// Mean accuracy over the tasks seen after stage `k` (zero-based).
    pub fn stage_average(&self, k: usize) -> f64 {
        let row = &self.rows[k];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// `(A_B, Ā)`: the last stage-wise average and the mean of all stage-wise
/// averages.
pub fn final_and_average_accuracy(r: &AccuracyMatrix) -> (f64, f64) {
    let k = r.num_tasks();
    let stages: Vec<f64> = (0..k).map(|b| r.stage_average(b)).collect();
    let last = stages[k - 1];
    let mean = stages.iter().sum::<f64>() / k as f64;
    (last, mean)
}

/// One seed's run over a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
}

/// Trains on every task in order, evaluating all seen tasks after each.
/// `on_task` observes the state after every task (checkpointing hook).
pub fn run_stream_with<F>(
    stream: &TaskStream,
    config: &RunConfig,
    variant: RunVariant,
    seed: u64,
    mut on_task: F,
) -> Result<(SeedRun, PipelineState)>
where
    F: FnMut(&PipelineState) -> Result<()>,
{
    stream.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::InvalidSpec("stream has no tasks".into()));
    }
    let mut state = PipelineState::for_stream(stream, config, variant, seed)?;
    let mut rows = Vec::with_capacity(stream.tasks.len());
    for (k, task) in stream.tasks.iter().enumerate() {
        state = run_task(&state, task, config, variant)?;
        on_task(&state)?;
        let sets: Vec<&FeatureBatch> = stream.tasks[..=k].iter().map(|t| &t.eval).collect();
        rows.push(evaluate(&state, &sets)?);
    }
    let matrix = AccuracyMatrix::new(rows)?;
    let (a_b, a_bar) = final_and_average_accuracy(&matrix);
    Ok((
        SeedRun {
            seed,
            matrix,
            final_accuracy: a_b,
            average_accuracy: a_bar,
        },
        state,
    ))
}

pub fn run_stream(stream: &TaskStream, config: &RunConfig, variant: RunVariant, seed: u64) -> Result<SeedRun> {
    Ok(run_stream_with(stream, config, variant, seed, |_| Ok(()))?.0)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed runs of one variant and their aggregate metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub variant: RunVariant,
    pub runs: Vec<SeedRun>,
    pub a_bar_mean: f64,
    pub a_bar_std: f64,
    pub a_b_mean: f64,
    pub a_b_std: f64,
}

impl ExperimentResult {
    pub fn from_runs(variant: RunVariant, runs: Vec<SeedRun>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        let a_b: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
        let a_bar: Vec<f64> = runs.iter().map(|r| r.average_accuracy).collect();
        let (a_b_mean, a_b_std) = mean_std(&a_b);
        let (a_bar_mean, a_bar_std) = mean_std(&a_bar);
        Ok(Self {
            variant,
            runs,
            a_bar_mean,
            a_bar_std,
            a_b_mean,
            a_b_std,
        })
    }
}

/// Independent runs for every seed (in parallel), aggregated.
pub fn run_experiment(stream: &TaskStream, config: &RunConfig, variant: RunVariant, seeds: &[u64]) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&s| run_stream(stream, config, variant, s))
        .collect::<Result<Vec<_>>>()?;
    ExperimentResult::from_runs(variant, runs)
}

/// W2 distances of the first task's classes from their true statistics
/// under the encoder adapted on the second task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFidelity {
    /// Sum over old classes of W2²(calibrated memory, true post-drift stats).
    pub calibrated: f64,
    /// Same, with the memory left as stored.
    pub uncalibrated: f64,
}

/// Runs two tasks with averaged calibration and measures how close the
/// calibrated and uncalibrated first-task memories are to the statistics
/// obtained by re-encoding the first task's training data.
pub fn calibration_fidelity(stream: &TaskStream, config: &RunConfig, seed: u64) -> Result<CalibrationFidelity> {
    if stream.tasks.len() < 2 {
        return Err(Error::InvalidSpec("calibration fidelity needs two tasks".into()));
    }
    let variant = RunVariant::DmcOt;
    let state = PipelineState::for_stream(stream, config, variant, seed)?;
    let after_first = run_task(&state, &stream.tasks[0], config, variant)?;
    let after_second = run_task(&after_first, &stream.tasks[1], config, variant)?;
    let truth = extract_class_stats(&after_second.encoder, &stream.tasks[0].train)?;
    let mut out = CalibrationFidelity {
        calibrated: 0.0,
        uncalibrated: 0.0,
    };
    for (c, true_stat) in &truth {
        out.calibrated += crate::transport::w2_distance_sq(&after_second.memory[c], true_stat)?;
        out.uncalibrated += crate::transport::w2_distance_sq(&after_first.memory[c], true_stat)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_hand_values() {
        let r = AccuracyMatrix::new(vec![vec![80.0], vec![60.0, 70.0]]).unwrap();
        assert_eq!(final_and_average_accuracy(&r), (65.0, 72.5));
        let one = AccuracyMatrix::new(vec![vec![42.0]]).unwrap();
        assert_eq!(final_and_average_accuracy(&one), (42.0, 42.0));
        let full = AccuracyMatrix::new(vec![vec![100.0], vec![100.0, 100.0]]).unwrap();
        assert_eq!(final_and_average_accuracy(&full), (100.0, 100.0));
    }

    #[test]
    fn incomplete_matrix_rejected() {
        assert!(AccuracyMatrix::new(vec![]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![80.0], vec![60.0]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![120.0]]).is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in RunVariant::ALL {
            assert_eq!(v.name().parse::<RunVariant>().unwrap(), v);
        }
        assert_eq!("DMC-OT".parse::<RunVariant>().unwrap(), RunVariant::DmcOt);
        assert!("bogus".parse::<RunVariant>().is_err());
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        assert_eq!(mean_std(&[2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn replay_counts_and_norms() {
        let mut memory = BTreeMap::new();
        for c in 0..3u32 {
            let mean = nalgebra::DVector::from_element(4, c as f64 + 1.0);
            memory.insert(c, GaussianStat::new(mean, DMatrix::identity(4, 4) * 0.01, 10).unwrap());
        }
        let mut rng = stream_rng(0, 0, 0);
        let b = build_replay_batch(&memory, 16, 4, |_| 0, &mut rng).unwrap();
        assert_eq!(b.len(), 48);
        for c in 0..3 {
            assert_eq!(b.labels.iter().filter(|&&l| l == c).count(), 16);
        }
        for row in b.features.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-10);
        }
        let empty = build_replay_batch(&BTreeMap::new(), 16, 4, |_| 0, &mut rng).unwrap();
        assert_eq!(empty.len(), 0);
    }
}
