//! Runtime invariant suite behind `dmc check`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::encoder::{contrastive_loss_and_grad, init_encoder, AnchorSet, Encoder};
use crate::error::Result;
use crate::gaussian::{estimate_gaussian, GaussianStat};
use crate::pipeline::{final_and_average_accuracy, run_stream, AccuracyMatrix, PipelineState, RunVariant};
use crate::prompt::{objective_and_grad, PromptBank, Projector};
use crate::random::{standard_normal_matrix, stream_rng};
use crate::spd::min_eigenvalue;
use crate::stream::{decode_feature_file, encode_feature_file, generate_stream, StreamSpec};
use crate::transport::{apply_map_to_stat, ot_map, w2_distance_sq};

const CHECK_SEED: u64 = 0x5eed;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = standard_normal_matrix(d, d, rng);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
}

fn random_stat(d: usize, rng: &mut ChaCha8Rng) -> Result<GaussianStat> {
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    GaussianStat::new(mean, random_spd(d, rng), 1)
}

fn ot_exactness() -> Result<(bool, String)> {
    let mut rng = stream_rng(CHECK_SEED, 0, 0);
    let mut worst = 0.0f64;
    for d in [2, 16, 64] {
        for _ in 0..20 {
            let a = random_stat(d, &mut rng)?;
            let b = random_stat(d, &mut rng)?;
            let pushed = apply_map_to_stat(&ot_map(&a, &b)?, &a)?;
            worst = worst.max(w2_distance_sq(&pushed, &b)?);
        }
    }
    Ok((worst < 1e-6, format!("max W2² of pushforward {worst:.3e}")))
}

fn scalar_oracle() -> Result<(bool, String)> {
    let s = |m: f64, v: f64| GaussianStat::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v), 1);
    let map = ot_map(&s(0.0, 1.0)?, &s(2.0, 4.0)?)?;
    let w = w2_distance_sq(&s(0.0, 1.0)?, &s(3.0, 1.0)?)?;
    let err = (map.linear()[(0, 0)] - 2.0).abs().max((map.offset()[0] - 2.0).abs()).max((w - 9.0).abs());
    Ok((err < 1e-10, format!("max deviation {err:.3e}")))
}

fn metric_oracle() -> Result<(bool, String)> {
    let r = AccuracyMatrix::new(vec![vec![80.0], vec![60.0, 70.0]])?;
    let (a_b, a_bar) = final_and_average_accuracy(&r);
    Ok((a_b == 65.0 && a_bar == 72.5, format!("A_B = {a_b}, A_bar = {a_bar}")))
}

fn covariance_is_spd() -> Result<(bool, String)> {
    let mut rng = stream_rng(CHECK_SEED, 1, 0);
    let mut lowest = f64::INFINITY;
    for (n, d) in [(1, 8), (2, 8), (5, 32), (40, 16)] {
        let x = standard_normal_matrix(n, d, &mut rng);
        lowest = lowest.min(min_eigenvalue(estimate_gaussian(&x)?.covariance()));
    }
    Ok((lowest > 0.0, format!("smallest eigenvalue {lowest:.3e}")))
}

/// Largest central-difference mismatch relative to the gradient scale.
fn fd_mismatch(analytic: &[f64], mut loss_at: impl FnMut(usize, f64) -> Result<f64>) -> Result<f64> {
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-8);
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        let fd = (loss_at(i, FD_STEP)? - loss_at(i, -FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max((fd - g).abs() / scale);
    }
    Ok(worst)
}

fn prompt_gradients() -> Result<(bool, String)> {
    let mut rng = stream_rng(CHECK_SEED, 2, 0);
    let dim = 6;
    let mut bank = PromptBank::new(3, 0.4, Projector::random(dim, 9))?;
    bank.init_task(0, &[0, 1], &mut rng)?;
    bank.init_task(1, &[2, 3], &mut rng)?;
    let mut features = standard_normal_matrix(8, dim, &mut rng);
    for mut row in features.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
    let (tau, lambda) = (0.2, 0.7);
    let (_, grads) = objective_and_grad(&bank, &features, &labels, tau, lambda)?;

    let mut worst = 0.0f64;
    for (&c, g) in &grads.class {
        let base = bank.class_prompts()[&c].clone();
        worst = worst.max(fd_mismatch(g.as_slice(), |i, h| {
            let mut b = bank.clone();
            let mut t = base.tokens.clone();
            t[i] += h;
            b.insert_class_prompt(c, base.task, t)?;
            Ok(objective_and_grad(&b, &features, &labels, tau, lambda)?.0)
        })?);
    }
    for (&task, g) in &grads.task {
        let base = bank.task_prompts()[&task].clone();
        worst = worst.max(fd_mismatch(g.as_slice(), |i, h| {
            let mut b = bank.clone();
            let mut t = base.clone();
            t[i] += h;
            b.insert_task_prompt(task, t)?;
            Ok(objective_and_grad(&b, &features, &labels, tau, lambda)?.0)
        })?);
    }
    Ok((worst < FD_TOL, format!("max relative mismatch {worst:.3e}")))
}

fn contrastive_gradient() -> Result<(bool, String)> {
    let mut rng = stream_rng(CHECK_SEED, 3, 0);
    let enc = init_encoder(7, 4, 11)?;
    let inputs = standard_normal_matrix(6, 7, &mut rng);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let anchors = AnchorSet::random(&[0, 1, 2], 4, 5);
    let tau = 0.3;
    let (_, grad) = contrastive_loss_and_grad(&enc, &inputs, &labels, &anchors, tau)?;
    let worst = fd_mismatch(grad.as_slice(), |i, h| {
        let mut w = enc.weights().clone();
        w[i] += h;
        let e = Encoder::from_weights(w)?;
        Ok(contrastive_loss_and_grad(&e, &inputs, &labels, &anchors, tau)?.0)
    })?;
    Ok((worst < FD_TOL, format!("max relative mismatch {worst:.3e}")))
}

fn toy_setup() -> Result<(crate::stream::TaskStream, RunConfig)> {
    let spec = StreamSpec {
        num_tasks: 3,
        classes_per_task: 2,
        input_dim: 8,
        feature_dim: 4,
        train_per_class: 20,
        eval_per_class: 10,
        ..StreamSpec::default()
    };
    let config = RunConfig {
        stage1_steps: 5,
        stage2_steps: 5,
        replay_per_class: 8,
        stream: spec.clone(),
        ..RunConfig::default()
    };
    Ok((generate_stream(&spec)?, config))
}

fn determinism() -> Result<(bool, String)> {
    let (stream, config) = toy_setup()?;
    let a = run_stream(&stream, &config, RunVariant::DmcOt, 3)?;
    let b = run_stream(&stream, &config, RunVariant::DmcOt, 3)?;
    Ok((a == b, format!("A_B {:.2} vs {:.2}", a.final_accuracy, b.final_accuracy)))
}

fn round_trips() -> Result<(bool, String)> {
    let (stream, config) = toy_setup()?;
    let state = PipelineState::for_stream(&stream, &config, RunVariant::DmcOt, 1)?;
    let state = crate::pipeline::run_task(&state, &stream.tasks[0], &config, RunVariant::DmcOt)?;
    let json = state.to_json()?;
    let state_ok = PipelineState::from_json(&json)?.to_json()? == json;

    let train = &stream.tasks[0].train;
    let bytes = encode_feature_file(&train.features, &train.labels)?;
    let table = decode_feature_file(&bytes, std::path::Path::new("<memory>"))?;
    let file_ok = table.features == train.features && table.labels.iter().map(|&l| l as u32).eq(train.labels.iter().copied());
    Ok((state_ok && file_ok, format!("state {state_ok}, feature file {file_ok}")))
}

fn memory_growth() -> Result<(bool, String)> {
    let (stream, config) = toy_setup()?;
    let mut state = PipelineState::for_stream(&stream, &config, RunVariant::DmcOt, 2)?;
    let mut sizes = BTreeMap::new();
    for task in &stream.tasks {
        let before = state.encoder.version();
        state = crate::pipeline::run_task(&state, task, &config, RunVariant::DmcOt)?;
        if state.encoder.version() != before + 1 {
            return Ok((false, format!("encoder version jumped on task {}", task.id)));
        }
        sizes.insert(task.id, state.memory.len());
    }
    let expected: Vec<usize> = (1..=stream.tasks.len()).map(|k| 2 * k).collect();
    let got: Vec<usize> = sizes.values().copied().collect();
    Ok((got == expected, format!("memory sizes {got:?}")))
}

/// Runs every check and returns one outcome per check.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("ot_exactness", ot_exactness()),
        outcome("scalar_transport", scalar_oracle()),
        outcome("metrics", metric_oracle()),
        outcome("covariance_spd", covariance_is_spd()),
        outcome("prompt_gradients", prompt_gradients()),
        outcome("contrastive_gradient", contrastive_gradient()),
        outcome("memory_growth", memory_growth()),
        outcome("determinism", determinism()),
        outcome("round_trips", round_trips()),
    ]
}
