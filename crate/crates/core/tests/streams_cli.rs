//! On-disk streams and the `dmc` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dmc_core::config::RunConfig;
use dmc_core::pipeline::RunVariant;
use dmc_core::stream::{export_stream, generate_stream, import_features, RowKind, StreamSpec};
use tempfile::TempDir;

fn dmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmc")).args(args).output().expect("spawn dmc")
}

fn toy_config(dir: &Path) -> String {
    let config = RunConfig {
        seeds: vec![0, 1],
        stage1_steps: 10,
        stage2_steps: 20,
        replay_per_class: 8,
        stream: StreamSpec {
            num_tasks: 3,
            classes_per_task: 2,
            input_dim: 8,
            feature_dim: 4,
            train_per_class: 30,
            eval_per_class: 15,
            ..StreamSpec::default()
        },
        ..RunConfig::default()
    };
    let path = dir.join("toy.toml");
    fs::write(&path, config.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn exported_inputs_import_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let spec = StreamSpec {
        num_tasks: 2,
        classes_per_task: 3,
        train_per_class: 7,
        eval_per_class: 4,
        ..StreamSpec::default()
    };
    let stream = generate_stream(&spec).unwrap();
    let manifest = export_stream(&stream, dir.path(), RowKind::Inputs).unwrap();
    assert_eq!(import_features(&manifest).unwrap(), stream);
}

#[test]
fn generated_stream_sizes() {
    let spec = StreamSpec {
        num_tasks: 1,
        classes_per_task: 2,
        train_per_class: 10,
        eval_per_class: 10,
        ..StreamSpec::default()
    };
    let stream = generate_stream(&spec).unwrap();
    assert_eq!(stream.tasks[0].train.len(), 20);
    assert_eq!(stream.tasks[0].eval.len(), 20);
    let train = &stream.tasks[0].train.features;
    for e in stream.tasks[0].eval.features.row_iter() {
        assert!(train.row_iter().all(|t| t != e));
    }
    assert_eq!(generate_stream(&spec).unwrap(), stream);
}

#[test]
fn overlapping_manifest_is_rejected() {
    let dir = TempDir::new().unwrap();
    let stream = generate_stream(&StreamSpec {
        num_tasks: 2,
        ..StreamSpec::default()
    })
    .unwrap();
    let manifest = export_stream(&stream, dir.path(), RowKind::Inputs).unwrap();
    let text = fs::read_to_string(&manifest).unwrap();
    let edited = text.replacen("classes = [5,", "classes = [0,", 1).replacen("classes = [5, ", "classes = [0, ", 1);
    assert_ne!(edited, text, "manifest layout changed:\n{text}");
    fs::write(&manifest, edited).unwrap();
    let err = import_features(&manifest).unwrap_err();
    assert!(err.to_string().contains("not class-incremental"), "{err}");
}

#[test]
fn truncated_split_reports_byte_counts() {
    let dir = TempDir::new().unwrap();
    let stream = generate_stream(&StreamSpec {
        num_tasks: 1,
        classes_per_task: 2,
        train_per_class: 5,
        ..StreamSpec::default()
    })
    .unwrap();
    let manifest = export_stream(&stream, dir.path(), RowKind::Inputs).unwrap();
    let train = dir.path().join("train.feat");
    let bytes = fs::read(&train).unwrap();
    let expected = bytes.len();
    fs::write(&train, &bytes[..expected - 3]).unwrap();
    let msg = import_features(&manifest).unwrap_err().to_string();
    assert!(msg.contains(&expected.to_string()) && msg.contains(&(expected - 3).to_string()), "{msg}");
}

#[test]
fn missing_config_names_the_path() {
    let out = dmc(&["run", "--config", "/nonexistent/dir/cfg.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("/nonexistent/dir/cfg.toml"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    let out = dmc(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).to_lowercase().contains("usage"));
    let out = dmc(&["run", "--no-such-flag"]);
    assert!(!out.status.success());
}

#[test]
fn run_on_a_small_stream_is_fast_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = toy_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let started = Instant::now();
    let out = dmc(&["run", "--config", &config, "--out", a.to_str().unwrap()]);
    assert!(started.elapsed() < Duration::from_secs(60));
    assert!(out.status.success(), "{}", stderr(&out));
    let out = dmc(&["run", "--config", &config, "--out", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["dmc_ot_seed0.csv", "dmc_ot_seed1.csv", "aggregate.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn ablate_reports_every_variant() {
    let dir = TempDir::new().unwrap();
    let config = toy_config(dir.path());
    let out_dir = dir.path().join("ablate");
    let out = dmc(&["ablate", "--config", &config, "--seed", "3", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let aggregate = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = aggregate.lines().skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    let expected: Vec<&str> = RunVariant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, expected);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for n in &names {
        assert!(stdout.contains(n), "table misses {n}");
    }
}

#[test]
fn gen_then_run_on_the_exported_stream() {
    let dir = TempDir::new().unwrap();
    let config = toy_config(dir.path());
    let stream_dir = dir.path().join("stream");
    let out = dmc(&["gen", "--config", &config, "--out", stream_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let from_file = dir.path().join("file");
    let synthetic = dir.path().join("synthetic");
    for (stream, target) in [(manifest.as_str(), &from_file), ("synthetic", &synthetic)] {
        let out = dmc(&["run", "--config", &config, "--seed", "0", "--stream", stream, "--out", target.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        fs::read(from_file.join("dmc_ot_seed0.csv")).unwrap(),
        fs::read(synthetic.join("dmc_ot_seed0.csv")).unwrap()
    );
}

#[test]
fn check_subcommand_passes() {
    let out = dmc(&["check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}
