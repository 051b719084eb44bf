//! Command-line front end: `run`, `ablate`, `gen` and `check`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{run_stream_with, ExperimentResult, RunVariant};
use crate::report::{emit_report, ReportFormat};
use crate::stream::{export_stream, generate_stream, import_features, RowKind, TaskStream};

#[derive(Debug, Parser)]
#[command(name = "dmc", version, about = "Class-incremental learning with calibrated Gaussian memories")]
pub struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one variant over a stream and write reports.
    Run(RunArgs),
    /// Run every ablation variant on one stream and compare them.
    Ablate(RunArgs),
    /// Write the configured synthetic stream to disk.
    Gen(GenArgs),
    /// Execute the built-in invariant checks.
    Check,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seeds; repeatable.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// `synthetic`, or the path of a feature manifest.
    #[arg(long, default_value = "synthetic")]
    pub stream: String,
    /// `csv` or `structured`.
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Save the pipeline state after every task under `<out>/checkpoints`.
    #[arg(long)]
    pub checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the stream seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "stream")]
    pub out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_stream(arg: &str, config: &RunConfig) -> Result<TaskStream> {
    if arg == "synthetic" {
        generate_stream(&config.stream)
    } else {
        import_features(Path::new(arg))
    }
}

fn prepare(args: &RunArgs) -> Result<(RunConfig, TaskStream)> {
    let mut config = load_config(args.config.as_deref())?;
    if !args.seeds.is_empty() {
        config.seeds = args.seeds.clone();
    }
    if let Some(v) = &args.variant {
        config.variant = v.parse()?;
    }
    config.validate()?;
    let stream = load_stream(&args.stream, &config)?;
    Ok((config, stream))
}

fn run_variant(
    stream: &TaskStream,
    config: &RunConfig,
    variant: RunVariant,
    checkpoint_dir: Option<&Path>,
) -> Result<ExperimentResult> {
    use rayon::prelude::*;
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut task = 0usize;
            let save = |state: &crate::pipeline::PipelineState| -> Result<()> {
                task += 1;
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join(format!("{variant}_seed{seed}_task{task}.json"));
                    crate::persist::write_atomic(&path, state.to_json()?.as_bytes())?;
                }
                Ok(())
            };
            Ok(run_stream_with(stream, config, variant, seed, save)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentResult::from_runs(variant, runs)
}

fn run_variants(args: &RunArgs, variants: &[RunVariant]) -> Result<Vec<ExperimentResult>> {
    let (config, stream) = prepare(args)?;
    let format: ReportFormat = args.format.parse()?;
    let checkpoint_dir = if args.checkpoints {
        let dir = args.out.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Some(dir)
    } else {
        None
    };
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let started = Instant::now();
        results.push(run_variant(&stream, &config, variant, checkpoint_dir.as_deref())?);
        info!("{variant}: {} seeds in {:.1?}", config.seeds.len(), started.elapsed());
    }
    for path in emit_report(&results, format, &args.out)? {
        info!("wrote {}", path.display());
    }
    Ok(results)
}

fn print_table(results: &[ExperimentResult]) {
    println!("{:<16} {:>16} {:>16}", "variant", "A_bar", "A_B");
    for r in results {
        println!(
            "{:<16} {:>8.2} ± {:<5.2} {:>8.2} ± {:<5.2}",
            r.variant.name(),
            r.a_bar_mean,
            r.a_bar_std,
            r.a_b_mean,
            r.a_b_std
        );
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.stream.seed = seed;
    }
    let stream = generate_stream(&config.stream)?;
    let manifest = export_stream(&stream, &args.out, RowKind::Inputs)?;
    println!("{}", manifest.display());
    Ok(())
}

fn check() -> Result<()> {
    let report = crate::checks::run_all();
    let mut failed = 0;
    for c in &report {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::InvalidConfig(format!("{failed} invariant checks failed")));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let config = prepare(args)?.0;
            let results = run_variants(args, &[config.variant])?;
            print_table(&results);
        }
        Command::Ablate(args) => {
            let results = run_variants(args, &RunVariant::ALL)?;
            print_table(&results);
        }
        Command::Gen(args) => gen(args)?,
        Command::Check => check()?,
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
