//! Experiment runner: config-driven training, multi-node simulation,
//! estimation-error analysis, kernel benchmarks, and the decay-rate sweep.
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 configuration rejected
//! (diagnostic names the field), 3 a run diverged (artifacts still written).

use clap::{Args, Parser, Subcommand};
use sbn::error::Error;
use sbn::report::merge_csv;
use sbn::runner::{
    self, AnalyzeFileConfig, BenchFileConfig, DecayFileConfig, MicrobnFileConfig, RunStatus,
    TrainFileConfig,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbn", version, about = "Sampled batch normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a sampling strategy and/or virtual samples.
    Train(RunArgs),
    /// Train with the batch sharded across simulated nodes.
    Microbn(RunArgs),
    /// Time the statistics kernel over a grid of shapes and ratios.
    Bench(RunArgs),
    /// Record estimation errors and inter-layer correlations per strategy.
    Analyze(RunArgs),
    /// Sweep the moving-average decay rate.
    DecaySweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file for this command.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fan independent seeds out to this many worker processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train(args) => seeded_command::<TrainFileConfig>(
            "train",
            &args,
            |cfg| &mut cfg.seeds,
            runner::run_train,
            &["metrics.csv", "errors.csv", "corr.csv"],
        ),
        Command::Microbn(args) => seeded_command::<MicrobnFileConfig>(
            "microbn",
            &args,
            |cfg| &mut cfg.seeds,
            runner::run_microbn_cmd,
            &["metrics.csv"],
        ),
        Command::Analyze(args) => seeded_command::<AnalyzeFileConfig>(
            "analyze",
            &args,
            |cfg| &mut cfg.seeds,
            runner::run_analyze,
            &["errors.csv", "corr.csv"],
        ),
        Command::DecaySweep(args) => seeded_command::<DecayFileConfig>(
            "decay-sweep",
            &args,
            |cfg| &mut cfg.seeds,
            runner::run_decay_sweep,
            &["decay.csv"],
        ),
        Command::Bench(args) => {
            let out = out_dir(&args, "bench");
            match runner::load_toml::<BenchFileConfig>(&args.config)
                .and_then(|cfg| runner::run_bench(&cfg, &out))
            {
                Ok(_) => 0,
                Err(e) => report_error(&e),
            }
        }
    };
    ExitCode::from(code)
}

fn out_dir(args: &RunArgs, command: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

/// Seed override precedence: --seed, then SBN_SEED, then the config list.
fn effective_seed(args: &RunArgs) -> Option<u64> {
    if let Some(seed) = args.seed {
        return Some(seed);
    }
    std::env::var("SBN_SEED").ok().and_then(|s| s.parse().ok())
}

fn report_error(e: &Error) -> u8 {
    eprintln!("error: {e}");
    match e {
        Error::InvalidParam { .. } => 2,
        _ => 1,
    }
}

fn status_code(status: RunStatus) -> u8 {
    match status {
        RunStatus::Success => 0,
        RunStatus::Diverged => {
            eprintln!("warning: at least one run diverged (see manifest detail)");
            3
        }
    }
}

fn seeded_command<C>(
    name: &str,
    args: &RunArgs,
    seeds_of: fn(&mut C) -> &mut Vec<u64>,
    run: fn(&C, &Path) -> sbn::Result<RunStatus>,
    csv_files: &[&str],
) -> u8
where
    C: DeserializeOwned + Serialize + Clone,
{
    let out = out_dir(args, name);
    let mut cfg: C = match runner::load_toml(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => return report_error(&e),
    };
    if let Some(seed) = effective_seed(args) {
        *seeds_of(&mut cfg) = vec![seed];
    }
    let seeds = seeds_of(&mut cfg).clone();
    if args.jobs > 1 && seeds.len() > 1 {
        return fan_out(name, args, &cfg, &seeds, &out, csv_files);
    }
    match run(&cfg, &out) {
        Ok(status) => status_code(status),
        Err(e) => report_error(&e),
    }
}

/// One worker process per seed, at most `jobs` alive at a time, each writing
/// into its own subdirectory; per-seed CSVs are then merged in seed order so
/// the merged artifacts match a serial run byte for byte.
fn fan_out<C: Serialize>(
    name: &str,
    args: &RunArgs,
    cfg: &C,
    seeds: &[u64],
    out: &Path,
    csv_files: &[&str],
) -> u8 {
    let exe = match std::env::current_exe() {
        Ok(exe) => exe,
        Err(e) => {
            eprintln!("error: cannot locate worker executable: {e}");
            return 1;
        }
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: {e}");
        return 1;
    }
    let mut worst: u8 = 0;
    let mut pending: Vec<(u64, std::process::Child)> = Vec::new();
    let mut queue: std::collections::VecDeque<u64> = seeds.iter().copied().collect();
    while !queue.is_empty() || !pending.is_empty() {
        while pending.len() < args.jobs {
            let Some(seed) = queue.pop_front() else { break };
            let child = std::process::Command::new(&exe)
                .arg(name)
                .arg("--config")
                .arg(&args.config)
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--out")
                .arg(out.join(format!("seed_{seed}")))
                .spawn();
            match child {
                Ok(child) => pending.push((seed, child)),
                Err(e) => {
                    eprintln!("error: spawning worker for seed {seed}: {e}");
                    return 1;
                }
            }
        }
        if let Some((seed, mut child)) = pending.pop() {
            match child.wait() {
                Ok(status) => {
                    let code = status.code().unwrap_or(1).clamp(0, 255) as u8;
                    if code != 0 {
                        eprintln!("worker for seed {seed} exited with {code}");
                    }
                    worst = worst.max(code);
                }
                Err(e) => {
                    eprintln!("error: waiting on worker for seed {seed}: {e}");
                    return 1;
                }
            }
        }
    }
    for file in csv_files {
        let sources: Vec<PathBuf> = seeds
            .iter()
            .map(|s| out.join(format!("seed_{s}")).join(file))
            .filter(|p| p.exists())
            .collect();
        if sources.is_empty() {
            continue;
        }
        if let Err(e) = merge_csv(&out.join(file), &sources) {
            eprintln!("error: merging {file}: {e}");
            return 1;
        }
    }
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    if let Err(e) = runner::write_command_manifest(name, &config_json, out) {
        eprintln!("error: writing manifest: {e}");
        return 1;
    }
    worst
}
