use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use csca_cli::bench::{parse_grid, parse_list, run_bench, BenchOptions, DEFAULT_GRID, DEFAULT_GROUPS};
use csca_cli::commands::{self, EvalSplit, TrainArgs};
use csca_core::OpKind;
use csca_pipeline::config::parse_kv_text;
use csca_pipeline::train::eval_csv;
use csca_pipeline::{DatasetSpec, FusionMode, StageConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "csca", version, about = "Cross-modal spatio-channel attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time and count non-local vs SCA attention over a shape grid
    Bench(BenchArgs),
    /// Run every finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Write a synthetic paired-modality dataset
    GenData(GenDataArgs),
    /// Train one fusion variant and write a checkpoint
    Train(TrainCmd),
    /// Count-error metrics of a checkpoint on a dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// comma-separated CxHxW points
    #[arg(long, default_value = DEFAULT_GRID)]
    grid: String,
    /// comma-separated grouping factors
    #[arg(long = "g-factor", default_value = DEFAULT_GROUPS)]
    g_factor: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// matmul worker threads during timing
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// count multiplies only, skip timing
    #[arg(long)]
    ledger_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (stdout if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// corrupt the adjoint of one op (self-test of the checker)
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "csca")]
    mode: FusionMode,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// channels per stage, e.g. 8,16; stride 2 on the first two stages
    #[arg(long)]
    stages: Option<String>,
    /// grouping factor per stage, or one value for all stages
    #[arg(long = "g-factor")]
    g_factor: Option<String>,
    /// key = value network config file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// checkpoint directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 3)]
    l_max: u32,
    #[arg(long, default_value = "test")]
    split: EvalSplit,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn stage_config(cmd: &TrainCmd) -> anyhow::Result<StageConfig> {
    let mut cfg = match &cmd.config {
        Some(p) => StageConfig::from_kv(&parse_kv_text(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?)?,
        None => StageConfig::default(),
    };
    if let Some(s) = &cmd.stages {
        cfg.channels = parse_list(s)?;
        cfg.strides = (0..cfg.channels.len()).map(|i| if i < 2 { 2 } else { 1 }).collect();
        cfg.group_factors = vec![*cfg.group_factors.first().unwrap_or(&1); cfg.channels.len()];
    }
    if let Some(g) = &cmd.g_factor {
        let gs = parse_list(g)?;
        cfg.group_factors = if gs.len() == 1 {
            vec![gs[0]; cfg.channels.len()]
        } else {
            gs
        };
    }
    Ok(cfg)
}

/// `Ok(false)` means the command ran but an asserted invariant failed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Bench(a) => {
            let opts = BenchOptions {
                grid: parse_grid(&a.grid)?,
                groups: parse_list(&a.g_factor)?,
                repeats: if a.ledger_only { 0 } else { a.repeats.max(5) },
                threads: a.threads,
                seed: a.seed,
            };
            let report = run_bench(&opts)?;
            emit(a.out.as_deref(), &report.to_csv())?;
            let checked = report.rows.iter().filter(|r| r.kind == "sca" && r.ledger.is_some()).count();
            eprintln!("FLOP ratio exact on {checked} SCA rows (threads {})", report.threads);
            Ok(true)
        }
        Command::Gradcheck(a) => {
            let fault = match a.corrupt.as_deref() {
                Some(name) => Some(OpKind::from_name(name).with_context(|| format!("unknown op {name:?}"))?),
                None => None,
            };
            let cases = commands::gradcheck(a.seed, fault)?;
            emit(a.out.as_deref(), &commands::gradcheck_table(&cases))?;
            let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).collect();
            for c in &failed {
                eprintln!(
                    "FAIL {}: max relative error {:.3e} > {:.0e}",
                    c.name, c.report.max_rel_error, c.report.tol
                );
            }
            eprintln!("{} of {} gradient cases passed", cases.len() - failed.len(), cases.len());
            Ok(failed.is_empty())
        }
        Command::GenData(a) => {
            let spec = DatasetSpec {
                samples: a.samples,
                train_fraction: a.train_fraction,
                seed: a.seed,
                ..DatasetSpec::default()
            };
            let ds = commands::gen_data(&spec, &a.out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), a.out.display());
            Ok(true)
        }
        Command::Train(a) => {
            let args = TrainArgs {
                dataset: a.dataset.clone(),
                out: a.out.clone(),
                mode: a.mode,
                cfg: stage_config(&a)?,
                opts: TrainOptions {
                    epochs: a.epochs,
                    lr: a.lr,
                    batch_size: a.batch_size,
                    seed: a.seed,
                },
            };
            let s = commands::train(&args)?;
            eprintln!(
                "{}: loss {:.4e} -> {:.4e}, checkpoint in {}",
                a.mode,
                s.log.initial_loss,
                s.log.final_loss,
                a.out.display()
            );
            Ok(true)
        }
        Command::Eval(a) => {
            let rows = commands::eval(&a.checkpoint, &a.dataset, a.l_max, a.split)?;
            emit(a.out.as_deref(), &eval_csv(&rows))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
