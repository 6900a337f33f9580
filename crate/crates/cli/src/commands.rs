//! The work behind each subcommand, kept free of argument parsing so tests
//! can drive it directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use csca_core::gradsuite::{attention_suite, cfa_suite, tensor_op_suite, CaseResult};
use csca_core::OpKind;
use csca_pipeline::gradsuite::network_suite;
use csca_pipeline::train::{eval_csv, evaluate, find_row, EvalRow};
use csca_pipeline::{
    train_with, Dataset, DatasetSpec, FusionMode, Network, Sample, Split, StageConfig, SynthParams, TrainLog,
    TrainOptions,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};

pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const EVAL_FILE: &str = "eval.csv";

pub fn gen_data(spec: &DatasetSpec, out: &Path) -> anyhow::Result<Dataset> {
    let ds = Dataset::generate(spec, &SynthParams::default())?;
    ds.save(out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    Ok(ds)
}

/// Every finite-difference suite in 64-bit; `fault` corrupts one op's adjoint.
pub fn gradcheck(seed: u64, fault: Option<OpKind>) -> anyhow::Result<Vec<CaseResult>> {
    let mut all = tensor_op_suite(seed, fault)?;
    all.extend(attention_suite(seed, fault)?);
    all.extend(cfa_suite(seed, fault)?);
    all.extend(network_suite(seed, fault)?);
    Ok(all)
}

pub fn gradcheck_table(cases: &[CaseResult]) -> String {
    let mut out = String::from("suite,case,max_rel_error,tol,status\n");
    for c in cases {
        let _ = writeln!(
            out,
            "{},{},{:.3e},{:.0e},{}",
            c.suite,
            c.name,
            c.report.max_rel_error,
            c.report.tol,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub mode: FusionMode,
    pub cfg: StageConfig,
    pub opts: TrainOptions,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub eval: Vec<EvalRow>,
}

pub fn check_compatible(net: &Network<f32>, spec: &DatasetSpec) -> anyhow::Result<()> {
    let cfg = &net.cfg;
    if (cfg.in_channels, cfg.height, cfg.width) != (spec.channels, spec.height, spec.width) {
        bail!(csca_core::Error::Config(format!(
            "network expects {}×{}×{} inputs but the dataset holds {}×{}×{}",
            cfg.in_channels, cfg.height, cfg.width, spec.channels, spec.height, spec.width
        )));
    }
    if cfg.output_extents() != (spec.out_height, spec.out_width) {
        let (h, w) = cfg.output_extents();
        bail!(csca_core::Error::Config(format!(
            "network predicts {h}×{w} densities but the dataset holds {}×{}",
            spec.out_height, spec.out_width
        )));
    }
    Ok(())
}

/// Trains on the dataset's train split, logging per-epoch loss and
/// held-out MAE/RMSE, then writes the checkpoint, log and test metrics.
pub fn train(args: &TrainArgs) -> anyhow::Result<TrainSummary> {
    let ds = Dataset::load(&args.dataset)
        .with_context(|| format!("reading dataset {}", args.dataset.display()))?;
    let cfg = StageConfig {
        in_channels: ds.spec.channels,
        height: ds.spec.height,
        width: ds.spec.width,
        ..args.cfg.clone()
    };
    let mut net = Network::<f32>::new(&cfg, args.mode, args.opts.seed)?;
    check_compatible(&net, &ds.spec)?;
    let train_set: Vec<&Sample<f32>> = ds.split(Split::Train);
    let test_set: Vec<&Sample<f32>> = ds.split(Split::Test);
    if train_set.is_empty() {
        bail!("dataset {} has no training samples", args.dataset.display());
    }
    let mut text = format!(
        "mode {} seed {} epochs {} lr {} batch {} train {} test {}\n",
        args.mode,
        args.opts.seed,
        args.opts.epochs,
        args.opts.lr,
        args.opts.batch_size,
        train_set.len(),
        test_set.len()
    );
    let log = train_with(&mut net, &train_set, &args.opts, |epoch, loss, net| {
        let _ = write!(text, "epoch {} loss {loss:.6e}", epoch + 1);
        if !test_set.is_empty() {
            let rows = evaluate(net, &test_set, 0)?;
            let get = |m| find_row(&rows, "all", m).map_or(f64::NAN, |r| r.value);
            let _ = write!(text, " test_mae {:.4} test_rmse {:.4}", get("mae"), get("rmse"));
        }
        text.push('\n');
        Ok(())
    })?;
    let _ = writeln!(
        text,
        "initial_loss {:.6e} final_loss {:.6e}",
        log.initial_loss, log.final_loss
    );
    save_checkpoint(&args.out, &net, args.opts.seed)?;
    fs::write(args.out.join(TRAIN_LOG_FILE), &text)?;
    let eval = if test_set.is_empty() {
        Vec::new()
    } else {
        evaluate(&net, &test_set, 3)?
    };
    fs::write(args.out.join(EVAL_FILE), eval_csv(&eval))?;
    Ok(TrainSummary { log, eval })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl std::str::FromStr for EvalSplit {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            "all" => Ok(EvalSplit::All),
            _ => bail!("unknown split {s:?}, expected train, test or all"),
        }
    }
}

pub fn eval(checkpoint: &Path, dataset: &Path, l_max: u32, split: EvalSplit) -> anyhow::Result<Vec<EvalRow>> {
    let net = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    check_compatible(&net, &ds.spec)?;
    let samples: Vec<&Sample<f32>> = match split {
        EvalSplit::Train => ds.split(Split::Train),
        EvalSplit::Test => ds.split(Split::Test),
        EvalSplit::All => ds.samples.iter().collect(),
    };
    if samples.is_empty() {
        bail!("the selected split of {} is empty", dataset.display());
    }
    Ok(evaluate(&net, &samples, l_max)?)
}
