//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kltrace_core::{Error, Result};
use serde_json::Value;

use crate::commands::{self, Context};
use crate::config::{RunConfig, Split};
use crate::log::Logger;

#[derive(Debug, Parser)]
#[command(name = "kltrace", version, about = "Zero-shot flow extraction by perturb-and-track on a toy video model")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run config layered over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<runs-root>/<timestamp>-<digest>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override a config key by dotted path, e.g. `trace.num_masks=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true, default_value = "runs")]
    pub runs_root: PathBuf,
    /// No progress log.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
    Calibration,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
            SplitArg::Calibration => Split::Calibration,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic splits under `<run>/data/`.
    GenData {
        /// Only this split; all configured splits by default.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Fit the patch codebook on the training split.
    FitTokenizer {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split for the held-out reconstruction error; the eval split when present.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train the configured model variant.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Checkpoint to write (and to resume from).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the checkpoint's optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Trace every query of a split and write `records.jsonl`.
    Extract {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Occlusion calibration to apply when the config sets no threshold.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Score `records.jsonl` against the ground truth.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Sweep the ablation grid over one checkpoint per model variant.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Repeatable; defaults to every `checkpoint*` file in the run directory.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Overlays for every record, heatmaps and prediction panels for the first few.
    Plot {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Fit the occlusion threshold on the calibration split.
    CalibrateOcclusion {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::FitTokenizer { .. } => "fit-tokenizer",
            Command::Train { .. } => "train",
            Command::Extract { .. } => "extract",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
            Command::CalibrateOcclusion { .. } => "calibrate-occlusion",
        }
    }
}

/// Config precedence: defaults, then `--config` (or the run directory's
/// stored config), then `--seed`/`--workers`, then each `--set`.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let base = match (&g.config, &g.out) {
        (Some(p), _) => Some(RunConfig::load_value(p)?),
        (None, Some(out)) if out.join("config.json").exists() => Some(RunConfig::load_value(&out.join("config.json"))?),
        _ => None,
    };
    let mut sets = Vec::new();
    if let Some(s) = g.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(w) = g.workers {
        sets.push(format!("workers={w}"));
    }
    sets.extend(g.set.iter().cloned());
    RunConfig::resolve(base, &sets)
}

pub fn run(cli: Cli) -> Result<Value> {
    let cfg = resolve_config(&cli.global)?;
    let run_dir = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| cli.global.runs_root.join(commands::run_dir_name(&cfg)));
    let log = Logger::new(cli.global.quiet);
    log.event(
        "start",
        serde_json::json!({"command": cli.command.name(), "run_dir": run_dir, "config_digest": cfg.digest()}),
    );
    let ctx = Context::new(cfg, run_dir, log)?;
    match cli.command {
        Command::GenData { split } => commands::gen_data(&ctx, split.map(Split::from)),
        Command::FitTokenizer { data, heldout } => commands::fit_tokenizer(&ctx, data, heldout),
        Command::Train {
            data,
            codebook,
            checkpoint,
            resume,
        } => commands::train_model(&ctx, data, codebook, checkpoint, resume),
        Command::Extract {
            data,
            checkpoint,
            codebook,
            calibration,
        } => commands::extract(&ctx, data, checkpoint, codebook, calibration),
        Command::Eval { data, records } => commands::evaluate(&ctx, data, records),
        Command::Ablate {
            data,
            checkpoints,
            codebook,
        } => commands::ablate(&ctx, data, checkpoints, codebook),
        Command::Plot {
            data,
            records,
            checkpoint,
            codebook,
            limit,
        } => commands::plot_run(&ctx, data, records, checkpoint, codebook, limit),
        Command::CalibrateOcclusion {
            data,
            checkpoint,
            codebook,
        } => commands::calibrate(&ctx, data, checkpoint, codebook),
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Malformed { .. } | Error::Io { .. } | Error::Dimension(_) => 3,
        Error::Numerical(_) => 4,
    }
}
