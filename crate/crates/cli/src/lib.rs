//! Command-line driver: every stage of the experiment as a subcommand, plus
//! `pipeline` to run them in order with per-stage resumption.

pub mod config;
pub mod logging;
pub mod record;
pub mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use record::StageRecord;
use stages::{run_stage, Ctx, Stage};

#[derive(Debug, Parser)]
#[command(name = "diffsynth", version, about = "Train classifiers on diffusion-generated images and test them on real ones")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply to absent keys; with
    /// no file at all every setting takes its default.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides the configured output root.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the configured sample fraction.
    #[arg(long, global = true, value_name = "REAL")]
    pub fraction: Option<f64>,
    /// Log to `log.txt` only.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural toy corpus into the data root.
    ToyData,
    /// Draw the stratified sample and write the split manifests.
    Split,
    /// Train the diffusion models on the sampled images.
    TrainDm,
    /// Sample the synthetic dataset from the trained diffusion models.
    Generate,
    /// Cross-validate the classifiers on the synthetic dataset.
    TrainCnn,
    /// Score the selected classifiers on the hold-out images.
    Evaluate,
    /// Explain hold-out predictions with local surrogate models.
    Explain,
    /// Assemble the summary report.
    Report,
    /// Run every stage in order, skipping stages whose outputs are current.
    Pipeline {
        /// Re-run this stage and all later ones even when current.
        #[arg(long, value_name = "NAME")]
        stage: Option<Stage>,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::ToyData => Stage::ToyData,
            Command::Split => Stage::Split,
            Command::TrainDm => Stage::TrainDm,
            Command::Generate => Stage::Generate,
            Command::TrainCnn => Stage::TrainCnn,
            Command::Evaluate => Stage::Evaluate,
            Command::Explain => Stage::Explain,
            Command::Report => Stage::Report,
            Command::Pipeline { .. } => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(f) = cli.fraction {
        cfg.data.fraction = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_current(out: &Path, stage: Stage, fingerprint: &str) -> bool {
    StageRecord::read(out, stage).is_ok_and(|r| r.is_current(out, fingerprint))
}

fn pipeline(ctx: &Ctx<'_>, from: Option<Stage>) -> Result<()> {
    let mut forced = false;
    for stage in Stage::ORDER {
        if stage == Stage::ToyData && ctx.cfg.toy.is_none() {
            continue;
        }
        forced |= from == Some(stage);
        if !forced && is_current(ctx.out, stage, &ctx.fingerprint) {
            log::info!("stage {} is current; skipped", stage.as_str());
            continue;
        }
        // Everything downstream of a re-run stage is stale.
        forced = true;
        run_stage(ctx, stage)?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out.clone();
    logging::attach(&out, !cli.quiet).with_context(|| format!("cannot write to {}", out.display()))?;
    let ctx = Ctx {
        cfg: &cfg,
        out: &out,
        fingerprint: cfg.fingerprint(),
    };
    let result = match (&cli.command, cli.command.stage()) {
        (_, Some(stage)) => run_stage(&ctx, stage),
        (Command::Pipeline { stage }, None) => pipeline(&ctx, *stage),
        (_, None) => unreachable!("only the pipeline has no single stage"),
    };
    logging::detach();
    result
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one diagnostic line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("diffsynth: error: {line}");
            1
        }
    }
}
