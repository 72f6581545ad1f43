//! Command-line interface.
//!
//! Exit status is 0 on success, 1 on usage errors (unknown verb or flag,
//! missing input file) and 2 when the command itself fails.

pub mod check;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    collect_routing, delta_ppl, delta_ppl_csv, delta_ppl_jsonl, divergence_csv, divergence_report, ternary_coords,
    ternary_csv, Activation, HeatmapMatrix, ValSets,
};
use crate::data::{load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::trainer::{load_checkpoint, run_training, split_corpus, RunConfig, RunOptions, TrainedCheckpoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "moediv", version, about = "Expert divergence learning for toy mixture-of-experts models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Per-layer D_total / D_inter / D_intra on validation sets.
    Decompose(EvalArgs),
    /// Router-row permutation perplexity change at one layer.
    Perturb(PerturbArgs),
    /// Domain-by-expert activation heatmap (or its expert-by-domain inverse).
    Heatmap(HeatmapArgs),
    /// Ternary simplex coordinates of every expert over three domains.
    Ternary(LayerArgs),
    /// Run the invariant suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; every key has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file (one JSON record with `text` and `domain` per line).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the result here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub draws: usize,
    /// Also write per-domain means as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LayerArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// MoE layer to analyse.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub layer: LayerArgs,
    /// Expert rows over domains from selection counts.
    #[arg(long)]
    pub inverse: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require_file(flag: &str, path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: no such file {}", path.display())))
    }
}

/// Parse `argv` (including the program name) and run the command.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

struct Loaded {
    ckpt: TrainedCheckpoint,
    corpus: Corpus,
    valsets: ValSets,
}

fn load_eval(args: &EvalArgs) -> std::result::Result<Loaded, Failure> {
    require_file("--ckpt", &args.ckpt)?;
    require_file("--data", &args.data)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let corpus = load_corpus(&args.data)?;
    let (_, valsets) = split_corpus(&corpus, &ckpt.config)?;
    Ok(Loaded { ckpt, corpus, valsets })
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match command {
        Command::Train(a) => {
            if let Some(c) = &a.config {
                require_file("--config", c)?;
            }
            let mut config = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = &a.data {
                config.data.corpus = Some(d.clone());
            }
            let data = config
                .data
                .corpus
                .clone()
                .ok_or_else(|| Failure::Usage("--data: no corpus given on the command line or in the config".into()))?;
            require_file("--data", &data)?;
            if let Some(v) = &config.data.valset {
                require_file("valset", v)?;
            }
            if let Some(s) = a.seed {
                config.train.seed = s;
            }
            config.validate()?;
            let corpus = load_corpus(&data)?;
            let opts = RunOptions {
                force: a.force,
                resume: a.resume,
                stop_after: None,
            };
            let summary = run_training(&config, &corpus, &a.out, &opts)?;
            writeln!(stdout, "trained {} steps into {}", summary.final_step, a.out.display()).map_err(Error::from)?;
            if let Some(m) = summary.last {
                writeln!(
                    stdout,
                    "final l_lm {:.4} l_lb {:.4} l_ed {:.4} d_inter {:?}",
                    m.losses.l_lm, m.losses.l_lb, m.losses.l_ed, m.d_inter
                )
                .map_err(Error::from)?;
            }
            Ok(EXIT_OK)
        }
        Command::Decompose(a) => {
            let l = load_eval(&a)?;
            let reports = divergence_report(&l.ckpt.model, &l.valsets)?;
            emit(&divergence_csv(&reports), a.out.as_deref(), stdout)?;
            Ok(EXIT_OK)
        }
        Command::Perturb(a) => {
            let l = load_eval(&a.eval)?;
            let r = delta_ppl(&l.ckpt.model, a.layer, &l.valsets, a.seed, a.draws)?;
            let results = [r];
            emit(&delta_ppl_jsonl(&results)?, a.eval.out.as_deref(), stdout)?;
            if let Some(p) = &a.csv {
                std::fs::write(p, delta_ppl_csv(&results)).map_err(Error::from)?;
            }
            Ok(EXIT_OK)
        }
        Command::Heatmap(a) => {
            let l = load_eval(&a.layer.eval)?;
            l.ckpt.model.router(a.layer.layer)?;
            let routing = collect_routing(&l.ckpt.model, &l.valsets)?;
            let h = if a.inverse {
                HeatmapMatrix::inverse(&routing, a.layer.layer, Activation::Hard)?
            } else {
                HeatmapMatrix::activation(&routing, a.layer.layer, Activation::Soft)?
            };
            emit(&h.to_csv(Some(&l.corpus.domains)), a.layer.eval.out.as_deref(), stdout)?;
            Ok(EXIT_OK)
        }
        Command::Ternary(a) => {
            let l = load_eval(&a.eval)?;
            l.ckpt.model.router(a.layer)?;
            let routing = collect_routing(&l.ckpt.model, &l.valsets)?;
            let inv = HeatmapMatrix::inverse(&routing, a.layer, Activation::Hard)?;
            emit(&ternary_csv(&ternary_coords(&inv)?), a.eval.out.as_deref(), stdout)?;
            Ok(EXIT_OK)
        }
        Command::Check(a) => {
            let outcomes = check::run_all(a.seed)?;
            let mut all = true;
            for o in &outcomes {
                all &= o.passed;
                writeln!(stdout, "{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail)
                    .map_err(Error::from)?;
            }
            if all {
                Ok(EXIT_OK)
            } else {
                Err(Failure::Runtime(Error::InvalidArgument("invariant suite failed".into())))
            }
        }
    }
}
