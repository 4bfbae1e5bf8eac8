use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vernet::checkpoint::Checkpoint;
use vernet::cli;
use vernet::config::{ConfigMap, RunConfig};
use vernet::reranker::RankerWeights;

/// Multi-hypothesis quality estimation and reranking for grammatical error
/// correction.
#[derive(Parser)]
#[command(name = "vernet", version)]
struct Args {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; derives the model, training, synthesis and reranking seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Token labels and edits against the gold correction.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hypotheses per group.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Trains a model and writes a checkpoint.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Adds sentence and token scores to every hypothesis.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also report the single-node baseline scores.
        #[arg(long)]
        baselines: bool,
    },
    /// Reorders scored hypotheses with a linear ranker.
    Rerank {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weights file, read or (with --learn) written.
        #[arg(long)]
        weights: PathBuf,
        /// Fit weights on the input with Coordinate Ascent first.
        #[arg(long)]
        learn: bool,
    },
    /// Correction, detection and correlation metrics of the first hypothesis.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn resolve(args: &Args) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => ConfigMap::parse(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ConfigMap::default(),
    };
    let mut flags = ConfigMap::default();
    if let Some(s) = args.seed {
        flags.set("seed", s);
    }
    for o in &args.overrides {
        flags.set_pair(o)?;
    }
    if let Command::Synth { k, groups, .. } = &args.command {
        if let Some(k) = k {
            flags.set("synth.k", k);
        }
        if let Some(g) = groups {
            flags.set("synth.groups", g);
        }
    }
    Ok(RunConfig::resolve(&[&file, &flags])?)
}

/// Number of failed records.
fn run(args: Args) -> Result<usize> {
    let config = resolve(&args)?;
    match &args.command {
        Command::Annotate { input, out } => {
            let o = cli::annotate(&read(input)?, &config)?;
            emit(out.as_deref(), &o.text)?;
            Ok(o.failures)
        }
        Command::Synth { out, .. } => {
            emit(out.as_deref(), &cli::synth(&config)?)?;
            Ok(0)
        }
        Command::Train {
            input,
            dev,
            checkpoint,
            log,
            resume,
        } => {
            let dev_text = dev.as_deref().map(read).transpose()?;
            let prior = if *resume { Some(Checkpoint::load(checkpoint)?) } else { None };
            let o = cli::train(&read(input)?, dev_text.as_deref(), &config, prior)?;
            o.checkpoint.save(checkpoint)?;
            if let Some(l) = log {
                emit(Some(l), &o.log)?;
            }
            Ok(o.failures)
        }
        Command::Score {
            checkpoint,
            input,
            out,
            baselines,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let o = cli::score(&read(input)?, &ck, *baselines)?;
            emit(out.as_deref(), &o.text)?;
            Ok(o.failures)
        }
        Command::Rerank {
            input,
            out,
            weights,
            learn,
        } => {
            let given = if *learn {
                None
            } else {
                Some(RankerWeights::from_tsv(&read(weights)?)?)
            };
            let o = cli::rerank(&read(input)?, &config, given, *learn)?;
            if *learn {
                emit(Some(weights), &o.weights.to_tsv())?;
            }
            if let Some((learned, beam)) = o.objectives {
                log::info!("objective {learned:.6} (beam order {beam:.6})");
            }
            emit(out.as_deref(), &o.output.text)?;
            Ok(o.output.failures)
        }
        Command::Eval { input, out, format } => {
            let (report, failures) = cli::eval(&read(input)?, &config)?;
            let text = match format {
                Format::Text => cli::report_text(&report),
                Format::Json => cli::report_json(&report)?,
            };
            emit(out.as_deref(), &text)?;
            Ok(failures)
        }
        Command::Gradcheck { out } => {
            let report = cli::gradcheck(&config)?;
            let tol = config.gradcheck.tolerance;
            emit(out.as_deref(), &cli::gradcheck_text(&report, tol))?;
            Ok(usize::from(!report.passes(tol)))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VERNET_LOG", "warn")).init();
    match run(Args::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            log::error!("{n} record(s) failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
