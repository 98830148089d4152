use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncv_core::harness::{self, ExperimentConfig};
use ncv_core::nn::AgentRole;
use ncv_core::{NcvError, Result};

/// Merlin-Arthur concept verifier: data generation, training and evaluation.
#[derive(Parser)]
#[command(name = "ncv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON, or a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in experiment used when no config file is given.
    #[arg(long, default_value = "hans3-analog")]
    preset: String,
    /// Dot-path override such as `game.gamma=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides both the dataset and the game seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("dataset.seed={seed}"));
            overrides.push(format!("game.seed={seed}"));
        }
        base.with_overrides(&overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset bundle (or one per clean ratio of a grid).
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the three agents on a bundle.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on every split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also enumerate every mask for the exhaustive soundness bound.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Train and score every cell of the configured grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export certificates for selected samples as JSONL.
    Explain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use Morgana's selections instead of Merlin's.
        #[arg(long)]
        morgana: bool,
    },
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg } => {
            let config = cfg.resolve()?;
            let out = harness::generate(&config, &cfg.out)?;
            for (dir, report) in out.dirs.iter().zip(&out.reports) {
                eprintln!("wrote {}", dir.display());
                print_json(report)?;
            }
        }
        Command::Train { cfg, data } => {
            let config = cfg.resolve()?;
            let out = harness::train(&config, &data, &cfg.out)?;
            print_json(&out.train)?;
            if let Some(val) = &out.val {
                print_json(val)?;
            }
        }
        Command::Eval {
            cfg,
            data,
            checkpoint,
            exhaustive,
        } => {
            let config = cfg.resolve()?;
            let out = harness::eval(&config, &data, &checkpoint, exhaustive, &cfg.out)?;
            print_json(&out)?;
        }
        Command::Sweep { cfg } => {
            let config = cfg.resolve()?;
            let out = harness::sweep(&config, &cfg.out)?;
            emit(&std::fs::read_to_string(cfg.out.join(harness::TABLE_FILE))?)?;
            for (name, err) in &out.failures {
                eprintln!("run {name} failed: {err}");
            }
            out.check()?;
        }
        Command::Explain {
            cfg,
            data,
            checkpoint,
            ids,
            split,
            morgana,
        } => {
            let config = cfg.resolve()?;
            let prover = if morgana { AgentRole::Morgana } else { AgentRole::Merlin };
            let out = harness::explain(&config, &data, &checkpoint, &split, &ids, prover, &cfg.out)?;
            for id in &out.skipped {
                eprintln!("warning: sample id {id} is outside the {split} split; skipped");
            }
            eprintln!(
                "wrote {} certificates to {}",
                out.records.len(),
                cfg.out.join(harness::CERTIFICATES_FILE).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &NcvError) -> u8 {
    e.exit_code() as u8
}
