use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lwf_core::fisher::Direction;
use lwf_core::trainer::Strategy;
use lwf_lab::{Lab, LabError, RunConfig, RunSpec};

/// Desk-scale learning-with-forgetting pipeline.
#[derive(Debug, Parser)]
#[command(name = "lwf", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "lwf.toml")]
    config: PathBuf,

    /// Overrides a config key, e.g. `--set train.beta=0.05`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Seeds {
    /// One seed from the config's list; all of them when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Run {
    #[command(flatten)]
    seeds: Seeds,
    #[arg(long)]
    learning: String,
    /// Forgetting domain, or `mixed`. Omit for vanilla fine-tuning.
    #[arg(long)]
    forgetting: Option<String>,
    /// Defaults to `train.strategy`.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Defaults to `train.direction`.
    #[arg(long)]
    direction: Option<Direction>,
    /// Defaults to `train.beta`.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate every domain's train and eval sets.
    Gen,
    /// Train the base model on the mixture of all domains.
    Pretrain(Seeds),
    /// Fine-tune to the learning-task optimum used by the Fisher and FC.
    FitTarget {
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long)]
        learning: String,
    },
    /// Collect the base model's own answers on a forgetting domain.
    Elicit {
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long)]
        forgetting: String,
    },
    /// Estimate the diagonal Fisher at the learning-task optimum.
    Fisher {
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long)]
        learning: String,
    },
    /// Score self-generated candidates by forgetting confidence.
    Score {
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long)]
        learning: String,
        #[arg(long)]
        forgetting: String,
        /// Inner steps; defaults to `fc.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune, optionally with interleaved unlearning.
    Train(Run),
    /// Evaluate a trained run on every domain.
    Eval(Run),
    /// Aggregate the configured runs over seeds into report matrices.
    Report,
    /// Sweep strategies, FC direction and beta; summarize the accuracy changes.
    Ablate,
    /// Every command in order, then the report.
    All,
}

fn seeds(lab: &Lab, s: &Seeds) -> Vec<u64> {
    match s.seed {
        Some(seed) => vec![seed],
        None => lab.cfg.seeds.clone(),
    }
}

fn run_spec(lab: &Lab, r: &Run) -> RunSpec {
    let t = &lab.cfg.train;
    match &r.forgetting {
        None => RunSpec::vanilla(&r.learning),
        Some(f) => {
            let spec = RunSpec {
                learning: r.learning.clone(),
                forgetting: Some(f.clone()),
                strategy: r.strategy.unwrap_or(t.strategy),
                direction: r.direction.unwrap_or(t.direction),
                beta: r.beta.unwrap_or(t.beta),
            };
            if spec.is_vanilla() {
                RunSpec::vanilla(&r.learning)
            } else {
                spec
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<(), LabError> {
    let lab = Lab::new(RunConfig::load(&cli.config, &cli.overrides)?);
    match &cli.command {
        Command::Gen => lab.gen()?,
        Command::Pretrain(s) => {
            for seed in seeds(&lab, s) {
                lab.pretrain(seed)?;
            }
        }
        Command::FitTarget { seeds: s, learning } => {
            for seed in seeds(&lab, s) {
                lab.fit_target(seed, learning)?;
            }
        }
        Command::Elicit { seeds: s, forgetting } => {
            for seed in seeds(&lab, s) {
                lab.elicit(seed, forgetting)?;
            }
        }
        Command::Fisher { seeds: s, learning } => {
            for seed in seeds(&lab, s) {
                lab.fisher(seed, learning)?;
            }
        }
        Command::Score {
            seeds: s,
            learning,
            forgetting,
            steps,
        } => {
            for seed in seeds(&lab, s) {
                let path = lab.score(seed, learning, forgetting, *steps)?;
                println!("{}", path.display());
            }
        }
        Command::Train(r) => {
            let spec = run_spec(&lab, r);
            for seed in seeds(&lab, &r.seeds) {
                let name = lab.train(seed, &spec)?;
                println!("seed {seed}: {name}");
            }
        }
        Command::Eval(r) => {
            let spec = run_spec(&lab, r);
            for seed in seeds(&lab, &r.seeds) {
                let report = lab.eval(seed, &spec)?;
                for (domain, e) in &report.domains {
                    println!("seed {seed} {} {domain}: accuracy {:.4}", spec.name(), e.accuracy);
                }
            }
        }
        Command::Report => print!("{}", lab.report()?.matrix.to_text()),
        Command::Ablate => print!("{}", lab.ablate()?.to_text()),
        Command::All => print!("{}", lab.run_all()?.matrix.to_text()),
    }
    Ok(())
}

/// First non-empty line, so every diagnostic fits on one line.
fn one_line(msg: &str) -> &str {
    msg.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or(msg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("lwf: {}", one_line(&e.to_string()).trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lwf: {}", one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
