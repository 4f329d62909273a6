//! Command-line front end: data generation, training, evaluation, rollouts,
//! enclave maps, robustness sweeps and gradient checks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, DataSection, ModelSection, RunConfig, Scale, TrainSection};

#[derive(Parser)]
#[command(name = "s2rm", version, about = "Spatially structured recurrent modules on bouncing-ball videos")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (1 = fully sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Preset for every unset value.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train, validation and per-ball-count test datasets.
    GenData(GenArgs),
    /// Train a model; writes ckpt.bin and epochs.csv.
    Train {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// One-step evaluation on the test sets; writes metrics.csv.
    Eval {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Fraction of views dropped at every step.
        #[arg(long)]
        drop: Option<f64>,
    },
    /// Dropped-view sweep over the test sets; writes metrics.csv.
    Robustness {
        #[command(flatten)]
        paths: PathArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated drop fractions.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// 20 prompt + 25 feedback steps on a fresh episode; writes rollout_t021..045.pgm.
    Rollout {
        #[command(flatten)]
        eval: EvalArgs,
        /// Balls in the rollout episode.
        #[arg(long)]
        balls: Option<usize>,
    },
    /// Writes one kernel map per module, enclave_m{i}.pgm.
    Enclaves {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Runs the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seqs: Option<usize>,
    #[arg(long)]
    val_seqs: Option<usize>,
    #[arg(long)]
    test_seqs: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// Balls in the training and validation sets.
    #[arg(long)]
    balls: Option<usize>,
    /// Comma-separated ball counts of the test sets.
    #[arg(long, value_delimiter = ',')]
    test_balls: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PathArgs {
    /// Directory with train.bin, val.bin and test_b{k}.bin.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train_set: Option<PathBuf>,
    #[arg(long)]
    val_set: Option<PathBuf>,
    /// Test dataset files (repeatable); defaults to the data directory's test sets.
    #[arg(long = "test")]
    tests: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct ModelArgs {
    /// s2gru, baseline-gru, baseline-lstm or tto.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Seed of the batch order.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// model, constant, copy-previous or oracle.
    #[arg(long)]
    predictor: Option<String>,
    /// Seed of view subsampling and rollout centers.
    #[arg(long)]
    seed: Option<u64>,
}

impl Cli {
    /// Flag values as a partial configuration.
    fn overrides(&self) -> RunConfig {
        let mut c = RunConfig { scale: self.scale, out: self.out.clone(), threads: self.threads, ..Default::default() };
        let paths = |c: &mut RunConfig, p: &PathArgs| {
            c.data.dir = p.data.clone();
            c.data.train = p.train_set.clone();
            c.data.val = p.val_set.clone();
            c.data.tests = p.tests.clone();
        };
        let eval = |c: &mut RunConfig, e: &EvalArgs| {
            c.eval.checkpoint = e.checkpoint.clone();
            c.eval.predictor = e.predictor.clone();
            c.eval.seed = e.seed;
        };
        match &self.command {
            Command::GenData(g) => {
                c.data = DataSection {
                    seqs: g.seqs,
                    val_seqs: g.val_seqs,
                    test_seqs: g.test_seqs,
                    frames: g.frames,
                    views: g.views,
                    balls: g.balls,
                    test_balls: g.test_balls.clone(),
                    seed: g.seed,
                    ..Default::default()
                }
            }
            Command::Train { paths: p, model, train } => {
                paths(&mut c, p);
                c.model = ModelSection {
                    kind: model.kind.clone(),
                    modules: model.modules,
                    hidden: model.hidden,
                    seed: model.model_seed,
                    ..Default::default()
                };
                c.train = TrainSection {
                    epochs: train.epochs,
                    lr: train.lr,
                    batch: train.batch,
                    seed: train.seed,
                    ..Default::default()
                };
            }
            Command::Eval { paths: p, eval: e, drop } => {
                paths(&mut c, p);
                eval(&mut c, e);
                c.eval.drop = *drop;
            }
            Command::Robustness { paths: p, eval: e, fractions } => {
                paths(&mut c, p);
                eval(&mut c, e);
                c.eval.fractions = fractions.clone();
            }
            Command::Rollout { eval: e, balls } => {
                eval(&mut c, e);
                c.eval.rollout_balls = *balls;
            }
            Command::Enclaves { eval: e } => eval(&mut c, e),
            Command::Gradcheck => {}
        }
        c
    }
}

/// Failure classes and their exit codes.
pub enum Failure {
    /// Exit code 1.
    Runtime(anyhow::Error),
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if let Some(c) = e.downcast_ref::<ConfigError>() {
            return Failure::Config(c.0.clone());
        }
        if let Some(s2rm::Error::Config(msg)) = e.downcast_ref::<s2rm::Error>() {
            return Failure::Config(msg.clone());
        }
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<s2rm::Error> for Failure {
    fn from(e: s2rm::Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.merged(&cli.overrides())?.resolved()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(anyhow::anyhow!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Robustness { .. } => commands::robustness(&cfg),
        Command::Rollout { .. } => commands::rollout(&cfg),
        Command::Enclaves { .. } => commands::enclaves(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
