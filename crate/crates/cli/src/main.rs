//! `advshield`: train a classifier, attack it, train the purifying
//! autoencoder and evaluate, one subcommand per step.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// A problem with the invocation rather than the run; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "advshield", version, about = "Adversarial attacks and autoencoder purification on MNIST-format data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the CNN classifier and save a checkpoint.
    TrainClassifier(TrainClassifierArgs),
    /// Attack the test split and save the adversarial images as IDX.
    Attack(AttackArgs),
    /// Train the purifying autoencoder against a fixed classifier.
    TrainDefense(TrainDefenseArgs),
    /// Epsilon sweeps, defended accuracy and latency reports.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// `key=value` config file, applied before any flag.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `synthetic`, `mnist`, `fashion` (under $ADVSHIELD_DATA_DIR) or a directory of IDX files.
    #[arg(long)]
    data: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
    /// Classifier checkpoint (default OUT/classifier.ckpt).
    #[arg(long)]
    model: Option<String>,
    /// Use only the first N test images.
    #[arg(long = "limit", value_name = "N")]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Args)]
struct AttackFlags {
    /// fgsm, bim or pgd.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    /// Step size, fixed (`0.015`) or relative to epsilon (`0.1eps`).
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct TrainDefenseArgs {
    #[command(flatten)]
    common: Common,
    /// Attack that makes training inputs, or `none`.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Std-dev of the latent Gaussian noise.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    clean_mix: Option<f64>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    /// Defense checkpoint (default OUT/defense.ckpt).
    #[arg(long)]
    defense: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Sweep epsilon for this attack kind.
    #[arg(long, value_name = "KIND")]
    sweep: Option<String>,
    /// Comma-separated budgets (default: the standard grid for the kind).
    #[arg(long)]
    eps_grid: Option<String>,
    /// Accuracy with and without the defense at one attack setting.
    #[arg(long)]
    defended: bool,
    #[command(flatten)]
    attack: AttackFlags,
    /// Per-image purify+classify latency.
    #[arg(long)]
    latency: bool,
    #[arg(long)]
    latency_batch: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    defense: Option<String>,
}

type Overrides = Vec<(&'static str, Option<String>)>;

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

impl Common {
    fn overrides(&self) -> Overrides {
        vec![
            ("data", self.data.clone()),
            ("out", self.out.clone()),
            ("seed", opt(&self.seed)),
            ("threads", opt(&self.threads)),
            ("model", self.model.clone()),
            ("test_limit", opt(&self.test_limit)),
        ]
    }

    /// Defaults, then the config file, then `--set`, then named flags.
    fn resolve(&self, flags: Overrides) -> Result<RunConfig, Usage> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        for (k, v) in self.overrides().into_iter().chain(flags) {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

impl AttackFlags {
    fn overrides(&self) -> Overrides {
        vec![
            ("kind", self.kind.clone()),
            ("eps", opt(&self.eps)),
            ("alpha", self.alpha.clone()),
            ("steps", opt(&self.steps)),
            ("restarts", opt(&self.restarts)),
        ]
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainClassifier(a) => {
            let cfg = a.common.resolve(vec![
                ("epochs", opt(&a.epochs)),
                ("lr", opt(&a.lr)),
                ("momentum", opt(&a.momentum)),
                ("batch_size", opt(&a.batch_size)),
                ("train_limit", opt(&a.train_limit)),
            ])?;
            commands::train_classifier(&cfg)
        }
        Command::Attack(a) => commands::attack(&a.common.resolve(a.attack.overrides())?),
        Command::TrainDefense(a) => {
            let cfg = a.common.resolve(vec![
                ("recipe", a.attack.clone()),
                ("recipe_eps", opt(&a.eps)),
                ("recipe_alpha", a.alpha.clone()),
                ("recipe_steps", opt(&a.steps)),
                ("sigma", opt(&a.sigma)),
                ("clean_mix", opt(&a.clean_mix)),
                ("bottleneck", opt(&a.bottleneck)),
                ("defense_epochs", opt(&a.epochs)),
                ("defense_lr", opt(&a.lr)),
                ("batch_size", opt(&a.batch_size)),
                ("train_limit", opt(&a.train_limit)),
                ("defense", a.defense.clone()),
            ])?;
            commands::train_defense(&cfg)
        }
        Command::Evaluate(a) => {
            let mut flags = a.attack.overrides();
            flags.extend([
                ("eps_grid", a.eps_grid.clone()),
                ("latency_batch", opt(&a.latency_batch)),
                ("warmup", opt(&a.warmup)),
                ("trials", opt(&a.trials)),
                ("defense", a.defense.clone()),
            ]);
            let cfg = a.common.resolve(flags)?;
            let sweep = match &a.sweep {
                Some(k) => Some(k.parse().map_err(|e| Usage(format!("--sweep: {e}")))?),
                None => None,
            };
            if sweep.is_none() && !a.defended && !a.latency {
                return Err(Usage("evaluate needs at least one of --sweep, --defended, --latency".into()).into());
            }
            commands::evaluate(&cfg, sweep, a.defended, a.latency)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() || matches!(e.downcast_ref(), Some(advshield::Error::InvalidArgument(_))) => {
            eprintln!("error: {e}\n\nRun `advshield --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
