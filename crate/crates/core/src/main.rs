use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cryoprompt::harness::{
    cmd_ablate_depth, cmd_adapt, cmd_compare, cmd_eval, cmd_generate, cmd_pretrain, cmd_stability, cmd_sweep,
    compare_table, ExperimentSpec,
};
use cryoprompt::{Error, Result};

#[derive(Parser)]
#[command(name = "cryoprompt", version, about = "Prompt-based adaptation of a frozen ViT segmenter on synthetic micrographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to --out.
    Generate(Opts),
    /// Pretrain a backbone on the source dataset in --data.
    Pretrain(Opts),
    /// Adapt one strategy to the target dataset and evaluate it.
    Adapt(Opts),
    /// Per-image hard Dice of a model or of saved predictions.
    Eval(Opts),
    /// Train every strategy at every training-set size.
    Sweep(Opts),
    /// Vary the prompted blocks of a prefix or encoder prompt.
    AblateDepth(Opts),
    /// Repeat adaptation over several rounds and report Dice variance.
    Stability(Opts),
    /// Run all strategies on one shared split.
    Compare(Opts),
}

/// Every flag is also accepted as `key=value` in the --config file.
#[derive(Args)]
struct Opts {
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra setting such as `backbone.layers=2` or `gen.noise=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    prefix_tokens: Option<String>,
    #[arg(long)]
    adapter_dim: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    head_channels: Option<String>,
    #[arg(long)]
    train_size: Option<String>,
    #[arg(long)]
    train_sizes: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    val_size: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    fixed_subset: bool,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    strategy_checkpoint: Option<String>,
    #[arg(long)]
    predictions: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    plateau_factor: Option<String>,
    #[arg(long)]
    smooth: Option<String>,
}

impl Opts {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::default();
        if let Some(path) = &self.config {
            spec.apply_file(path)?;
        }
        let flags = [
            ("preset", &self.preset),
            ("strategy", &self.strategy),
            ("strategies", &self.strategies),
            ("depths", &self.depths),
            ("prefix_tokens", &self.prefix_tokens),
            ("adapter_dim", &self.adapter_dim),
            ("alpha", &self.alpha),
            ("head_channels", &self.head_channels),
            ("train_size", &self.train_size),
            ("train_sizes", &self.train_sizes),
            ("test_size", &self.test_size),
            ("val_size", &self.val_size),
            ("rounds", &self.rounds),
            ("seed", &self.seed),
            ("count", &self.count),
            ("domain", &self.domain),
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("strategy_checkpoint", &self.strategy_checkpoint),
            ("predictions", &self.predictions),
            ("out", &self.out),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("pretrain_epochs", &self.pretrain_epochs),
            ("batch_size", &self.batch_size),
            ("patience", &self.patience),
            ("plateau_factor", &self.plateau_factor),
            ("smooth", &self.smooth),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                spec.set(key, v)?;
            }
        }
        if self.fixed_subset {
            spec.fixed_subset = true;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            spec.set(k, v)?;
        }
        Ok(spec)
    }
}

fn print_rows(rows: &[cryoprompt::harness::ResultRow]) {
    for r in rows {
        println!(
            "{:<9} depths {:<8} size {:>3} round {:>2}  mean Dice {:.4}  variance {:.5}  params {}",
            r.strategy, r.depths, r.train_size, r.round, r.mean, r.variance, r.trainable_params
        );
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(o) => {
            let m = cmd_generate(&o.spec()?)?;
            println!("generated {} {} samples", m.len(), m.domain);
        }
        Command::Pretrain(o) => {
            let s = cmd_pretrain(&o.spec()?)?;
            println!("checkpoint {} (best epoch {}, loss {:.4})", s.checkpoint.display(), s.best_epoch, s.best_loss);
            if let Some(v) = s.val_dice {
                println!("source validation mean Dice {v:.4}");
            }
        }
        Command::Adapt(o) => print_rows(&[cmd_adapt(&o.spec()?)?]),
        Command::Eval(o) => {
            let scores = cmd_eval(&o.spec()?)?;
            let d: Vec<f64> = scores.iter().map(|(_, d)| *d).collect();
            println!(
                "{} images  mean Dice {:.4}  variance {:.5}",
                d.len(),
                cryoprompt::harness::mean(&d),
                cryoprompt::harness::variance(&d)
            );
        }
        Command::Sweep(o) => print_rows(&cmd_sweep(&o.spec()?)?),
        Command::AblateDepth(o) => print_rows(&cmd_ablate_depth(&o.spec()?)?),
        Command::Stability(o) => {
            let (_, reports) = cmd_stability(&o.spec()?)?;
            for r in reports {
                println!("{:<9} mean per-sample variance {:.5}", r.strategy, r.mean_variance);
            }
        }
        Command::Compare(o) => print!("{}", compare_table(&cmd_compare(&o.spec()?)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
