//! `confnmt`: train toy translation models with a learned confidence head,
//! score translations, and run the detection and correlation experiments.

mod commands;
mod config;
mod error;
mod experiment;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::ScoreArgs;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::experiment::Kind;
use crate::run_dir::RunDir;

#[derive(Debug, Parser)]
#[command(name = "confnmt", version, about = "Toy-scale lab for learned confidence in translation models")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.lambda0=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (default `$CONFNMT_OUT/<command>-seed<seed>`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, loss log and test split.
    Train(RunArgs),
    /// Force-decode given translations and write per-sentence metrics.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        /// Vocabulary file that must match the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Monte Carlo dropout passes; adds the D-TP/D-Conf/D-Comb columns.
        #[arg(long, value_name = "K")]
        mc: Option<usize>,
        /// Dropout rate of the Monte Carlo passes.
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment harness.
    Experiment {
        #[arg(value_enum)]
        kind: Kind,
        #[command(flatten)]
        run: RunArgs,
        /// Exit nonzero when an acceptance check fails.
        #[arg(long)]
        assert: bool,
        /// Reuse a trained in-domain model (ood and density).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Validate a configuration and print it fully resolved.
    Config(RunArgs),
}

fn load(run: &RunArgs) -> Result<RunConfig> {
    RunConfig::load(run.config.as_deref(), &run.overrides)
}

fn out_dir(run: &RunArgs, cfg: &RunConfig, name: &str) -> PathBuf {
    let explicit = run.out.clone().or_else(|| cfg.output_dir.clone());
    run_dir::resolve(explicit.as_deref(), &format!("{name}-seed{}", cfg.seed))
}

/// Runs `body` in a fresh run directory and always writes the manifest,
/// marking the run failed when `body` errs.
fn in_run_dir<T>(
    root: &std::path::Path,
    command: &str,
    seeds: Vec<u64>,
    config: serde_json::Value,
    body: impl FnOnce(&RunDir) -> Result<T>,
) -> Result<T> {
    let dir = RunDir::create(root)?;
    let result = body(&dir);
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    dir.finish(command, status, seeds, config)?;
    log::info!("wrote {}", dir.root().display());
    result
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(run) => {
            let cfg = load(&run)?;
            let root = out_dir(&run, &cfg, "train");
            in_run_dir(&root, "train", vec![cfg.seed], commands::config_json(&cfg), |dir| commands::train(&cfg, dir))?;
            println!("{}", root.display());
        }
        Command::Score { checkpoint, src, tgt, vocab, mc, dropout, seed, out } => {
            let args = ScoreArgs { checkpoint, src, tgt, vocab, mc, dropout, seed };
            let inputs = commands::prepare_score(&args)?;
            let root = run_dir::resolve(out.as_deref(), &format!("score-seed{seed}"));
            in_run_dir(&root, "score", vec![seed], args.echo(), |dir| commands::score(&args, &inputs, dir))?;
            println!("{}", root.display());
        }
        Command::Experiment { kind, run, assert, checkpoint } => {
            let cfg = load(&run)?;
            let root = out_dir(&run, &cfg, kind.name());
            let checks = in_run_dir(&root, kind.name(), vec![cfg.seed], commands::config_json(&cfg), |dir| {
                experiment::run(kind, &cfg, dir, checkpoint.as_deref())
            })?;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{}", root.display());
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 && (assert || kind.always_gated()) {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Config(run) => {
            let cfg = load(&run)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
