use std::io;
use std::path::{Path, PathBuf};

use confnmt::data::{load_parallel_text, write_parallel_text, ParallelCorpus, Vocab};
use confnmt::evaluation::{write_csv, write_json, ScoredSentence, Summary, REPORT_SCHEMA_VERSION};
use confnmt::inference::{force_decode_batch, mc_passes_batch, ForcedScore};
use confnmt::model::{Checkpoint, ModelError};
use confnmt::numerics::RngState;
use confnmt::training::{token_accuracy, TrainOutputs};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run_dir::RunDir;

pub fn summary(experiment: &str, config: serde_json::Value, metrics: serde_json::Value, seeds: Vec<u64>) -> Summary {
    Summary { schema_version: REPORT_SCHEMA_VERSION, experiment: experiment.to_string(), config, metrics, seeds }
}

pub fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config serialises to JSON")
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, vocab.tokens().join("\n") + "\n")?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Loads a checkpoint; a missing file is a usage error, anything else an
/// artifact mismatch.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        ModelError::Io(ref io) if io.kind() == io::ErrorKind::NotFound => {
            CliError::Config(format!("{}: no such checkpoint", path.display()))
        }
        e => CliError::Mismatch(format!("{}: {e}", path.display())),
    })
}

/// Trains on the configured task and writes the final checkpoint, the loss
/// log, the vocabulary and the held-out test split.
pub fn train(cfg: &RunConfig, dir: &RunDir) -> Result<serde_json::Value> {
    let setup = cfg.setup();
    let train = setup.train_corpus()?;
    let test = setup.test_corpus()?;
    std::fs::write(dir.file("config.toml"), cfg.to_toml())?;
    write_vocab(&dir.file("vocab.txt"), train.vocab())?;
    write_parallel_text(&test, &dir.file("test.src"), &dir.file("test.tgt"))?;

    let outputs = TrainOutputs {
        log: Some(dir.file("train_log.jsonl")),
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| dir.file("checkpoints")),
    };
    let (model, outcome) = setup.train_on(&train, &outputs)?;
    let test_accuracy = token_accuracy(&model, &test, 64)?;
    let last = outcome.records.last();
    let ckpt = Checkpoint { model, vocab: train.vocab().clone(), step: cfg.train.total_steps as u64 };
    ckpt.save(&dir.file("model.ckpt"))?;
    log::info!("test token accuracy {test_accuracy:.4}");

    let metrics = json!({
        "steps": cfg.train.total_steps,
        "test_token_accuracy": test_accuracy,
        "final_l_nmt": last.map(|r| r.l_nmt),
        "final_mean_confidence": last.and_then(|r| r.mean_confidence),
    });
    write_json(&dir.file("summary.json"), &summary("train", config_json(cfg), metrics.clone(), vec![cfg.seed]))?;
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub vocab: Option<PathBuf>,
    pub mc: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl ScoreArgs {
    pub fn echo(&self) -> serde_json::Value {
        json!({
            "checkpoint": self.checkpoint,
            "src": self.src,
            "tgt": self.tgt,
            "vocab": self.vocab,
            "mc": self.mc,
            "dropout": self.dropout,
            "seed": self.seed,
        })
    }
}

/// Validated inputs of a scoring run, loaded before any file is written.
pub struct ScoreInputs {
    pub checkpoint: Checkpoint,
    pub corpus: ParallelCorpus,
}

pub fn prepare_score(args: &ScoreArgs) -> Result<ScoreInputs> {
    if args.mc == Some(0) {
        return Err(CliError::Config("--mc needs at least one pass".into()));
    }
    if !(0.0..1.0).contains(&args.dropout) {
        return Err(CliError::Config(format!("--dropout {} must lie in [0, 1)", args.dropout)));
    }
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    if let Some(v) = &args.vocab {
        let tokens = read_vocab(v)?;
        if tokens.as_slice() != checkpoint.vocab.tokens() {
            return Err(CliError::Mismatch(format!(
                "vocabulary {} ({} tokens) differs from the checkpoint's ({} tokens)",
                v.display(),
                tokens.len(),
                checkpoint.vocab.len()
            )));
        }
    }
    let (corpus, report) = load_parallel_text(&args.src, &args.tgt, Some(&checkpoint.vocab), 0)?;
    if report.skipped_empty > 0 {
        return Err(CliError::Config(format!("{} input line pair(s) have an empty side", report.skipped_empty)));
    }
    if report.unk_tokens > 0 {
        log::warn!("{} of {} input tokens are unknown to the checkpoint", report.unk_tokens, report.total_tokens);
    }
    Ok(ScoreInputs { checkpoint, corpus })
}

/// Force-decodes the given translations and writes one metric row per
/// sentence; the D-family columns are filled only with `--mc`.
pub fn score(args: &ScoreArgs, inputs: &ScoreInputs, dir: &RunDir) -> Result<serde_json::Value> {
    let model = &inputs.checkpoint.model;
    let (srcs, tgts): (Vec<&[usize]>, Vec<&[usize]>) =
        inputs.corpus.pairs().iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).unzip();
    let forced = force_decode_batch(model, &srcs, &tgts)?;
    let passes = match args.mc {
        Some(k) => Some(mc_passes_batch(model, &srcs, &tgts, k, args.dropout, &RngState::new(args.seed))?),
        None => None,
    };
    let rows = forced
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let per: Option<Vec<&ForcedScore>> = passes.as_ref().map(|ps| ps.iter().map(|pass| &pass[i]).collect());
            ScoredSentence::new(i, f, per.as_deref(), None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_csv(&dir.file("scores.csv"), &rows)?;

    let mean = |f: fn(&ScoredSentence) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let metrics = json!({
        "sentences": rows.len(),
        "unk_rate": inputs.corpus.unk_rate(),
        "mean_tp": mean(|r| r.tp),
        "mean_conf": mean(|r| r.conf),
        "mc_passes": args.mc,
    });
    write_json(&dir.file("summary.json"), &summary("score", args.echo(), metrics.clone(), vec![args.seed]))?;
    Ok(metrics)
}
