use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::loss::BatchLoss;
use super::optim::{learning_rate, Adam};
use super::{Result, TrainError, TrainSchedule, Trainable};
use crate::data::{make_batches, Batch, ParallelCorpus};
use crate::model::{Checkpoint, SeqModel, TeacherForced};
use crate::numerics::{NumericsError, ParamId, RngState};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_nmt: f64,
    pub l_conf: f64,
    pub lambda: f64,
    pub l_total: f64,
    pub mean_confidence: Option<f64>,
    pub token_accuracy: f64,
    pub learning_rate: f64,
}

/// Where training writes its artifacts; nothing is written when unset.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Correct and total teacher-forced argmax predictions.
fn batch_hits(probs: &[f32], targets: &[usize], mask: &[bool]) -> (usize, usize) {
    let v = probs.len() / targets.len();
    let mut hits = 0;
    let mut total = 0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total += 1;
            hits += (argmax(&probs[r * v..(r + 1) * v]) == t) as usize;
        }
    }
    (hits, total)
}

/// Teacher-forced token accuracy (EOS included) without dropout.
pub fn token_accuracy(model: &SeqModel, corpus: &ParallelCorpus, batch_size: usize) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = Batch::from_corpus(corpus, chunk);
        let tf = model.forward_teacher_forced(&batch, false, &mut RngState::new(0))?;
        let (h, t) = batch_hits(tf.graph.value(tf.probs)?, &tf.targets, &tf.mask);
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total.max(1) as f64)
}

fn diverged(step: usize, reason: String, last: Option<&StepRecord>) -> TrainError {
    TrainError::Divergence { step, reason, last: last.cloned().map(Box::new) }
}

/// Adam training. Batches are reshuffled each epoch from the `batches`
/// sub-stream and hint masks drawn with them; dropout masks come from the
/// `dropout` sub-stream indexed by step.
pub fn train(
    model: &mut SeqModel,
    corpus: &ParallelCorpus,
    schedule: &TrainSchedule,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if corpus.vocab().len() != model.config().vocab_size {
        return Err(TrainError::Config(format!(
            "corpus vocabulary has {} tokens, model expects {}",
            corpus.vocab().len(),
            model.config().vocab_size
        )));
    }
    if corpus.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    let mut log = match &outputs.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let only: Option<Vec<ParamId>> = match schedule.trainable {
        Trainable::All => None,
        Trainable::ConfidenceHead => Some(model.conf_head_params().to_vec()),
    };
    let root = RngState::new(schedule.seed);
    let mut adam = Adam::new(model.params(), schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps);
    let mut records: Vec<StepRecord> = Vec::with_capacity(schedule.total_steps);
    let mut checkpoints = Vec::new();
    let mut batches: Vec<Batch> = Vec::new();
    let (mut epoch, mut next) = (0u64, 0usize);

    for step in 0..schedule.total_steps {
        if next == batches.len() {
            let mut rng = root.substream("batches", epoch);
            batches = make_batches(corpus, schedule.batch_size, schedule.hint_fraction, &mut rng)?;
            epoch += 1;
            next = 0;
        }
        let batch = &batches[next];
        next += 1;

        let mut drop_rng = root.substream("dropout", step as u64);
        let mut tf = TeacherForced::build(model, model.params(), batch, true, &mut drop_rng)?;
        let loss = BatchLoss::build(&mut tf, &batch.hint, schedule, step)?;
        match tf.graph.forward(model.params()) {
            Err(NumericsError::NonFinite { op }) => {
                return Err(diverged(step, format!("non-finite value in {op}"), records.last()))
            }
            r => r?,
        }
        let bd = loss.breakdown(&tf)?;
        if !bd.is_finite() {
            return Err(diverged(step, format!("non-finite loss {bd:?}"), records.last()));
        }
        let grads = tf.graph.backward(loss.total, model.params())?;
        if !grads.global_norm().is_finite() {
            return Err(diverged(step, "non-finite gradient".into(), records.last()));
        }
        let lr = learning_rate(step + 1, schedule.learning_rate, schedule.warmup_steps);
        adam.step(model.params_mut(), &grads, lr, only.as_deref());

        let (hits, total) = batch_hits(tf.graph.value(tf.probs)?, &tf.targets, &tf.mask);
        let rec = StepRecord {
            step,
            l_nmt: bd.l_nmt,
            l_conf: bd.l_conf,
            lambda: bd.lambda,
            l_total: bd.l_total,
            mean_confidence: bd.mean_confidence,
            token_accuracy: hits as f64 / total.max(1) as f64,
            learning_rate: lr,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            writeln!(w)?;
        }
        records.push(rec);

        let done = step + 1;
        if let Some(dir) = &outputs.checkpoint_dir {
            if (schedule.checkpoint_every > 0 && done % schedule.checkpoint_every == 0) || done == schedule.total_steps
            {
                let path = dir.join(format!("step-{done:06}.ckpt"));
                save(model, corpus, done, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(TrainOutcome { records, checkpoints })
}

fn save(model: &SeqModel, corpus: &ParallelCorpus, step: usize, path: &Path) -> Result<()> {
    let ck = Checkpoint { model: model.clone(), vocab: corpus.vocab().clone(), step: step as u64 };
    Ok(ck.save(path)?)
}
