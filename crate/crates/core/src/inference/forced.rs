use serde::{Deserialize, Serialize};

use super::{log_prob, sanitize, InferenceError, Result};
use crate::data::Batch;
use crate::model::SeqModel;
use crate::numerics::RngState;

/// Teacher-forced scores of a given target. Every vector has one entry per
/// position of `[y, EOS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedScore {
    pub log_probs: Vec<f64>,
    pub confidences: Vec<f64>,
    /// Entropy of the predicted distribution, in nats.
    pub entropies: Vec<f64>,
    /// Most probable token at each position.
    pub predicted: Vec<usize>,
}

impl ForcedScore {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

/// One Monte Carlo dropout pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub pass: usize,
    pub score: ForcedScore,
}

const BATCH: usize = 64;

fn entropy(p: &[f32]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -(x as f64) * (x as f64).ln()).sum()
}

fn argmax(p: &[f32]) -> usize {
    p.iter().enumerate().fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

fn score_all(
    model: &SeqModel,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
    mut rng: Option<&mut RngState>,
) -> Result<Vec<ForcedScore>> {
    if srcs.len() != tgts.len() {
        return Err(InferenceError::Config(format!("{} sources but {} targets", srcs.len(), tgts.len())));
    }
    if let Some(i) = srcs.iter().zip(tgts).position(|(s, t)| s.is_empty() || t.is_empty()) {
        return Err(InferenceError::Config(format!("sentence pair {i} is empty")));
    }
    let v = model.config().vocab_size;
    let srcs: Vec<Vec<usize>> = srcs.iter().map(|s| sanitize(s, v)).collect();
    let tgts: Vec<Vec<usize>> = tgts.iter().map(|t| sanitize(t, v)).collect();
    let mut out = Vec::with_capacity(srcs.len());
    let mut off_rng = RngState::new(0);
    for start in (0..srcs.len()).step_by(BATCH) {
        let end = (start + BATCH).min(srcs.len());
        let s: Vec<&[usize]> = srcs[start..end].iter().map(|x| x.as_slice()).collect();
        let t: Vec<&[usize]> = tgts[start..end].iter().map(|x| x.as_slice()).collect();
        let batch = Batch::from_sequences(&s, &t, (start..end).collect());
        let tf = match rng.as_deref_mut() {
            Some(r) => model.forward_teacher_forced(&batch, true, r)?,
            None => model.forward_teacher_forced(&batch, false, &mut off_rng)?,
        };
        let probs = tf.graph.value(tf.probs)?;
        let conf = tf.graph.value(tf.conf)?;
        for b in 0..batch.size {
            let rows = (0..tf.len).map(|i| b * tf.len + i).filter(|&r| tf.mask[r]);
            let mut fs = ForcedScore { log_probs: vec![], confidences: vec![], entropies: vec![], predicted: vec![] };
            for r in rows {
                let p = &probs[r * v..(r + 1) * v];
                fs.log_probs.push(log_prob(p[tf.targets[r]]));
                fs.confidences.push(conf[r] as f64);
                fs.entropies.push(entropy(p));
                fs.predicted.push(argmax(p));
            }
            out.push(fs);
        }
    }
    Ok(out)
}

/// Teacher-forced scores with dropout off. Ids outside the vocabulary are
/// scored as UNK.
pub fn force_decode(model: &SeqModel, src: &[usize], tgt: &[usize]) -> Result<ForcedScore> {
    Ok(score_all(model, &[src], &[tgt], None)?.remove(0))
}

pub fn force_decode_batch(model: &SeqModel, srcs: &[&[usize]], tgts: &[&[usize]]) -> Result<Vec<ForcedScore>> {
    score_all(model, srcs, tgts, None)
}

/// `k` dropout-enabled forced passes at `rate`; pass `i` draws its masks
/// from `rng.substream("mc", i)`. Indexed `[pass][sentence]`.
pub fn mc_passes_batch(
    model: &SeqModel,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
    k: usize,
    rate: f64,
    rng: &RngState,
) -> Result<Vec<Vec<ForcedScore>>> {
    if k == 0 {
        return Err(InferenceError::Config("at least one Monte Carlo pass is needed".into()));
    }
    let noisy = model.with_dropout(rate)?;
    (0..k).map(|i| score_all(&noisy, srcs, tgts, Some(&mut rng.substream("mc", i as u64)))).collect()
}

pub fn mc_passes(
    model: &SeqModel,
    src: &[usize],
    tgt: &[usize],
    k: usize,
    rate: f64,
    rng: &RngState,
) -> Result<Vec<McRecord>> {
    Ok(mc_passes_batch(model, &[src], &[tgt], k, rate, rng)?
        .into_iter()
        .enumerate()
        .map(|(pass, mut s)| McRecord { pass, score: s.remove(0) })
        .collect())
}
