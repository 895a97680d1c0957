use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::inference::ForcedScore;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation, two-pass.
fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn check(f: &ForcedScore) -> Result<()> {
    if f.is_empty() {
        return Err(EvalError::Config("empty forced score".into()));
    }
    Ok(())
}

/// Length-normalised translation log-probability.
pub fn metric_tp(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    Ok(mean(&f.log_probs))
}

/// Mean entropy of the per-step distributions, in nats. Higher is worse.
pub fn metric_softmax_ent(dists: &[Vec<f64>]) -> Result<f64> {
    if dists.is_empty() {
        return Err(EvalError::Config("no distributions".into()));
    }
    let h: Vec<f64> = dists.iter().map(|p| p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()).collect();
    Ok(mean(&h))
}

/// Mean of the entropies recorded during force decoding.
pub fn metric_softmax_ent_forced(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    Ok(mean(&f.entropies))
}

/// Population standard deviation of the per-token log-probabilities.
pub fn metric_sent_std(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    Ok(pop_std(&f.log_probs))
}

/// Length-averaged raw confidence.
pub fn metric_conf(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    Ok(mean(&f.confidences))
}

/// Length-averaged log-confidence.
pub fn metric_conf_log(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    Ok(f.confidences.iter().map(|c| c.ln()).sum::<f64>() / f.len() as f64)
}

/// Population standard deviation of the per-token log-confidences.
pub fn metric_sent_std_conf(f: &ForcedScore) -> Result<f64> {
    check(f)?;
    let logs: Vec<f64> = f.confidences.iter().map(|c| c.ln()).collect();
    Ok(pop_std(&logs))
}

/// Monte Carlo dropout averages over `K` passes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DFamily {
    pub d_tp: f64,
    pub d_conf: f64,
    pub d_comb: f64,
}

pub fn metric_d_family(passes: &[&ForcedScore]) -> Result<DFamily> {
    if passes.is_empty() {
        return Err(EvalError::Config("at least one pass is needed".into()));
    }
    let k = passes.len() as f64;
    let (mut tp, mut conf) = (0.0, 0.0);
    for p in passes {
        tp += metric_tp(p)?;
        conf += metric_conf(p)?;
    }
    let (d_tp, d_conf) = (tp / k, conf / k);
    // the combined score is linear in the per-pass terms
    Ok(DFamily { d_tp, d_conf, d_comb: d_tp + d_conf })
}

/// Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(EvalError::Config(format!(
            "need two equal-length series of at least 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::Undefined("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Every sentence-level metric for one scored translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub id: usize,
    pub len: usize,
    pub tp: f64,
    pub softmax_ent: f64,
    pub sent_std: f64,
    pub conf: f64,
    pub conf_log: f64,
    pub sent_std_conf: f64,
    pub d_tp: Option<f64>,
    pub d_conf: Option<f64>,
    pub d_comb: Option<f64>,
    pub gold: Option<f64>,
}

impl ScoredSentence {
    /// `passes` are the Monte Carlo records of this sentence, if any.
    pub fn new(id: usize, forced: &ForcedScore, passes: Option<&[&ForcedScore]>, gold: Option<f64>) -> Result<Self> {
        let d = passes.map(metric_d_family).transpose()?;
        let s = Self {
            id,
            len: forced.len(),
            tp: metric_tp(forced)?,
            softmax_ent: metric_softmax_ent_forced(forced)?,
            sent_std: metric_sent_std(forced)?,
            conf: metric_conf(forced)?,
            conf_log: metric_conf_log(forced)?,
            sent_std_conf: metric_sent_std_conf(forced)?,
            d_tp: d.map(|d| d.d_tp),
            d_conf: d.map(|d| d.d_conf),
            d_comb: d.map(|d| d.d_comb),
            gold,
        };
        if s.columns().iter().any(|(_, x)| !x.is_finite()) {
            return Err(EvalError::Config(format!("non-finite metric for sentence {id}")));
        }
        Ok(s)
    }

    /// Metric columns by name, D-family only when present.
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        let mut cols = vec![
            ("tp", self.tp),
            ("softmax_ent", self.softmax_ent),
            ("sent_std", self.sent_std),
            ("conf", self.conf),
            ("conf_log", self.conf_log),
            ("sent_std_conf", self.sent_std_conf),
        ];
        if let (Some(a), Some(b), Some(c)) = (self.d_tp, self.d_conf, self.d_comb) {
            cols.extend([("d_tp", a), ("d_conf", b), ("d_comb", c)]);
        }
        cols
    }
}
