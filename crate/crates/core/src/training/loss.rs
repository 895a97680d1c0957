use serde::{Deserialize, Serialize};

use super::{Result, Smoothing, TrainSchedule};
use crate::model::TeacherForced;
use crate::numerics::{NodeId, Real, Tensor, LOG_FLOOR};

/// `c * p + (1 - c) * y`.
pub fn hint_interpolate(p: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    assert_eq!(p.len(), y.len());
    p.iter().zip(y).map(|(&p, &y)| c * p + (1.0 - c) * y).collect()
}

fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Mean over unmasked rows of `-ln p'[target]`; `probs` is row-major
/// `[rows, V]`.
pub fn nmt_loss(probs: &[f64], targets: &[usize], mask: &[bool]) -> f64 {
    let v = probs.len() / targets.len();
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            sum -= floored_ln(probs[r * v + t]);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Mean over unmasked positions of `-ln c`.
pub fn conf_loss(conf: &[f64], mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&c, &m) in conf.iter().zip(mask) {
        if m {
            sum -= floored_ln(c);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// `lambda0 * exp(-s / beta0)`.
pub fn lambda_at(step: f64, lambda0: f64, beta0: f64) -> f64 {
    lambda0 * (-step / beta0).exp()
}

/// `1 - eps` on `label`, `eps / (V - 1)` elsewhere.
pub fn smooth_targets(label: usize, eps: f64, vocab: usize) -> Vec<f64> {
    assert!(label < vocab);
    let other = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut y = vec![other; vocab];
    y[label] = 1.0 - if vocab > 1 { eps } else { 0.0 };
    y
}

/// `eps0 * exp(1 - c / c_mean)`, clamped to `[0, 1 - 1e-6]`.
pub fn conf_smoothing_mass(c: f64, c_mean: f64, eps0: f64) -> f64 {
    (eps0 * (1.0 - c / c_mean).exp()).clamp(0.0, 1.0 - 1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_nmt: f64,
    pub l_conf: f64,
    pub lambda: f64,
    pub l_total: f64,
    /// Mean confidence over target tokens; absent without a confidence head.
    pub mean_confidence: Option<f64>,
}

impl LossBreakdown {
    fn new(l_nmt: f64, l_conf: f64, lambda: f64, mean_confidence: Option<f64>) -> Self {
        Self { l_nmt, l_conf, lambda, l_total: l_nmt + lambda * l_conf, mean_confidence }
    }

    pub fn is_finite(&self) -> bool {
        self.l_nmt.is_finite() && self.l_conf.is_finite() && self.lambda.is_finite() && self.l_total.is_finite()
    }
}

/// Per-row smoothed target distribution for the configured mode.
fn target_rows(
    schedule: &TrainSchedule,
    conf: &[f64],
    targets: &[usize],
    mask: &[bool],
    vocab: usize,
) -> Vec<Vec<f64>> {
    let c_mean = {
        let (s, n) = conf.iter().zip(mask).filter(|(_, &m)| m).fold((0.0, 0), |(s, n), (&c, _)| (s + c, n + 1));
        if n == 0 {
            1.0
        } else {
            s / n as f64
        }
    };
    targets
        .iter()
        .zip(conf)
        .map(|(&t, &c)| match schedule.smoothing {
            Smoothing::None => smooth_targets(t, 0.0, vocab),
            Smoothing::Standard => smooth_targets(t, schedule.eps0, vocab),
            Smoothing::Confidence => smooth_targets(t, conf_smoothing_mass(c, c_mean, schedule.eps0), vocab),
        })
        .collect()
}

/// Reference loss over plain arrays. `hint_rows` marks rows that receive
/// hints; L_Conf covers every unmasked row.
pub fn total_loss(
    probs: &[f64],
    conf: &[f64],
    targets: &[usize],
    mask: &[bool],
    hint_rows: &[bool],
    schedule: &TrainSchedule,
    step: usize,
) -> LossBreakdown {
    let v = probs.len() / targets.len();
    let soft = target_rows(schedule, conf, targets, mask, v);
    let (mut nmt, mut n) = (0.0, 0usize);
    for r in 0..targets.len() {
        if !mask[r] {
            continue;
        }
        n += 1;
        let p = &probs[r * v..(r + 1) * v];
        let row = if hint_rows[r] {
            let hint = if schedule.smooth_hints { soft[r].clone() } else { smooth_targets(targets[r], 0.0, v) };
            hint_interpolate(p, &hint, conf[r])
        } else {
            p.to_vec()
        };
        nmt -= soft[r].iter().zip(&row).filter(|(&t, _)| t != 0.0).map(|(&t, &q)| t * floored_ln(q)).sum::<f64>();
    }
    let l_nmt = nmt / n.max(1) as f64;
    let l_conf = conf_loss(conf, mask);
    let lambda = lambda_at(step as f64, schedule.lambda0, schedule.beta0());
    let mean_c = conf.iter().zip(mask).filter(|(_, &m)| m).map(|(&c, _)| c).sum::<f64>() / n.max(1) as f64;
    LossBreakdown::new(l_nmt, l_conf, lambda, Some(mean_c))
}

/// Loss nodes appended to a teacher-forced graph.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: NodeId,
    pub nmt: NodeId,
    pub conf: Option<NodeId>,
    pub lambda: f64,
    pub tokens: usize,
}

impl BatchLoss {
    /// `hint` holds one flag per sentence.
    pub fn build<T: Real>(
        tf: &mut TeacherForced<T>,
        hint: &[bool],
        schedule: &TrainSchedule,
        step: usize,
    ) -> Result<Self> {
        assert_eq!(hint.len(), tf.batch);
        let rows = tf.batch * tf.len;
        let vocab = tf.graph.shape(tf.probs)[1];
        let tokens = tf.mask.iter().filter(|&&m| m).count();
        let w = T::lit(1.0 / tokens.max(1) as f64);
        let weights: Vec<T> = tf.mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
        let hint_rows: Vec<bool> = (0..rows).map(|r| tf.mask[r] && hint[r / tf.len]).collect();

        let mut onehot = Tensor::zeros(vec![rows, vocab]);
        for (r, &t) in tf.targets.iter().enumerate() {
            if tf.mask[r] {
                onehot.data_mut()[r * vocab + t] = T::one();
            }
        }
        let g = &mut tf.graph;
        let y = g.input(onehot);
        let soft = match schedule.smoothing {
            Smoothing::None => y,
            Smoothing::Standard => {
                let mut t = Tensor::zeros(vec![rows, vocab]);
                for (r, &label) in tf.targets.iter().enumerate() {
                    if tf.mask[r] {
                        let row = smooth_targets(label, schedule.eps0, vocab);
                        for (o, x) in t.data_mut()[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                            *o = T::lit(x);
                        }
                    }
                }
                g.input(t)
            }
            Smoothing::Confidence => {
                g.confidence_smoothing(tf.conf, &tf.targets, &tf.mask, T::lit(schedule.eps0), vocab)?
            }
        };
        if !schedule.confidence_branch {
            let nmt = g.nll(tf.probs, soft, &weights);
            return Ok(Self { total: nmt, nmt, conf: None, lambda: 0.0, tokens });
        }
        let p = if hint_rows.iter().any(|&h| h) {
            let hint_target = if schedule.smooth_hints { soft } else { y };
            g.interpolate(tf.probs, tf.conf, hint_target, &hint_rows)
        } else {
            tf.probs
        };
        let nmt = g.nll(p, soft, &weights);
        let ones = g.input(Tensor::full(vec![rows, 1], T::one()));
        let conf = g.nll(tf.conf, ones, &weights);
        let lambda = lambda_at(step as f64, schedule.lambda0, schedule.beta0());
        let scaled = g.scale(conf, T::lit(lambda));
        let total = g.add(nmt, scaled);
        Ok(Self { total, nmt, conf: Some(conf), lambda, tokens })
    }

    /// Values after the graph has been evaluated. `l_total` is recomputed
    /// in 64-bit from the components.
    pub fn breakdown<T: Real>(&self, tf: &TeacherForced<T>) -> Result<LossBreakdown> {
        let l_nmt = tf.graph.scalar(self.nmt)?.as_f64();
        let (l_conf, mean_c) = match self.conf {
            Some(node) => {
                let c = tf.graph.value(tf.conf)?;
                let s: f64 = c.iter().zip(&tf.mask).filter(|(_, &m)| m).map(|(&c, _)| c.as_f64()).sum();
                (tf.graph.scalar(node)?.as_f64(), Some(s / self.tokens.max(1) as f64))
            }
            None => (0.0, None),
        };
        Ok(LossBreakdown::new(l_nmt, l_conf, self.lambda, mean_c))
    }
}
