use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

/// Binary detection quality of a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub aupr: f64,
    pub eer: f64,
    /// Minimum misclassification rate over all thresholds.
    pub det: f64,
    pub positives: usize,
    pub negatives: usize,
    /// True when higher scores indicate the positive class.
    pub positive_high: bool,
}

/// Cumulative (tp, fp) after each distinct threshold, scores descending,
/// starting from (0, 0).
fn roc_counts(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0, 0)];
    let (mut tp, mut fp) = (0, 0);
    for (i, &j) in order.iter().enumerate() {
        if labels[j] {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == order.len() || scores[order[i + 1]] != scores[j] {
            pts.push((tp, fp));
        }
    }
    pts
}

/// AUROC, AUPR, EER and DET of `scores` against binary `labels`.
///
/// AUROC is the trapezoid area under the ROC curve, accumulated in integers,
/// which equals the probability that a positive outscores a negative with
/// ties counting one half. AUPR sums recall increments times interpolated
/// precision (the best precision at any recall at least as large). EER
/// interpolates linearly between the two ROC points where FPR - FNR changes
/// sign. With `positive_high` false the scores are negated first.
pub fn detection_metrics(scores: &[f64], labels: &[bool], positive_high: bool) -> Result<DetectionReport> {
    if scores.len() != labels.len() {
        return Err(EvalError::Config(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Config("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass { positives: p, negatives: n });
    }
    let s: Vec<f64> = if positive_high { scores.to_vec() } else { scores.iter().map(|x| -x).collect() };
    let pts = roc_counts(&s, labels);

    let mut area2: u128 = 0;
    for w in pts.windows(2) {
        let ((tp0, fp0), (tp1, fp1)) = (w[0], w[1]);
        area2 += ((fp1 - fp0) * (tp0 + tp1)) as u128;
    }
    let auroc = area2 as f64 / (2 * p * n) as f64;

    let prec: Vec<f64> = pts[1..].iter().map(|&(tp, fp)| tp as f64 / (tp + fp) as f64).collect();
    let mut interp = prec.clone();
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let aupr: f64 = pts.windows(2).zip(&interp).map(|(w, &pr)| (w[1].0 - w[0].0) as f64 / p as f64 * pr).sum();

    let rates: Vec<(f64, f64)> =
        pts.iter().map(|&(tp, fp)| (fp as f64 / n as f64, (p - tp) as f64 / p as f64)).collect();
    let k = rates.iter().position(|&(fpr, fnr)| fpr >= fnr).expect("the last point has FPR 1 and FNR 0");
    let eer = if k == 0 || rates[k].0 == rates[k].1 {
        rates[k].0
    } else {
        let (d0, d1) = (rates[k - 1].0 - rates[k - 1].1, rates[k].0 - rates[k].1);
        let t = -d0 / (d1 - d0);
        rates[k - 1].0 + t * (rates[k].0 - rates[k - 1].0)
    };

    let det = pts.iter().map(|&(tp, fp)| (fp + p - tp) as f64).fold(f64::INFINITY, f64::min) / (p + n) as f64;
    Ok(DetectionReport { auroc, aupr, eer, det, positives: p, negatives: n, positive_high })
}
