//! Direct reimplementations of the detection metrics.

/// Fraction of positive-negative pairs ordered correctly, ties one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Confusion counts when predicting positive for scores >= `thr`.
fn confusion(scores: &[f64], labels: &[bool], thr: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= thr, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    (tp, fp, tn, fneg)
}

/// Distinct thresholds, descending, preceded by +inf (nothing positive).
fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    let mut all = vec![f64::INFINITY];
    all.extend(t);
    all
}

pub fn aupr_steps(scores: &[f64], labels: &[bool]) -> f64 {
    let p = labels.iter().filter(|&&l| l).count() as f64;
    let pts: Vec<(f64, f64)> = thresholds(scores)[1..]
        .iter()
        .map(|&t| {
            let (tp, fp, _, _) = confusion(scores, labels, t);
            (tp as f64 / p, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for &(r, _) in &pts {
        let best = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev_recall) * best;
        prev_recall = r;
    }
    area
}

pub fn eer_steps(scores: &[f64], labels: &[bool]) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(scores)
        .iter()
        .map(|&t| {
            let (tp, fp, tn, fneg) = confusion(scores, labels, t);
            (fp as f64 / (fp + tn) as f64, fneg as f64 / (fneg + tp) as f64)
        })
        .collect();
    for i in 0..pts.len() {
        let (fpr, fnr) = pts[i];
        if fpr >= fnr {
            if i == 0 || fpr == fnr {
                return fpr;
            }
            let (a, b) = (pts[i - 1], pts[i]);
            // solve a + t (b - a) on the line FPR = FNR
            let t = (a.1 - a.0) / ((b.0 - a.0) - (b.1 - a.1));
            return a.0 + t * (b.0 - a.0);
        }
    }
    unreachable!("FPR reaches 1 with FNR 0")
}

pub fn det_steps(scores: &[f64], labels: &[bool]) -> f64 {
    thresholds(scores)
        .iter()
        .map(|&t| {
            let (_, fp, _, fneg) = confusion(scores, labels, t);
            (fp + fneg) as f64 / labels.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}
