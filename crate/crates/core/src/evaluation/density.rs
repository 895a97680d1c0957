use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

/// One scored token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub probability: f64,
    pub confidence: f64,
    pub correct: bool,
}

/// Thresholds for the over- and under-confidence rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub bins: usize,
    /// Incorrect tokens scored above this are over-confident.
    pub over: f64,
    /// Correct tokens scored below this are under-confident.
    pub under: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self { bins: 20, over: 0.7, under: 0.3 }
    }
}

/// Reference rates reported for a large translation model, carried along
/// for comparison only.
pub const REFERENCE_OVER_RATE: f64 = 0.358;
pub const REFERENCE_UNDER_RATE: f64 = 0.249;

/// Histograms and miscalibration rates of one score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDensity {
    /// Counts per bin of `[0, 1]`, correct tokens.
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    /// Share of incorrect tokens scored above `over`.
    pub over_rate: f64,
    /// Share of correct tokens scored below `under`.
    pub under_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub config: DensityConfig,
    pub correct_tokens: usize,
    pub incorrect_tokens: usize,
    pub probability: ScoreDensity,
    pub confidence: ScoreDensity,
    pub reference_over_rate: f64,
    pub reference_under_rate: f64,
}

fn bin(x: f64, bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn density(tokens: &[TokenScore], score: impl Fn(&TokenScore) -> f64, cfg: &DensityConfig) -> ScoreDensity {
    let mut d =
        ScoreDensity { correct: vec![0; cfg.bins], incorrect: vec![0; cfg.bins], over_rate: 0.0, under_rate: 0.0 };
    let (mut over, mut under, mut nc, mut ni) = (0usize, 0usize, 0usize, 0usize);
    for t in tokens {
        let s = score(t);
        if t.correct {
            d.correct[bin(s, cfg.bins)] += 1;
            nc += 1;
            under += (s < cfg.under) as usize;
        } else {
            d.incorrect[bin(s, cfg.bins)] += 1;
            ni += 1;
            over += (s > cfg.over) as usize;
        }
    }
    d.over_rate = if ni > 0 { over as f64 / ni as f64 } else { 0.0 };
    d.under_rate = if nc > 0 { under as f64 / nc as f64 } else { 0.0 };
    d
}

/// Binned densities of token probability and confidence split by
/// correctness. A class with no tokens has empty histograms and rate 0.
pub fn density_report(tokens: &[TokenScore], cfg: &DensityConfig) -> Result<DensityReport> {
    if cfg.bins == 0 {
        return Err(EvalError::Config("at least one bin is needed".into()));
    }
    if tokens.iter().any(|t| !(t.probability.is_finite() && t.confidence.is_finite())) {
        return Err(EvalError::Config("non-finite token score".into()));
    }
    let correct = tokens.iter().filter(|t| t.correct).count();
    Ok(DensityReport {
        config: *cfg,
        correct_tokens: correct,
        incorrect_tokens: tokens.len() - correct,
        probability: density(tokens, |t| t.probability, cfg),
        confidence: density(tokens, |t| t.confidence, cfg),
        reference_over_rate: REFERENCE_OVER_RATE,
        reference_under_rate: REFERENCE_UNDER_RATE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_correct_and_certain() {
        let toks = vec![TokenScore { probability: 1.0, confidence: 1.0, correct: true }; 5];
        let r = density_report(&toks, &DensityConfig::default()).unwrap();
        assert_eq!(r.probability.correct[19], 5);
        assert_eq!(r.probability.correct.iter().sum::<usize>(), 5);
        assert_eq!(r.probability.over_rate, 0.0);
        assert_eq!(r.probability.under_rate, 0.0);
        assert_eq!(r.incorrect_tokens, 0);
    }

    #[test]
    fn rates_follow_thresholds() {
        let t = |p, c, ok| TokenScore { probability: p, confidence: c, correct: ok };
        let toks = [t(0.9, 0.2, false), t(0.5, 0.8, false), t(0.1, 0.95, true), t(0.8, 0.1, true)];
        let r = density_report(&toks, &DensityConfig::default()).unwrap();
        assert_eq!(r.probability.over_rate, 0.5);
        assert_eq!(r.probability.under_rate, 0.5);
        assert_eq!(r.confidence.over_rate, 0.5);
        assert_eq!(r.confidence.under_rate, 0.5);
        assert_eq!(r.reference_over_rate, 0.358);
    }

    proptest! {
        #[test]
        fn bins_partition_each_class(
            toks in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, any::<bool>()), 0..200),
            bins in 1usize..40,
        ) {
            let toks: Vec<TokenScore> =
                toks.into_iter().map(|(p, c, ok)| TokenScore { probability: p, confidence: c, correct: ok }).collect();
            let r = density_report(&toks, &DensityConfig { bins, ..DensityConfig::default() }).unwrap();
            for d in [&r.probability, &r.confidence] {
                prop_assert_eq!(d.correct.iter().sum::<usize>(), r.correct_tokens);
                prop_assert_eq!(d.incorrect.iter().sum::<usize>(), r.incorrect_tokens);
                prop_assert!((0.0..=1.0).contains(&d.over_rate) && (0.0..=1.0).contains(&d.under_rate));
            }
        }
    }
}
