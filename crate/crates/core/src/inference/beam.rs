use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{log_prob, InferenceError, Result};
use crate::data::{Vocab, BOS, EOS, PAD};
use crate::model::{Encoded, SeqModel};

/// Decoding settings. `max_len` counts the closing EOS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 4, alpha: 0.6, max_len: 64 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(InferenceError::Config("beam_size and max_len must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(InferenceError::Config(format!("length penalty {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// `((5 + T) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A decoded sequence. `tokens`, `log_probs` and `confidences` are aligned
/// and include the closing EOS when there is one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub confidences: Vec<f64>,
    /// Sum of log-probabilities over the length penalty.
    pub score: f64,
    /// False when the hypothesis was cut at `max_len` without EOS.
    pub finished: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_probs: Vec<f64>, confidences: Vec<f64>, alpha: f64, finished: bool) -> Self {
        let score = log_probs.iter().sum::<f64>() / length_penalty(tokens.len(), alpha);
        Self { tokens, log_probs, confidences, score, finished }
    }

    /// Tokens without the closing EOS.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Next-token log-probabilities and confidence after each prefix.
pub trait StepScorer {
    fn next(&self, prefixes: &[&[usize]]) -> Result<Vec<(Vec<f64>, f64)>>;

    /// Tokens that may be proposed.
    fn allowed(&self, _token: usize) -> bool {
        true
    }
}

/// Scores continuations of one encoded source with a trained model.
pub struct ModelScorer<'a> {
    model: &'a SeqModel,
    enc: Encoded,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SeqModel, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(InferenceError::Config("empty source sentence".into()));
        }
        let src = super::sanitize(src, model.config().vocab_size);
        Ok(Self { model, enc: model.encode(&[&src])? })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next(&self, prefixes: &[&[usize]]) -> Result<Vec<(Vec<f64>, f64)>> {
        let rows = vec![0; prefixes.len()];
        let outs = self.model.decode_last(&self.enc, &rows, prefixes)?;
        Ok(outs.into_iter().map(|o| (o.p.iter().map(|&p| log_prob(p)).collect(), o.c as f64)).collect())
    }

    fn allowed(&self, token: usize) -> bool {
        token != PAD && token != BOS
    }
}

struct Partial {
    tokens: Vec<usize>,
    log_probs: Vec<f64>,
    confidences: Vec<f64>,
    sum: f64,
}

/// Beam search returning up to `beam_size` hypotheses, best first.
///
/// Each step ranks every expansion by cumulative log-probability. EOS
/// expansions ranked within the top `beam_size` finish; the best
/// `beam_size` others stay active. Search stops once `beam_size`
/// hypotheses have finished, and at `max_len` the remaining active ones are
/// kept as unfinished. Finished hypotheses compete on the length-normalised
/// score.
pub fn beam_search(scorer: &impl StepScorer, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let mut active = vec![Partial { tokens: vec![], log_probs: vec![], confidences: vec![], sum: 0.0 }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<&[usize]> = active.iter().map(|p| p.tokens.as_slice()).collect();
        let outs = scorer.next(&prefixes)?;
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (b, (lps, _)) in outs.iter().enumerate() {
            for (tok, &lp) in lps.iter().enumerate() {
                if scorer.allowed(tok) && lp.is_finite() {
                    cands.push((active[b].sum + lp, lp, b, tok));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(y.1.total_cmp(&x.1)).then((x.2, x.3).cmp(&(y.2, y.3))));
        let mut next = Vec::with_capacity(k);
        for (rank, &(sum, lp, b, tok)) in cands.iter().enumerate() {
            if rank >= k && next.len() == k {
                break;
            }
            let parent = &active[b];
            let extend = |v: &[f64], x: f64| {
                let mut v = v.to_vec();
                v.push(x);
                v
            };
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let log_probs = extend(&parent.log_probs, lp);
            let confidences = extend(&parent.confidences, outs[b].1);
            if tok == EOS {
                if rank < k {
                    done.push(Hypothesis::new(tokens, log_probs, confidences, cfg.alpha, true));
                }
            } else if next.len() < k {
                next.push(Partial { tokens, log_probs, confidences, sum });
            }
        }
        active = next;
        if done.len() >= k || active.is_empty() {
            active.clear();
            break;
        }
    }
    for p in active {
        done.push(Hypothesis::new(p.tokens, p.log_probs, p.confidences, cfg.alpha, false));
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score));
    done.truncate(k);
    Ok(done)
}

/// Picks the most probable allowed token at each step.
pub fn greedy(scorer: &impl StepScorer, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let (mut tokens, mut log_probs, mut confidences) = (vec![], vec![], vec![]);
    while tokens.len() < max_len {
        let (lps, c) = scorer.next(&[&tokens])?.remove(0);
        let (tok, lp) = lps
            .iter()
            .enumerate()
            .filter(|&(t, lp)| scorer.allowed(t) && lp.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (t, &lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((t, lp)),
            })
            .ok_or_else(|| InferenceError::Config("no token may be proposed".into()))?;
        tokens.push(tok);
        log_probs.push(lp);
        confidences.push(c);
        if tok == EOS {
            return Ok(Hypothesis::new(tokens, log_probs, confidences, alpha, true));
        }
    }
    Ok(Hypothesis::new(tokens, log_probs, confidences, alpha, false))
}

/// Beam search over every source; n-best lists, best first.
pub fn translate(model: &SeqModel, srcs: &[&[usize]], cfg: &BeamConfig) -> Result<Vec<Vec<Hypothesis>>> {
    srcs.iter().map(|s| beam_search(&ModelScorer::new(model, s)?, cfg)).collect()
}

/// One line of a translation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub source: Vec<String>,
    pub hypothesis: Vec<String>,
    pub log_probs: Vec<f64>,
    pub confidences: Vec<f64>,
    pub score: f64,
    pub finished: bool,
}

impl TranslationRecord {
    pub fn new(vocab: &Vocab, src: &[usize], hyp: &Hypothesis) -> Self {
        let names = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).unwrap_or("<unk>").to_string()).collect();
        Self {
            source: names(src),
            hypothesis: names(hyp.words()),
            log_probs: hyp.log_probs.clone(),
            confidences: hyp.confidences.clone(),
            score: hyp.score,
            finished: hyp.finished,
        }
    }
}

/// Writes the best hypothesis of each source as JSON lines.
pub fn write_translations(path: &Path, vocab: &Vocab, srcs: &[&[usize]], hyps: &[Hypothesis]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (s, h) in srcs.iter().zip(hyps) {
        serde_json::to_writer(&mut w, &TranslationRecord::new(vocab, s, h)).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::numerics::RngState;

    /// Three tokens `{0, 1, EOS}` with prefix-dependent probabilities.
    struct Table(fn(&[usize]) -> [f64; 3]);

    impl StepScorer for Table {
        fn next(&self, prefixes: &[&[usize]]) -> Result<Vec<(Vec<f64>, f64)>> {
            Ok(prefixes.iter().map(|p| ((self.0)(p).iter().map(|x| x.ln()).collect(), 0.5)).collect())
        }
    }

    fn trap(prefix: &[usize]) -> [f64; 3] {
        // greedy takes 0 first, but 1 then EOS is far better
        match prefix {
            [] => [0.5, 0.4, 0.1],
            [0] => [0.35, 0.35, 0.3],
            [1] => [0.05, 0.05, 0.9],
            [0, 0] | [0, 1] => [0.3, 0.3, 0.4],
            _ => [0.2, 0.3, 0.5],
        }
    }

    fn exhaustive(t: &Table, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
        let mut best = (vec![], f64::NEG_INFINITY);
        let mut stack = vec![(vec![], 0.0)];
        while let Some((seq, sum)) = stack.pop() {
            let lps = t.next(&[&seq]).unwrap().remove(0).0;
            for (tok, &lp) in lps.iter().enumerate() {
                let mut s = seq.clone();
                s.push(tok);
                let total: f64 = sum + lp;
                if tok == EOS || s.len() == max_len {
                    let score = total / length_penalty(s.len(), alpha);
                    if score > best.1 {
                        best = (s, score);
                    }
                } else {
                    stack.push((s, total));
                }
            }
        }
        best
    }

    #[test]
    fn beam_two_matches_exhaustive_search() {
        let t = Table(trap);
        for alpha in [0.0, 0.6, 1.0] {
            let cfg = BeamConfig { beam_size: 2, alpha, max_len: 3 };
            let best = &beam_search(&t, &cfg).unwrap()[0];
            let (seq, score) = exhaustive(&t, 3, alpha);
            assert_eq!(best.tokens, seq, "alpha {alpha}");
            assert!((best.score - score).abs() < 1e-12);
            assert_ne!(greedy(&t, 3, alpha).unwrap().tokens, seq);
        }
    }

    #[test]
    fn zero_alpha_gives_raw_sum() {
        let t = Table(trap);
        let h = &beam_search(&t, &BeamConfig { beam_size: 2, alpha: 0.0, max_len: 3 }).unwrap()[0];
        assert_eq!(h.score, h.log_probs.iter().sum::<f64>());
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert_eq!(length_penalty(7, 0.0), 1.0);
    }

    #[test]
    fn max_len_force_finishes() {
        let t = Table(|_| [0.6, 0.3, 0.1]);
        let h = greedy(&t, 4, 0.6).unwrap();
        assert!(!h.finished);
        assert_eq!(h.tokens, vec![0; 4]);
        assert_eq!(h.words(), &h.tokens[..]);
        let nbest = beam_search(&t, &BeamConfig { beam_size: 2, alpha: 0.6, max_len: 2 }).unwrap();
        assert!(nbest.len() <= 2);
        assert!(nbest.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn n_best_is_capped_and_aligned() {
        let t = Table(trap);
        let nbest = beam_search(&t, &BeamConfig { beam_size: 3, alpha: 0.6, max_len: 3 }).unwrap();
        assert!(!nbest.is_empty() && nbest.len() <= 3);
        for h in &nbest {
            assert_eq!(h.tokens.len(), h.log_probs.len());
            assert_eq!(h.tokens.len(), h.confidences.len());
        }
    }

    fn model() -> SeqModel {
        let cfg = ModelConfig { vocab_size: 16, d_model: 16, heads: 2, ffn_dim: 16, ..ModelConfig::default() };
        init_model(&cfg, &RngState::new(3)).unwrap()
    }

    #[test]
    fn beam_one_equals_greedy_on_a_model() {
        let m = model();
        for src in [vec![4usize, 5, 6], vec![9, 8, 7, 6, 5], vec![15]] {
            let s = ModelScorer::new(&m, &src).unwrap();
            let g = greedy(&s, 12, 0.6).unwrap();
            let b = beam_search(&s, &BeamConfig { beam_size: 1, alpha: 0.6, max_len: 12 }).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g);
            assert!(g.tokens.iter().all(|&t| t != PAD && t != BOS));
        }
    }

    #[test]
    fn model_confidences_are_in_range() {
        let m = model();
        let out = translate(&m, &[&[4, 5, 6], &[7, 7]], &BeamConfig { max_len: 6, ..BeamConfig::default() }).unwrap();
        assert_eq!(out.len(), 2);
        for h in out.iter().flatten() {
            assert!(h.confidences.iter().all(|&c| c > 0.0 && c < 1.0));
            assert!(h.log_probs.iter().all(|&l| l <= 0.0));
        }
    }

    #[test]
    fn translations_file_has_one_line_per_source() {
        let m = model();
        let vocab = Vocab::synthetic(16).unwrap();
        let srcs: Vec<&[usize]> = vec![&[4, 5], &[6, 7, 8]];
        let hyps: Vec<Hypothesis> = translate(&m, &srcs, &BeamConfig { max_len: 5, ..BeamConfig::default() })
            .unwrap()
            .into_iter()
            .map(|mut n| n.remove(0))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.jsonl");
        write_translations(&path, &vocab, &srcs, &hyps).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<TranslationRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].source, vec!["w6", "w7", "w8"]);
        assert_eq!(recs[0].score, hyps[0].score);
    }
}
