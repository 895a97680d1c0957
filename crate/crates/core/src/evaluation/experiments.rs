use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::density::{density_report, DensityConfig, DensityReport, TokenScore};
use super::detection::{detection_metrics, DetectionReport};
use super::metrics::{metric_conf, metric_tp, pearson, ScoredSentence};
use super::{EvalError, Result};
use crate::data::{
    corrupt_targets, generate_corpus, generate_ood_corpus, DomainShift, ParallelCorpus, TaskSpec, EOS, NUM_RESERVED,
};
use crate::inference::{force_decode_batch, mc_passes_batch, translate, BeamConfig, ForcedScore, Hypothesis};
use crate::model::{init_model, ModelConfig, SeqModel};
use crate::numerics::RngState;
use crate::training::{train, TrainError, TrainOutcome, TrainOutputs, TrainSchedule};

/// Task, model and schedule shared by the experiment harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Setup {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            schedule: TrainSchedule {
                total_steps: 3000,
                warmup_steps: 500,
                learning_rate: 3e-3,
                ..TrainSchedule::default()
            },
            train_pairs: 5000,
            test_pairs: 500,
        }
    }
}

const TEST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Setup {
    /// Same setup with task, initialisation and training all seeded by `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.task.seed = seed;
        s.model.seed = seed;
        s.schedule.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        if self.model.vocab_size != self.task.vocab_size {
            return Err(EvalError::Config(format!(
                "model vocabulary {} differs from task vocabulary {}",
                self.model.vocab_size, self.task.vocab_size
            )));
        }
        if self.train_pairs == 0 || self.test_pairs == 0 {
            return Err(EvalError::Config("train_pairs and test_pairs must be positive".into()));
        }
        Ok(())
    }

    pub fn train_corpus(&self) -> Result<ParallelCorpus> {
        Ok(generate_corpus(&self.task, self.train_pairs)?)
    }

    /// Held-out pairs from an independent stream of the same task.
    pub fn test_corpus(&self) -> Result<ParallelCorpus> {
        Ok(generate_corpus(&self.task.with_seed(self.task.seed ^ TEST_STREAM), self.test_pairs)?)
    }

    pub fn init(&self) -> Result<SeqModel> {
        Ok(init_model(&self.model, &RngState::new(self.model.seed))?)
    }

    /// Fresh model trained on `corpus` with this schedule.
    pub fn train_on(&self, corpus: &ParallelCorpus, outputs: &TrainOutputs) -> Result<(SeqModel, TrainOutcome)> {
        let mut model = self.init()?;
        let outcome = train(&mut model, corpus, &self.schedule, outputs)?;
        Ok((model, outcome))
    }
}

fn refs(corpus: &ParallelCorpus) -> (Vec<&[usize]>, Vec<&[usize]>) {
    corpus.pairs().iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).unzip()
}

/// Probability-based and confidence-based separation of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPair {
    pub probability: DetectionReport,
    pub confidence: DetectionReport,
}

impl DetectionPair {
    /// Positives are scored higher by both sentence TP and sentence Conf.
    fn new(tp: &[f64], conf: &[f64], positive: &[bool]) -> Result<Self> {
        Ok(Self {
            probability: detection_metrics(tp, positive, true)?,
            confidence: detection_metrics(conf, positive, true)?,
        })
    }
}

// ---------------------------------------------------------------- noise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Sentence-level corruption rates.
    pub rates: Vec<f64>,
    /// Share of target tokens overwritten in a corrupted sentence.
    pub word_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { rates: vec![0.0, 0.2, 0.4, 0.6, 0.8], word_rate: 0.3 }
    }
}

/// Outcome at one noise rate. Clean sentences are the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRateResult {
    pub rate: f64,
    pub detection: Option<DetectionPair>,
    /// Mean sentence Conf over the training corpus.
    pub mean_confidence: Option<f64>,
    pub note: Option<String>,
}

/// Per-sentence confidence against its corruption level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSentence {
    pub rate: f64,
    pub id: usize,
    pub corrupted_fraction: f64,
    pub tp: f64,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub word_rate: f64,
    pub rates: Vec<NoiseRateResult>,
    pub sentences: Vec<NoiseSentence>,
}

/// The training corpus of `setup` with a `rate` share of sentences corrupted.
pub fn noisy_corpus(setup: &Setup, rate: f64, word_rate: f64) -> Result<ParallelCorpus> {
    let clean = setup.train_corpus()?;
    let mut rng = RngState::new(setup.task.seed).substream("noise", (rate * 1000.0).round() as u64);
    Ok(corrupt_targets(&clean, rate, word_rate, &mut rng)?)
}

/// Force-decodes the (possibly corrupted) training targets with a model
/// trained on them and separates clean from corrupted sentences.
pub fn score_noise(
    model: &SeqModel,
    corpus: &ParallelCorpus,
    rate: f64,
) -> Result<(NoiseRateResult, Vec<NoiseSentence>)> {
    let (srcs, tgts) = refs(corpus);
    let forced = force_decode_batch(model, &srcs, &tgts)?;
    let tp: Vec<f64> = forced.iter().map(metric_tp).collect::<Result<_>>()?;
    let conf: Vec<f64> = forced.iter().map(metric_conf).collect::<Result<_>>()?;
    let clean = corpus.clean_labels();
    let (detection, note) = match DetectionPair::new(&tp, &conf, &clean) {
        Ok(d) => (Some(d), None),
        Err(EvalError::SingleClass { .. }) => (None, Some("single class, detection skipped".to_string())),
        Err(e) => return Err(e),
    };
    let sentences = corpus
        .pairs()
        .iter()
        .enumerate()
        .map(|(id, p)| NoiseSentence {
            rate,
            id,
            corrupted_fraction: p.meta.corrupted_fraction,
            tp: tp[id],
            conf: conf[id],
        })
        .collect();
    let mean_confidence = Some(conf.iter().sum::<f64>() / conf.len() as f64);
    Ok((NoiseRateResult { rate, detection, mean_confidence, note }, sentences))
}

/// Trains one model per noise rate and scores its own training data. A
/// diverged run is recorded as failed and the remaining rates still run.
pub fn run_noise_experiment(setup: &Setup, cfg: &NoiseConfig) -> Result<NoiseReport> {
    setup.validate()?;
    let mut report = NoiseReport { word_rate: cfg.word_rate, rates: vec![], sentences: vec![] };
    for &rate in &cfg.rates {
        let corpus = noisy_corpus(setup, rate, cfg.word_rate)?;
        log::info!("noise rate {rate}: training on {} pairs", corpus.len());
        match setup.train_on(&corpus, &TrainOutputs::default()) {
            Ok((model, _)) => {
                let (res, sents) = score_noise(&model, &corpus, rate)?;
                report.rates.push(res);
                report.sentences.extend(sents);
            }
            Err(EvalError::Train(e @ TrainError::Divergence { .. })) => report.rates.push(NoiseRateResult {
                rate,
                detection: None,
                mean_confidence: None,
                note: Some(format!("failed: {e}")),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- ood

/// Frequency bands of the content vocabulary by in-domain target count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrequencyBin {
    High,
    Medium,
    Low,
}

/// Top 10% of content tokens by target-side count are High, the next 30%
/// Medium, the rest Low. Ties keep the lower id first.
pub fn frequency_bins(corpus: &ParallelCorpus) -> HashMap<usize, FrequencyBin> {
    let v = corpus.vocab().len();
    let mut counts = vec![0usize; v];
    for p in corpus.pairs() {
        for &t in &p.tgt {
            counts[t] += 1;
        }
    }
    let mut content: Vec<usize> = (NUM_RESERVED..v).collect();
    content.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let m = content.len();
    let (hi, mid) = ((m as f64 * 0.1).round() as usize, (m as f64 * 0.4).round() as usize);
    content
        .into_iter()
        .enumerate()
        .map(|(rank, t)| {
            let bin = if rank < hi {
                FrequencyBin::High
            } else if rank < mid {
                FrequencyBin::Medium
            } else {
                FrequencyBin::Low
            };
            (t, bin)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencyRow {
    pub token: String,
    pub bin: FrequencyBin,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: FrequencyBin,
    pub tokens: usize,
    pub mean_confidence: f64,
    pub mean_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodCorpusResult {
    pub name: String,
    pub in_domain: usize,
    pub out_of_domain: usize,
    /// In-domain sentences are the positive class.
    pub detection: DetectionPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub corpora: Vec<OodCorpusResult>,
    pub tokens: Vec<TokenFrequencyRow>,
    pub bins: Vec<BinSummary>,
}

/// Own translations of `corpus`, scored by forcing them back through the
/// model. An empty hypothesis keeps the scores recorded while decoding.
pub fn score_own_translations(
    model: &SeqModel,
    corpus: &ParallelCorpus,
    beam: &BeamConfig,
) -> Result<(Vec<Hypothesis>, Vec<ForcedScore>)> {
    let (srcs, _) = refs(corpus);
    let hyps: Vec<Hypothesis> = translate(model, &srcs, beam)?.into_iter().map(|mut n| n.remove(0)).collect();
    let keep: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].words().is_empty()).collect();
    let ks: Vec<&[usize]> = keep.iter().map(|&i| srcs[i]).collect();
    let kt: Vec<&[usize]> = keep.iter().map(|&i| hyps[i].words()).collect();
    let mut forced: Vec<Option<ForcedScore>> = vec![None; hyps.len()];
    for (i, f) in keep.iter().zip(force_decode_batch(model, &ks, &kt)?) {
        forced[*i] = Some(f);
    }
    let forced = forced
        .into_iter()
        .zip(&hyps)
        .map(|(f, h)| {
            f.unwrap_or_else(|| ForcedScore {
                log_probs: h.log_probs.clone(),
                confidences: h.confidences.clone(),
                entropies: vec![0.0; h.tokens.len()],
                predicted: h.tokens.clone(),
            })
        })
        .collect();
    Ok((hyps, forced))
}

/// Separates the in-domain test set from each shifted corpus by sentence TP
/// and Conf of the model's own translations, and tabulates in-domain token
/// confidence by training-frequency band.
pub fn run_ood_experiment(
    model: &SeqModel,
    train_corpus: &ParallelCorpus,
    in_test: &ParallelCorpus,
    ood: &[(String, ParallelCorpus)],
    beam: &BeamConfig,
) -> Result<OodReport> {
    if in_test.is_empty() || ood.iter().any(|(_, c)| c.is_empty()) {
        return Err(EvalError::Config("empty corpus in the OOD experiment".into()));
    }
    let vocab = train_corpus.vocab();
    let (in_hyps, in_forced) = score_own_translations(model, in_test, beam)?;
    let in_tp: Vec<f64> = in_forced.iter().map(metric_tp).collect::<Result<_>>()?;
    let in_conf: Vec<f64> = in_forced.iter().map(metric_conf).collect::<Result<_>>()?;
    let mut corpora = Vec::new();
    for (name, c) in ood {
        let c = c.reencode(vocab)?;
        log::info!("ood corpus {name}: {} pairs, unk rate {:.3}", c.len(), c.unk_rate());
        let (_, forced) = score_own_translations(model, &c, beam)?;
        let mut tp = in_tp.clone();
        let mut conf = in_conf.clone();
        for f in &forced {
            tp.push(metric_tp(f)?);
            conf.push(metric_conf(f)?);
        }
        let mut labels = vec![true; in_tp.len()];
        labels.resize(tp.len(), false);
        corpora.push(OodCorpusResult {
            name: name.clone(),
            in_domain: in_tp.len(),
            out_of_domain: forced.len(),
            detection: DetectionPair::new(&tp, &conf, &labels)?,
        });
    }

    let bins = frequency_bins(train_corpus);
    let mut per_token: HashMap<usize, (usize, f64, f64)> = HashMap::new();
    for (h, f) in in_hyps.iter().zip(&in_forced) {
        for (i, &t) in h.words().iter().enumerate() {
            if t == EOS || !bins.contains_key(&t) {
                continue;
            }
            let e = per_token.entry(t).or_default();
            e.0 += 1;
            e.1 += f.confidences[i];
            e.2 += f.log_probs[i].exp();
        }
    }
    let mut ids: Vec<usize> = per_token.keys().copied().collect();
    ids.sort_unstable();
    let tokens: Vec<TokenFrequencyRow> = ids
        .iter()
        .map(|t| {
            let (n, c, p) = per_token[t];
            TokenFrequencyRow {
                token: vocab.token(*t).unwrap_or("<unk>").to_string(),
                bin: bins[t],
                count: n,
                mean_confidence: c / n as f64,
                mean_probability: p / n as f64,
            }
        })
        .collect();
    let bin_rows = [FrequencyBin::High, FrequencyBin::Medium, FrequencyBin::Low]
        .into_iter()
        .filter_map(|b| {
            let (n, c, p) = ids
                .iter()
                .filter(|t| bins[*t] == b)
                .map(|t| per_token[t])
                .fold((0, 0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1, a.2 + x.2));
            (n > 0).then(|| BinSummary {
                bin: b,
                tokens: n,
                mean_confidence: c / n as f64,
                mean_probability: p / n as f64,
            })
        })
        .collect();
    Ok(OodReport { corpora, tokens, bins: bin_rows })
}

/// The three standard shifts of `task`, `n` pairs each.
pub fn standard_ood_corpora(task: &TaskSpec, n: usize) -> Result<Vec<(String, ParallelCorpus)>> {
    let shifts = [
        DomainShift::VocabShift,
        DomainShift::LengthShift { min_len: task.max_len + 5, max_len: task.max_len + 20 },
        DomainShift::RuleShift,
    ];
    let base = task.with_seed(task.seed ^ TEST_STREAM);
    shifts.iter().map(|s| Ok((s.name().to_string(), generate_ood_corpus(&base, s, n)?))).collect()
}

// ---------------------------------------------------------------- qe

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QeConfig {
    /// Sentence corruption rate of the training corpus.
    pub train_noise: f64,
    pub train_word_rate: f64,
    /// Word corruption rates cycled over the test sentences.
    pub test_word_rates: Vec<f64>,
    pub mc_passes: usize,
    pub mc_dropout: f64,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            train_noise: 0.3,
            train_word_rate: 0.3,
            test_word_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            mc_passes: 30,
            mc_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: String,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeReport {
    pub sentences: Vec<ScoredSentence>,
    pub correlations: Vec<Correlation>,
    /// Largest `|D-Comb - (D-TP + D-Conf)|` over sentences.
    pub d_comb_max_gap: Option<f64>,
}

/// Test set of mixed quality: reference translations with a cycling share
/// of tokens overwritten. Returns the corrupted corpus and the token
/// accuracy of each given translation against its reference.
pub fn mixed_quality_test(setup: &Setup, word_rates: &[f64]) -> Result<(ParallelCorpus, Vec<f64>)> {
    if word_rates.is_empty() {
        return Err(EvalError::Config("no test word rates".into()));
    }
    let clean = setup.test_corpus()?;
    let mut pairs = clean.pairs().to_vec();
    for (g, &w) in word_rates.iter().enumerate() {
        let idx: Vec<usize> = (g..clean.len()).step_by(word_rates.len()).collect();
        let mut rng = RngState::new(setup.task.seed).substream("qe-test", g as u64);
        let part = corrupt_targets(&clean.subset(&idx), if w > 0.0 { 1.0 } else { 0.0 }, w, &mut rng)?;
        for (&i, p) in idx.iter().zip(part.pairs()) {
            pairs[i] = p.clone();
        }
    }
    let test = clean.with_pairs(pairs)?;
    let gold = test
        .pairs()
        .iter()
        .zip(clean.pairs())
        .map(|(t, r)| t.tgt.iter().zip(&r.tgt).filter(|(a, b)| a == b).count() as f64 / r.tgt.len() as f64)
        .collect();
    Ok((test, gold))
}

/// Scores given translations with every metric, Monte Carlo ones included
/// when `mc_passes > 0`, and correlates each with `gold`.
pub fn score_qe(model: &SeqModel, test: &ParallelCorpus, gold: &[f64], cfg: &QeConfig, seed: u64) -> Result<QeReport> {
    let (srcs, tgts) = refs(test);
    let forced = force_decode_batch(model, &srcs, &tgts)?;
    let mc = if cfg.mc_passes > 0 {
        Some(mc_passes_batch(model, &srcs, &tgts, cfg.mc_passes, cfg.mc_dropout, &RngState::new(seed))?)
    } else {
        None
    };
    let sentences: Vec<ScoredSentence> = forced
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let passes: Option<Vec<&ForcedScore>> = mc.as_ref().map(|m| m.iter().map(|p| &p[i]).collect());
            ScoredSentence::new(i, f, passes.as_deref(), Some(gold[i]))
        })
        .collect::<Result<_>>()?;
    let mut correlations = Vec::new();
    if let Some(first) = sentences.first() {
        for (k, (name, _)) in first.columns().into_iter().enumerate() {
            let xs: Vec<f64> = sentences.iter().map(|s| s.columns()[k].1).collect();
            let r = match pearson(&xs, gold) {
                Ok(r) => Some(r),
                Err(EvalError::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            correlations.push(Correlation { metric: name.to_string(), pearson: r });
        }
    }
    let d_comb_max_gap = mc.as_ref().map(|_| {
        sentences.iter().map(|s| (s.d_comb.unwrap() - (s.d_tp.unwrap() + s.d_conf.unwrap())).abs()).fold(0.0, f64::max)
    });
    Ok(QeReport { sentences, correlations, d_comb_max_gap })
}

/// Trains on a noisy corpus, then scores the mixed-quality test set.
pub fn run_qe_experiment(setup: &Setup, cfg: &QeConfig) -> Result<QeReport> {
    setup.validate()?;
    let corpus = noisy_corpus(setup, cfg.train_noise, cfg.train_word_rate)?;
    let (model, _) = setup.train_on(&corpus, &TrainOutputs::default())?;
    let (test, gold) = mixed_quality_test(setup, &cfg.test_word_rates)?;
    score_qe(&model, &test, &gold, cfg, setup.task.seed)
}

// ---------------------------------------------------------------- density

/// Teacher-forced reference tokens of `corpus`: gold probability,
/// confidence, and whether the model's top prediction was the gold token.
pub fn token_scores(model: &SeqModel, corpus: &ParallelCorpus) -> Result<Vec<TokenScore>> {
    let (srcs, tgts) = refs(corpus);
    let forced = force_decode_batch(model, &srcs, &tgts)?;
    let mut out = Vec::new();
    for (f, t) in forced.iter().zip(&tgts) {
        for (i, &lp) in f.log_probs.iter().enumerate() {
            let gold = t.get(i).copied().unwrap_or(EOS);
            out.push(TokenScore {
                probability: lp.exp(),
                confidence: f.confidences[i],
                correct: f.predicted[i] == gold,
            });
        }
    }
    Ok(out)
}

pub fn run_density(model: &SeqModel, corpus: &ParallelCorpus, cfg: &DensityConfig) -> Result<DensityReport> {
    density_report(&token_scores(model, corpus)?, cfg)
}
