use clap::ValueEnum;
use confnmt::data::ParallelCorpus;
use confnmt::evaluation::{
    model_check, primitive_checks, run_density, run_noise_experiment, run_ood_experiment, run_qe_experiment,
    standard_ood_corpora, write_csv, write_json, DensityRow, DetectionRow, FrequencyBin, NoiseReport, OodReport,
    QeReport, Setup,
};
use confnmt::model::SeqModel;
use confnmt::training::TrainOutputs;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{config_json, load_checkpoint, summary};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run_dir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Noise,
    Ood,
    QeCorr,
    Density,
    Gradcheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Noise => "noise",
            Kind::Ood => "ood",
            Kind::QeCorr => "qe-corr",
            Kind::Density => "density",
            Kind::Gradcheck => "gradcheck",
        }
    }

    /// Whether a failed check fails the command even without `--assert`.
    pub fn always_gated(self) -> bool {
        self == Kind::Gradcheck
    }
}

/// One acceptance-tagged check of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

/// Mean confidence falls across increasing noise rates in at least three
/// quarters of the adjacent comparisons.
pub fn mostly_decreasing(means: &[f64]) -> (usize, usize, bool) {
    let comparisons = means.len().saturating_sub(1);
    let falls = means.windows(2).filter(|w| w[1] < w[0]).count();
    (falls, comparisons, comparisons > 0 && 4 * falls >= 3 * comparisons)
}

pub fn noise_checks(report: &NoiseReport) -> Vec<Check> {
    let mut checks = Vec::new();
    for target in [0.4, 0.8] {
        let Some(r) = report.rates.iter().find(|r| (r.rate - target).abs() < 1e-9) else { continue };
        match &r.detection {
            Some(d) => {
                let (c, p) = (d.confidence.auroc, d.probability.auroc);
                checks.push(check(
                    format!("noise-{target}: conf AUROC >= prob AUROC"),
                    c >= p,
                    format!("{c:.4} vs {p:.4}"),
                ));
                checks.push(check(format!("noise-{target}: conf AUROC >= 0.80"), c >= 0.80, format!("{c:.4}")));
            }
            None => checks.push(check(
                format!("noise-{target}: detection available"),
                false,
                r.note.clone().unwrap_or_default(),
            )),
        }
    }
    let mut means: Vec<(f64, f64)> =
        report.rates.iter().filter_map(|r| r.mean_confidence.map(|m| (r.rate, m))).collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m: Vec<f64> = means.iter().map(|x| x.1).collect();
    let (falls, n, ok) = mostly_decreasing(&m);
    checks.push(check("noise: mean confidence decreases with noise", ok, format!("{falls} of {n} adjacent falls")));
    checks
}

pub fn ood_checks(report: &OodReport) -> Vec<Check> {
    let mut checks = Vec::new();
    for c in &report.corpora {
        let (conf, prob) = (c.detection.confidence.auroc, c.detection.probability.auroc);
        match c.name.as_str() {
            "vocab-shift" => {
                checks.push(check("ood vocab-shift: conf AUROC >= 0.90", conf >= 0.90, format!("{conf:.4}")))
            }
            "rule-shift" => checks.push(check(
                "ood rule-shift: conf AUROC >= prob AUROC - 0.02",
                conf >= prob - 0.02,
                format!("{conf:.4} vs {prob:.4}"),
            )),
            _ => {}
        }
    }
    let bin = |b: FrequencyBin| report.bins.iter().find(|s| s.bin == b).map(|s| s.mean_confidence);
    let (low, high) = (bin(FrequencyBin::Low), bin(FrequencyBin::High));
    checks.push(check(
        "ood: Low-bin mean confidence < High-bin",
        matches!((low, high), (Some(l), Some(h)) if l < h),
        format!("{low:?} vs {high:?}"),
    ));
    checks
}

pub fn qe_checks(report: &QeReport) -> Vec<Check> {
    let conf = report.correlations.iter().find(|c| c.metric == "conf").and_then(|c| c.pearson);
    vec![
        check("qe: Pearson(Conf, DA-proxy) >= 0.3", conf.is_some_and(|r| r >= 0.3), format!("{conf:?}")),
        check(
            "qe: D-Comb = D-TP + D-Conf",
            report.d_comb_max_gap == Some(0.0),
            format!("max gap {:?}", report.d_comb_max_gap),
        ),
    ]
}

/// In-domain model: loaded from `checkpoint` when given (its vocabulary
/// must match the configured task), else trained from scratch.
fn in_domain_model(setup: &Setup, train: &ParallelCorpus, checkpoint: Option<&std::path::Path>) -> Result<SeqModel> {
    match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if &ck.vocab != train.vocab() {
                return Err(CliError::Mismatch(format!(
                    "{}: vocabulary differs from the configured task",
                    p.display()
                )));
            }
            Ok(ck.model)
        }
        None => Ok(setup.train_on(train, &TrainOutputs::default())?.0),
    }
}

/// Runs one harness, writes its tables and summary, and returns its checks.
pub fn run(kind: Kind, cfg: &RunConfig, dir: &RunDir, checkpoint: Option<&std::path::Path>) -> Result<Vec<Check>> {
    let setup = cfg.setup();
    let e = &cfg.experiment;
    let (metrics, checks) = match kind {
        Kind::Noise => {
            let report = run_noise_experiment(&setup, &e.noise)?;
            let rows: Vec<DetectionRow> = report
                .rates
                .iter()
                .filter_map(|r| r.detection.as_ref().map(|d| DetectionRow::pair(&format!("noise-{}", r.rate), d)))
                .flatten()
                .collect();
            write_csv(&dir.file("detection.csv"), &rows)?;
            write_csv(&dir.file("sentences.csv"), &report.sentences)?;
            (json!({ "word_rate": report.word_rate, "rates": report.rates }), noise_checks(&report))
        }
        Kind::Ood => {
            let train = setup.train_corpus()?;
            let test = setup.test_corpus()?;
            let model = in_domain_model(&setup, &train, checkpoint)?;
            let ood = standard_ood_corpora(&setup.task, e.ood.pairs)?;
            let report = run_ood_experiment(&model, &train, &test, &ood, &e.ood.beam)?;
            let rows: Vec<DetectionRow> =
                report.corpora.iter().flat_map(|c| DetectionRow::pair(&c.name, &c.detection)).collect();
            write_csv(&dir.file("detection.csv"), &rows)?;
            write_csv(&dir.file("tokens.csv"), &report.tokens)?;
            write_csv(&dir.file("bins.csv"), &report.bins)?;
            (json!({ "corpora": report.corpora, "bins": report.bins }), ood_checks(&report))
        }
        Kind::QeCorr => {
            let report = run_qe_experiment(&setup, &e.qe)?;
            write_csv(&dir.file("sentences.csv"), &report.sentences)?;
            write_csv(&dir.file("correlations.csv"), &report.correlations)?;
            (
                json!({
                    "gold": "per-sentence token accuracy of the given translation against the reference (DA proxy)",
                    "correlations": report.correlations,
                    "d_comb_max_gap": report.d_comb_max_gap,
                }),
                qe_checks(&report),
            )
        }
        Kind::Density => {
            let train = setup.train_corpus()?;
            let test = setup.test_corpus()?;
            let model = in_domain_model(&setup, &train, checkpoint)?;
            let report = run_density(&model, &test, &e.density)?;
            write_csv(&dir.file("density.csv"), &DensityRow::table(&report))?;
            let mut m = serde_json::to_value(&report).expect("density report serialises");
            if let Some(o) = m.as_object_mut() {
                o.remove("probability");
                o.remove("confidence");
                o.insert("probability_over_rate".into(), json!(report.probability.over_rate));
                o.insert("probability_under_rate".into(), json!(report.probability.under_rate));
                o.insert("confidence_over_rate".into(), json!(report.confidence.over_rate));
                o.insert("confidence_under_rate".into(), json!(report.confidence.under_rate));
            }
            (m, vec![])
        }
        Kind::Gradcheck => {
            let mut cases = primitive_checks(e.gradcheck.points)?;
            cases.push(model_check(e.gradcheck.points)?);
            write_csv(&dir.file("gradcheck.csv"), &cases)?;
            let checks = cases
                .iter()
                .map(|c| {
                    check(
                        format!("gradcheck {}: rel err < {:e}", c.name, c.tolerance),
                        c.passed,
                        format!("{:.3e} over {} points", c.max_rel_error, c.points),
                    )
                })
                .collect();
            (json!({ "cases": cases }), checks)
        }
    };
    write_csv(&dir.file("checks.csv"), &checks)?;
    let metrics = json!({ "results": metrics, "checks": checks });
    write_json(&dir.file("summary.json"), &summary(kind.name(), config_json(cfg), metrics, vec![cfg.seed]))?;
    Ok(checks)
}
