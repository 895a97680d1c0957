use std::path::{Path, PathBuf};

use confnmt::data::TaskSpec;
use confnmt::evaluation::{DensityConfig, NoiseConfig, QeConfig, Setup};
use confnmt::inference::BeamConfig;
use confnmt::model::ModelConfig;
use confnmt::training::TrainSchedule;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Everything one run needs, loadable from a single TOML file.
///
/// `seed` has no default. It seeds the task, initialisation, training and
/// every experiment stream, so the per-section `seed` fields may not be set
/// directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_schedule")]
    pub train: TrainSchedule,
    #[serde(default)]
    pub data: DataSizes,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn default_schedule() -> TrainSchedule {
    Setup::default().schedule
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train_pairs: usize,
    pub test_pairs: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        let s = Setup::default();
        Self { train_pairs: s.train_pairs, test_pairs: s.test_pairs }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub noise: NoiseConfig,
    pub ood: OodConfig,
    pub qe: QeConfig,
    pub density: DensityConfig,
    pub gradcheck: GradCheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    /// Pairs per shifted corpus.
    pub pairs: usize,
    pub beam: BeamConfig,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self { pairs: 500, beam: BeamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random points per check.
    pub points: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { points: 20 }
    }
}

const SECTION_SEEDS: [&str; 3] = ["task", "model", "train"];

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// A TOML literal, or the raw text as a string when it does not parse.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override, creating tables on the way.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| config_err(format!("override `{spec}` is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let (leaf, parents) = path.split_last().expect("split yields at least one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(config_err(format!("`{}` is not a table", path[..=i].join(".")))),
        };
    }
    cur.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn in_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(config_err(format!("{name} = {x} must lie in [0, 1]")))
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for section in SECTION_SEEDS {
            if table.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(config_err(format!("`{section}.seed` is derived; set the top-level `seed` instead")));
            }
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.message()))?;
        let cfg = cfg.seeded();
        cfg.validate()?;
        Ok(cfg)
    }

    fn seeded(mut self) -> Self {
        self.task.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn setup(&self) -> Setup {
        Setup {
            task: self.task.clone(),
            model: self.model.clone(),
            schedule: self.train.clone(),
            train_pairs: self.data.train_pairs,
            test_pairs: self.data.test_pairs,
        }
        .seeded(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.setup().validate()?;
        let e = &self.experiment;
        for &r in &e.noise.rates {
            in_unit("experiment.noise.rates", r)?;
        }
        in_unit("experiment.noise.word_rate", e.noise.word_rate)?;
        in_unit("experiment.qe.train_noise", e.qe.train_noise)?;
        in_unit("experiment.qe.train_word_rate", e.qe.train_word_rate)?;
        for &r in &e.qe.test_word_rates {
            in_unit("experiment.qe.test_word_rates", r)?;
        }
        if e.qe.test_word_rates.is_empty() {
            return Err(config_err("experiment.qe.test_word_rates is empty"));
        }
        if e.qe.mc_passes == 0 {
            return Err(config_err("experiment.qe.mc_passes must be positive"));
        }
        if !(0.0..1.0).contains(&e.qe.mc_dropout) {
            return Err(config_err(format!("experiment.qe.mc_dropout = {} must lie in [0, 1)", e.qe.mc_dropout)));
        }
        e.ood.beam.validate()?;
        if e.ood.pairs == 0 {
            return Err(config_err("experiment.ood.pairs must be positive"));
        }
        if e.density.bins == 0 {
            return Err(config_err("experiment.density.bins must be positive"));
        }
        in_unit("experiment.density.over", e.density.over)?;
        in_unit("experiment.density.under", e.density.under)?;
        if e.gradcheck.points == 0 {
            return Err(config_err("experiment.gradcheck.points must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises to TOML")
    }
}
