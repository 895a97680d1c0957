use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::density::DensityReport;
use super::experiments::DetectionPair;
use super::{EvalError, Result};

/// Version of every CSV and JSON layout written here.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One row per record, header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| EvalError::Report(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Machine-readable summary of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub seeds: Vec<u64>,
}

/// Flat detection-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub split: String,
    pub score: String,
    pub auroc: f64,
    pub aupr: f64,
    pub eer: f64,
    pub det: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl DetectionRow {
    /// Probability-based row, then confidence-based row.
    pub fn pair(split: &str, d: &DetectionPair) -> [Self; 2] {
        let row = |score: &str, r: &super::DetectionReport| Self {
            split: split.to_string(),
            score: score.to_string(),
            auroc: r.auroc,
            aupr: r.aupr,
            eer: r.eer,
            det: r.det,
            positives: r.positives,
            negatives: r.negatives,
        };
        [row("probability", &d.probability), row("confidence", &d.confidence)]
    }
}

/// Flat density-table row: one bin of one score and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub score: String,
    pub class: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

impl DensityRow {
    pub fn table(r: &DensityReport) -> Vec<Self> {
        let bins = r.config.bins;
        let mut rows = Vec::new();
        for (score, d) in [("probability", &r.probability), ("confidence", &r.confidence)] {
            for (class, counts) in [("correct", &d.correct), ("incorrect", &d.incorrect)] {
                for (i, &count) in counts.iter().enumerate() {
                    rows.push(Self {
                        score: score.to_string(),
                        class: class.to_string(),
                        lower: i as f64 / bins as f64,
                        upper: (i + 1) as f64 / bins as f64,
                        count,
                    });
                }
            }
        }
        rows
    }
}
