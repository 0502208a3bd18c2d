//! CSV reports and JSON provenance records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of an image-quality comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub n_angles: usize,
    pub fwhm_axial_mm: Option<f64>,
    pub fwhm_lateral_mm: Option<f64>,
    pub cnr_db: Option<f64>,
    pub seed: u64,
    /// Empty for methods without an ICA estimate.
    pub converged: Option<bool>,
}

/// One row of a noisy-channel sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub dataset: String,
    pub method: String,
    /// Zero-based channel indices joined with `;`.
    pub channels: String,
    pub n_noisy: usize,
    pub snr_db: f64,
    /// RMS difference between noisy and clean B-mode images, dB.
    pub rmse_db: f64,
    pub seed: u64,
    pub noise_seed: u64,
    pub converged: Option<bool>,
}

/// Write rows with a header line. Output depends only on the rows.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline; no timestamps, so identical inputs
/// give identical files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// What produced an output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Convergence flag of every ICA estimate used, in order.
    pub converged: Vec<bool>,
    pub outputs: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: "icabeam".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: Vec::new(),
            converged: Vec::new(),
            outputs: Vec::new(),
        }
    }
}
