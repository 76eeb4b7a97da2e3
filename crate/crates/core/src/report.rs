//! Output files: `rounds.csv`, `summary.json` and friends.
//!
//! Floats in CSV output use nine significant digits in `%g` style so that
//! files from identical runs compare byte for byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{ExperimentOutput, RoundRecord, RunMetadata};

pub const ROUNDS_HEADER: [&str; 8] = [
    "round",
    "client_id",
    "test_acc",
    "train_loss",
    "alpha",
    "gamma_grad",
    "gamma_data",
    "mask_popcount",
];

/// Formats like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub fn rounds_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv_writer(Vec::new());
    w.write_record(ROUNDS_HEADER)?;
    for r in records {
        for c in &r.clients {
            w.write_record([
                r.round.to_string(),
                c.client_id.to_string(),
                fmt_g9(c.test_acc),
                fmt_g9(c.train_loss),
                fmt_g9(c.alpha),
                fmt_g9(c.gamma_grad),
                fmt_g9(c.gamma_data),
                c.mask_popcount.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::arg(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes rows of already-formatted cells under `header`.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_mean_acc: f64,
    pub final_std_acc: f64,
    pub per_client_acc: Vec<f64>,
    pub rounds: usize,
    pub wall_ms: f64,
    pub config_hash: String,
    pub algorithm: String,
    pub seed: u64,
    pub metadata: RunMetadata,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, output: &ExperimentOutput, wall_ms: f64) -> Self {
        let last = output.records.last();
        Self {
            final_mean_acc: last.map_or(f64::NAN, |r| r.mean_acc),
            final_std_acc: last.map_or(f64::NAN, |r| r.std_acc),
            per_client_acc: last.map_or_else(Vec::new, |r| r.clients.iter().map(|c| c.test_acc).collect()),
            rounds: cfg.rounds,
            wall_ms,
            config_hash: cfg.config_hash(),
            algorithm: cfg.algorithm.name().to_string(),
            seed: cfg.seed,
            metadata: output.metadata.clone(),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `summary.json` and `config_resolved.json` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, output: &ExperimentOutput, summary: &Summary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("rounds.csv"), &rounds_csv(&output.records)?)?;
    write_file(
        &dir.join("summary.json"),
        &(serde_json::to_string_pretty(summary)? + "\n"),
    )?;
    write_file(&dir.join("config_resolved.json"), &(cfg.to_canonical_json() + "\n"))?;
    Ok(())
}
