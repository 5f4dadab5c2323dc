//! Training metrics and run manifests.
//!
//! Metrics are CSV under the same strict dialect as datasets: header
//! `iter,objective,oracle_loglik,wall_ms`, one row per logged iteration.
//! When no exact log-likelihood oracle applies to the run, the
//! `oracle_loglik` column is omitted from the header entirely rather than
//! filled with an approximation.
//!
//! Every command also writes a `manifest.ini` holding the artifact
//! version, the SHA-256 of the exact config bytes, and the effective seed
//! — enough to reproduce the run bit for bit. Note that `wall_ms` is a
//! measurement; reproducibility claims cover every other column.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::HarnessError;

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub iter: usize,
    pub objective: f64,
    pub oracle_loglik: Option<f64>,
    pub wall_ms: u64,
}

/// Append-only record of a training run plus its summary block.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub seed: u64,
    pub converged: bool,
}

impl TrainReport {
    /// All rows must agree on whether the oracle column is present.
    pub fn has_oracle(&self) -> bool {
        let present = self.rows.first().map_or(false, |r| r.oracle_loglik.is_some());
        assert!(
            self.rows.iter().all(|r| r.oracle_loglik.is_some() == present),
            "rows disagree on oracle column presence"
        );
        present
    }
}

pub fn write_metrics(path: &Path, report: &TrainReport) -> Result<(), HarnessError> {
    let oracle = report.has_oracle();
    let mut out = String::new();
    if oracle {
        out.push_str("iter,objective,oracle_loglik,wall_ms\n");
    } else {
        out.push_str("iter,objective,wall_ms\n");
    }
    for row in &report.rows {
        match row.oracle_loglik {
            Some(o) => {
                let _ = writeln!(out, "{},{},{},{}", row.iter, row.objective, o, row.wall_ms);
            }
            None => {
                let _ = writeln!(out, "{},{},{}", row.iter, row.objective, row.wall_ms);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<TrainRow>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read metrics {}: {e}", path.display()))
    })?;
    let bad = |msg: String| HarnessError::Config(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty metrics file".into()))?;
    let oracle = match header {
        "iter,objective,oracle_loglik,wall_ms" => true,
        "iter,objective,wall_ms" => false,
        other => return Err(bad(format!("unexpected metrics header `{other}`"))),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let expect = if oracle { 4 } else { 3 };
        if fields.len() != expect {
            return Err(bad(format!("row {}: expected {expect} fields", i + 1)));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("row {}: `{s}` is not a number", i + 1)))
        };
        rows.push(TrainRow {
            iter: fields[0]
                .parse()
                .map_err(|_| bad(format!("row {}: bad iteration index", i + 1)))?,
            objective: parse_f(fields[1])?,
            oracle_loglik: if oracle { Some(parse_f(fields[2])?) } else { None },
            wall_ms: fields[expect - 1]
                .parse()
                .map_err(|_| bad(format!("row {}: bad wall_ms", i + 1)))?,
        });
    }
    Ok(rows)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Writes `manifest.ini` for a run. `extra` lands in a `[summary]` section
/// (e.g. final parameter hash and convergence flag after training).
pub fn write_manifest(
    path: &Path,
    command: &str,
    config_bytes: &[u8],
    seed: u64,
    extra: &[(&str, String)],
) -> Result<(), HarnessError> {
    let mut out = String::new();
    let _ = writeln!(out, "[manifest]");
    let _ = writeln!(out, "artifact_version = {}", super::ARTIFACT_VERSION);
    let _ = writeln!(out, "command = {command}");
    let _ = writeln!(out, "config_sha256 = {}", sha256_hex(config_bytes));
    let _ = writeln!(out, "seed = {seed}");
    if !extra.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "[summary]");
        for (k, v) in extra {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
