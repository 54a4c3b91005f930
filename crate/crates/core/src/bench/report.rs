use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchError, WorkloadSpec, SPEC_VERSION};
use crate::scheduler::percentile;

/// One request's outcome. Times are milliseconds from the start of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub index: usize,
    pub voice: usize,
    pub arrival_ms: f64,
    pub finished_ms: Option<f64>,
    pub ttfa_ms: Option<f64>,
    pub rtf: Option<f64>,
    pub frames: u32,
    pub prompt_units: usize,
    pub cache_hit_units: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub failed: usize,
    /// Cache-hit units over prompt units, completed requests only.
    pub hit_rate: Option<f64>,
    pub ttfa_p50_ms: Option<f64>,
    pub ttfa_p90_ms: Option<f64>,
    pub ttfa_p99_ms: Option<f64>,
    pub rtf_mean: Option<f64>,
    pub rtf_p50: Option<f64>,
    pub rtf_p99: Option<f64>,
    pub frames_total: u64,
    /// Frames times codebooks.
    pub acoustic_tokens_total: u64,
    /// First arrival to last completion.
    pub makespan_ms: f64,
    pub tokens_per_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    /// `sim` or `http`.
    pub mode: String,
    pub spec: WorkloadSpec,
    pub summary: Summary,
    pub rows: Vec<RequestRow>,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

impl Summary {
    pub fn from_rows(rows: &[RequestRow], n_codebooks: usize) -> Self {
        let ok: Vec<&RequestRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let prompt: usize = ok.iter().map(|r| r.prompt_units).sum();
        let hit: usize = ok.iter().map(|r| r.cache_hit_units).sum();
        let ttfa = sorted(ok.iter().filter_map(|r| r.ttfa_ms).collect());
        let rtf = sorted(ok.iter().filter_map(|r| r.rtf).collect());
        let frames_total: u64 = ok.iter().map(|r| r.frames as u64).sum();
        let start = rows.iter().map(|r| r.arrival_ms).fold(f64::INFINITY, f64::min);
        let end = rows.iter().filter_map(|r| r.finished_ms).fold(f64::NEG_INFINITY, f64::max);
        let makespan_ms = if end > start { end - start } else { 0.0 };
        let tokens = frames_total * n_codebooks as u64;
        Self {
            requests: rows.len(),
            completed: ok.len(),
            failed: rows.len() - ok.len(),
            hit_rate: (prompt > 0).then(|| hit as f64 / prompt as f64),
            ttfa_p50_ms: percentile(&ttfa, 50.0),
            ttfa_p90_ms: percentile(&ttfa, 90.0),
            ttfa_p99_ms: percentile(&ttfa, 99.0),
            rtf_mean: (!rtf.is_empty()).then(|| rtf.iter().sum::<f64>() / rtf.len() as f64),
            rtf_p50: percentile(&rtf, 50.0),
            rtf_p99: percentile(&rtf, 99.0),
            frames_total,
            acoustic_tokens_total: tokens,
            makespan_ms,
            tokens_per_s: (makespan_ms > 0.0).then(|| tokens as f64 / (makespan_ms / 1e3)),
        }
    }
}

impl RunReport {
    pub fn new(mode: &str, spec: WorkloadSpec, mut rows: Vec<RequestRow>, n_codebooks: usize) -> Self {
        rows.sort_by_key(|r| r.index);
        let summary = Summary::from_rows(&rows, n_codebooks);
        Self { version: SPEC_VERSION, mode: mode.to_string(), spec, summary, rows }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, BenchError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| BenchError::Io(e.into_error()))
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }
}
