//! Voice-reuse workloads and serving reports.

mod report;
mod sim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::mix;
use crate::time::SimDuration;
use crate::token::CodebookConfig;
use crate::wire::{GenerateRequest, SystemPrompt};

pub use report::{RequestRow, RunReport, Summary};
pub use sim::run_in_process;

/// Current `WorkloadSpec` schema version.
pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error("engine: {0}")]
    Engine(#[from] crate::scheduler::EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("driver: {0}")]
    Driver(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Open loop, exponential inter-arrival gaps on the simulated clock.
    Poisson { rate_per_s: f64 },
    /// Keeps `concurrency` requests in flight; the next one is sent when
    /// one completes.
    Closed { concurrency: usize },
}

impl Default for Arrival {
    fn default() -> Self {
        Arrival::Poisson { rate_per_s: 2.0 }
    }
}

/// Text length in words, `round(exp(N(mu, sigma)))` clamped to `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextLen {
    pub mu: f64,
    pub sigma: f64,
    #[serde(default = "one")]
    pub min: usize,
    #[serde(default = "default_text_max")]
    pub max: usize,
}

fn one() -> usize {
    1
}
fn default_text_max() -> usize {
    512
}

impl Default for TextLen {
    fn default() -> Self {
        Self { mu: 3.0, sigma: 0.5, min: 1, max: default_text_max() }
    }
}

fn d_version() -> u32 {
    SPEC_VERSION
}
fn d_requests() -> usize {
    200
}
fn d_voices() -> usize {
    100
}
fn d_skew() -> f64 {
    1.1
}
fn d_ref_frames() -> usize {
    189
}
fn d_system_text() -> String {
    "<|speaker:0|>".into()
}
fn d_max_frames() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "d_version")]
    pub version: u32,
    #[serde(default = "d_requests")]
    pub n_requests: usize,
    #[serde(default = "d_voices")]
    pub n_voices: usize,
    /// Zipf exponent over voice ranks; 0 is uniform.
    #[serde(default = "d_skew")]
    pub voice_skew: f64,
    #[serde(default)]
    pub arrival: Arrival,
    #[serde(default)]
    pub text_len: TextLen,
    /// Reference frames per voice.
    #[serde(default = "d_ref_frames")]
    pub ref_frames: usize,
    #[serde(default = "d_system_text")]
    pub system_text: String,
    /// Draw texts from this many fixed texts instead of a fresh one per request.
    #[serde(default)]
    pub text_pool: Option<usize>,
    #[serde(default = "d_max_frames")]
    pub max_frames: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl WorkloadSpec {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.to_string()));
        if self.version != SPEC_VERSION {
            return Err(BenchError::Spec(format!("unsupported version {}, expected {SPEC_VERSION}", self.version)));
        }
        if self.n_voices == 0 {
            return bad("n_voices must be >= 1");
        }
        if !(self.voice_skew.is_finite() && self.voice_skew >= 0.0) {
            return bad("voice_skew must be finite and >= 0");
        }
        match self.arrival {
            Arrival::Poisson { rate_per_s } if !(rate_per_s.is_finite() && rate_per_s > 0.0) => {
                return bad("arrival.rate_per_s must be > 0")
            }
            Arrival::Closed { concurrency: 0 } => return bad("arrival.concurrency must be >= 1"),
            _ => {}
        }
        if !(self.text_len.mu.is_finite() && self.text_len.sigma.is_finite() && self.text_len.sigma >= 0.0) {
            return bad("text_len.mu/sigma must be finite, sigma >= 0");
        }
        if self.text_len.min == 0 || self.text_len.min > self.text_len.max {
            return bad("text_len needs 1 <= min <= max");
        }
        if self.text_pool == Some(0) {
            return bad("text_pool must be >= 1");
        }
        if self.max_frames == 0 {
            return bad("max_frames must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedRequest {
    pub index: usize,
    /// Offset from the start of the run (open loop only; closed-loop
    /// requests are sent as slots free up).
    pub at: SimDuration,
    pub voice: usize,
    pub request: GenerateRequest,
}

/// Zipf(s) over ranks `1..=n` by inverse CDF, so one uniform maps to a
/// voice monotonically and runs with different skews can share uniforms.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: usize, s: f64) -> Self {
        let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        let cdf = w
            .iter()
            .map(|x| {
                acc += x / total;
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn pmf(&self, k: usize) -> f64 {
        self.cdf[k] - if k == 0 { 0.0 } else { self.cdf[k - 1] }
    }

    /// Zero-based rank for `u` in `[0, 1)`.
    pub fn sample(&self, u: f64) -> usize {
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

fn stream(seed: u64, what: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(what, &[seed]))
}

/// Fixed reference prefix of one voice.
pub fn voice_reference(seed: u64, voice: usize, frames: usize, cfg: &CodebookConfig) -> Vec<Vec<u32>> {
    let span = cfg.semantic_vocab as u64 - 1;
    (0..frames as u64)
        .map(|i| {
            (0..cfg.n_codebooks)
                .map(|k| {
                    let h = mix("voice-ref", &[seed, voice as u64, i, k as u64]);
                    if k == 0 {
                        let id = (h % span) as u32;
                        if id >= cfg.eos_semantic_id {
                            id + 1
                        } else {
                            id
                        }
                    } else {
                        (h % cfg.vocab(k) as u64) as u32
                    }
                })
                .collect()
        })
        .collect()
}

fn text_of(seed: u64, key: u64, len_rng: &mut ChaCha8Rng, dist: &LogNormal<f64>, spec: &TextLen) -> String {
    let len = (dist.sample(len_rng).round() as usize).clamp(spec.min, spec.max);
    (0..len as u64).map(|i| format!("w{}", mix("text-word", &[seed, key, i]) % 5000)).collect::<Vec<_>>().join(" ")
}

/// Deterministic in `spec` (and `cfg`). Voice choice, arrival gaps, texts
/// and sampling seeds each come from their own random stream, so changing
/// one knob (e.g. skew) leaves the others untouched.
pub fn generate_workload(spec: &WorkloadSpec, cfg: &CodebookConfig) -> Vec<TimedRequest> {
    let zipf = ZipfTable::new(spec.n_voices, spec.voice_skew);
    let mut voice_rng = stream(spec.seed, "voice");
    let mut gap_rng = stream(spec.seed, "arrival");
    let mut text_rng = stream(spec.seed, "text");
    let mut seed_rng = stream(spec.seed, "sampling");
    let dist = LogNormal::new(spec.text_len.mu, spec.text_len.sigma).expect("validated lognormal");

    let pool: Vec<String> = match spec.text_pool {
        Some(p) => {
            let mut len_rng = stream(spec.seed, "text-pool");
            (0..p as u64).map(|j| text_of(spec.seed, j, &mut len_rng, &dist, &spec.text_len)).collect()
        }
        None => Vec::new(),
    };
    let mut refs: Vec<Option<Vec<Vec<u32>>>> = vec![None; spec.n_voices];

    let mut t = 0.0f64;
    (0..spec.n_requests)
        .map(|index| {
            let u: f64 = voice_rng.random();
            let voice = zipf.sample(u);
            if let Arrival::Poisson { rate_per_s } = spec.arrival {
                if index > 0 {
                    let v: f64 = gap_rng.random();
                    t += -(1.0 - v).ln() / rate_per_s;
                }
            }
            let text = if pool.is_empty() {
                text_of(spec.seed, 1_000_000 + index as u64, &mut text_rng, &dist, &spec.text_len)
            } else {
                pool[text_rng.random_range(0..pool.len())].clone()
            };
            let reference = refs[voice]
                .get_or_insert_with(|| voice_reference(spec.seed, voice, spec.ref_frames, cfg))
                .clone();
            let request = GenerateRequest {
                system: SystemPrompt { text: spec.system_text.clone(), reference_frames: reference },
                text,
                seed: seed_rng.random(),
                max_frames: spec.max_frames,
                stream: true,
            };
            TimedRequest { index, at: SimDuration::from_nanos((t * 1e9).round() as u64), voice, request }
        })
        .collect()
}
