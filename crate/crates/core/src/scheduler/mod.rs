//! Continuous-batching engine loop.
//!
//! Each [`Engine::step`] is one iteration: admit waiting requests (matching
//! their prompts against the prefix cache), advance chunked prefill, run one
//! decode step for every decoding request, hand frames to the vocoder, and
//! retire finished requests into the cache. On the simulated clock an
//! iteration lasts `max(prefill work, decode step)`; prefill cost is summed
//! over requests while a batched decode step costs one per-frame cost.

mod clock;
mod engine;

pub use clock::{Clock, ClockKind};
pub use engine::Engine;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mock::{ModelError, SamplingParams};
use crate::pager::{PagerError, RequestId};
use crate::radix::{CacheStats, RadixError};
use crate::time::{SimDuration, SimInstant};
use crate::token::{PromptSegment, TokenFrame};
use crate::vocoder::{AudioChunkDesc, VocoderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PreemptionPolicy {
    /// Newest-admitted decoding request is evicted and later recomputed.
    #[default]
    #[serde(rename = "recompute_lifo")]
    RecomputeLifo,
}

fn default_max_running() -> usize {
    16
}
fn default_prefill_chunk() -> usize {
    512
}
fn default_max_waiting() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "default_max_running")]
    pub max_running: usize,
    #[serde(default = "default_prefill_chunk")]
    pub prefill_chunk_units: usize,
    /// Frames decoded per iteration; defaults to `max_running`.
    #[serde(default)]
    pub decode_token_budget: Option<usize>,
    #[serde(default = "default_max_waiting")]
    pub max_waiting: usize,
    #[serde(default)]
    pub clock: ClockKind,
    #[serde(default)]
    pub preemption_policy: PreemptionPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            max_running: default_max_running(),
            prefill_chunk_units: default_prefill_chunk(),
            decode_token_budget: None,
            max_waiting: default_max_waiting(),
            clock: ClockKind::default(),
            preemption_policy: PreemptionPolicy::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn decode_budget(&self) -> usize {
        self.decode_token_budget.unwrap_or(self.max_running)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_running == 0 || self.prefill_chunk_units == 0 || self.max_waiting == 0 {
            return Err("scheduler counts must be >= 1".into());
        }
        if self.decode_token_budget == Some(0) {
            return Err("decode_token_budget must be >= 1".into());
        }
        Ok(())
    }
}

/// A generation job as submitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    /// Reference audio and system text first, then the target text.
    pub segments: Vec<PromptSegment>,
    pub sampling: SamplingParams,
    /// Stamped from the engine clock when absent.
    pub arrival_time: Option<SimInstant>,
}

impl Request {
    pub fn new(segments: Vec<PromptSegment>, sampling: SamplingParams) -> Self {
        Self { segments, sampling, arrival_time: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinishReason {
    Eos,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Waiting,
    Prefilling { done_units: usize },
    Decoding { frames_done: u32 },
    Preempted,
    Finished(FinishReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ticket {
    pub id: RequestId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubmitError {
    #[error("waiting queue full ({0} queued)")]
    Backpressure(usize),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Engine-fatal failures: broken internal contracts.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Pager(#[from] PagerError),
    #[error(transparent)]
    Radix(#[from] RadixError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocoder(#[from] VocoderError),
    #[error("invalid engine config: {0}")]
    Config(String),
}

/// Per-request outcome, reported with `Done`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub arrival: SimInstant,
    pub finished_at: SimInstant,
    /// Arrival to completion of the first audio chunk.
    pub ttfa: Option<SimDuration>,
    /// Arrival-to-last-audio span over the audio duration produced.
    pub rtf: Option<f64>,
    pub frames: u32,
    pub prompt_units: usize,
    /// Prompt units served from the prefix cache at first admission.
    pub cache_hit_units: usize,
    pub preemptions: u32,
    pub error: Option<String>,
}

impl RequestMetrics {
    pub fn ttfa_ms(&self) -> Option<f64> {
        self.ttfa.map(SimDuration::as_millis_f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    FrameOut { request: RequestId, step: u32, frame: TokenFrame },
    AudioChunk { chunk: AudioChunkDesc, ready_at: SimInstant },
    Done { request: RequestId, metrics: RequestMetrics },
    Preempted { request: RequestId },
}

impl EngineEvent {
    pub fn request(&self) -> RequestId {
        match self {
            EngineEvent::FrameOut { request, .. }
            | EngineEvent::Done { request, .. }
            | EngineEvent::Preempted { request } => *request,
            EngineEvent::AudioChunk { chunk, .. } => chunk.request_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGauges {
    pub page_size: usize,
    pub total_blocks: usize,
    pub free_blocks: usize,
    pub used_blocks: usize,
}

/// Point-in-time engine statistics; an immutable copy safe to hand to other
/// threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests_completed: u64,
    pub requests_failed: u64,
    pub hit_rate: Option<f64>,
    pub cache: CacheStats,
    pub resident_units: usize,
    pub ttfa_p50_ms: Option<f64>,
    pub ttfa_p99_ms: Option<f64>,
    pub mean_rtf: Option<f64>,
    pub tokens_per_s: Option<f64>,
    pub frames_total: u64,
    pub preemptions: u64,
    pub elapsed_ms: f64,
    pub pool: PoolGauges,
    pub waiting: usize,
    pub running: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}
