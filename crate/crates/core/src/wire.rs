//! JSON wire forms of generate requests and stream events.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mock::SamplingParams;
use crate::scheduler::{EngineEvent, Request, RequestMetrics};
use crate::token::{CodebookConfig, PromptSegment, TokenFrame};
use crate::transcript::parse_rich_transcript;

fn default_max_frames() -> u32 {
    SamplingParams::default().max_frames
}
fn default_stream() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemPrompt {
    #[serde(default)]
    pub text: String,
    /// Reference audio, one row of N codebook ids per frame.
    #[serde(default)]
    pub reference_frames: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub system: SystemPrompt,
    pub text: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_frames")]
    pub max_frames: u32,
    #[serde(default = "default_stream")]
    pub stream: bool,
}

/// Validation failure pointing at the offending field.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[error("{path}: {message}")]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl GenerateRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            system: SystemPrompt::default(),
            text: text.into(),
            seed: 0,
            max_frames: default_max_frames(),
            stream: true,
        }
    }

    /// Prompt segments: reference frames, then the system text, then the
    /// target text. Tags in either text are parsed here.
    pub fn to_segments(&self, cfg: &CodebookConfig) -> Result<Vec<PromptSegment>, FieldError> {
        let mut segments = Vec::new();
        if !self.system.reference_frames.is_empty() {
            let mut frames = Vec::with_capacity(self.system.reference_frames.len());
            for (i, row) in self.system.reference_frames.iter().enumerate() {
                let path = format!("system.reference_frames[{i}]");
                if row.len() != cfg.n_codebooks {
                    return Err(FieldError::new(
                        path,
                        format!("expected {} codebook ids, got {}", cfg.n_codebooks, row.len()),
                    ));
                }
                for (k, &id) in row.iter().enumerate() {
                    if id as usize >= cfg.vocab(k) {
                        return Err(FieldError::new(
                            format!("{path}[{k}]"),
                            format!("id {id} outside codebook {k} vocab of {}", cfg.vocab(k)),
                        ));
                    }
                }
                frames.push(TokenFrame::from_row(row).expect("non-empty row"));
            }
            segments.push(PromptSegment::AudioFrames(frames));
        }
        for (path, text) in [("system.text", &self.system.text), ("text", &self.text)] {
            let parsed = parse_rich_transcript(text).map_err(|e| FieldError::new(path, e.to_string()))?;
            segments.extend(parsed);
        }
        Ok(segments)
    }

    pub fn to_request(&self, cfg: &CodebookConfig) -> Result<Request, FieldError> {
        if self.max_frames == 0 {
            return Err(FieldError::new("max_frames", "must be >= 1"));
        }
        let segments = self.to_segments(cfg)?;
        if segments.iter().all(|s| s.unit_len() == 0) {
            return Err(FieldError::new("text", "prompt is empty"));
        }
        Ok(Request::new(segments, SamplingParams { seed: self.seed, max_frames: self.max_frames }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneMetrics {
    pub ttfa_ms: Option<f64>,
    pub rtf: Option<f64>,
    pub frames: u32,
    pub cache_hit_units: usize,
}

impl From<&RequestMetrics> for DoneMetrics {
    fn from(m: &RequestMetrics) -> Self {
        Self { ttfa_ms: m.ttfa_ms(), rtf: m.rtf, frames: m.frames, cache_hit_units: m.cache_hit_units }
    }
}

/// One line of a generate response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamEvent {
    Frame { step: u32, ids: Vec<u32> },
    Audio { chunk: u32, samples: u64, digest: String },
    Done { metrics: DoneMetrics },
    Error { message: String },
}

impl StreamEvent {
    /// Client-visible form of an engine event; preemption is internal.
    pub fn from_engine(ev: &EngineEvent) -> Option<Self> {
        match ev {
            EngineEvent::FrameOut { step, frame, .. } => Some(StreamEvent::Frame { step: *step, ids: frame.to_row() }),
            EngineEvent::AudioChunk { chunk, .. } => Some(StreamEvent::Audio {
                chunk: chunk.chunk_index,
                samples: chunk.sample_count,
                digest: chunk.digest.clone(),
            }),
            EngineEvent::Done { metrics, .. } => Some(match &metrics.error {
                Some(message) => StreamEvent::Error { message: message.clone() },
                None => StreamEvent::Done { metrics: metrics.into() },
            }),
            EngineEvent::Preempted { .. } => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, StreamEvent::Done { .. } | StreamEvent::Error { .. })
    }

    /// One JSON object plus `\n`.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("stream events serialize");
        s.push('\n');
        s
    }

    /// The event with timing fields removed, for replay comparison.
    pub fn without_timing(&self) -> Self {
        match self {
            StreamEvent::Done { metrics } => {
                StreamEvent::Done { metrics: DoneMetrics { ttfa_ms: None, rtf: None, ..metrics.clone() } }
            }
            other => other.clone(),
        }
    }
}
