//! Deterministic stand-in for the slow/fast autoregressive model pair.
//!
//! Frames are drawn from hash sub-streams keyed by `(state seed, step)` for
//! the semantic token and `(state seed, step, k, semantic)` for acoustic
//! token `k`, so a decode can be resumed at any step without replaying the
//! earlier ones. Costs are pure configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{mix, unit_f64};
use crate::radix::{prompt_digest, KeyUnit};
use crate::time::SimDuration;
use crate::token::{prompt_units, text_token_count, CodebookConfig, PromptSegment, TokenError, TokenFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("skip_units {skip} exceeds prompt length {total}")]
    SkipTooLong { skip: usize, total: usize },
    #[error("decode step after end of sequence")]
    Finished,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Token(#[from] TokenError),
}

fn default_prefill_cost() -> SimDuration {
    SimDuration::from_micros(200)
}
fn default_slow_cost() -> SimDuration {
    SimDuration::from_millis(5)
}
fn default_fast_cost() -> SimDuration {
    SimDuration::from_micros(450)
}
fn default_ratio() -> f64 {
    4.24
}
fn default_jitter() -> f64 {
    0.1
}

/// Cost model and length model of the mock generator. Durations are in
/// milliseconds in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockModelConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prefill_cost")]
    pub prefill_cost_per_unit: SimDuration,
    #[serde(default = "default_slow_cost")]
    pub slow_step_cost: SimDuration,
    #[serde(default = "default_fast_cost")]
    pub fast_step_cost_per_codebook: SimDuration,
    #[serde(default = "default_ratio")]
    pub frames_per_text_token: f64,
    #[serde(default = "default_jitter")]
    pub ratio_jitter: f64,
}

impl Default for MockModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prefill_cost_per_unit: default_prefill_cost(),
            slow_step_cost: default_slow_cost(),
            fast_step_cost_per_codebook: default_fast_cost(),
            frames_per_text_token: default_ratio(),
            ratio_jitter: default_jitter(),
        }
    }
}

impl MockModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.frames_per_text_token.is_finite() && self.frames_per_text_token > 0.0) {
            return Err(ModelError::Config("frames_per_text_token must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ratio_jitter) {
            return Err(ModelError::Config("ratio_jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-request sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplingParams {
    pub seed: u64,
    pub max_frames: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { seed: 0, max_frames: 4096 }
    }
}

/// Mutable generation state of one job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockModelState {
    rng_state: u64,
    frames_emitted: u32,
    target_frames: u32,
    prompt_digest: u64,
    finished: bool,
}

impl MockModelState {
    pub fn frames_emitted(&self) -> u32 {
        self.frames_emitted
    }

    pub fn target_frames(&self) -> u32 {
        self.target_frames
    }

    pub fn prompt_digest(&self) -> u64 {
        self.prompt_digest
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Positions the state as if `frames` steps had already been decoded.
    /// Used when a preempted job is recomputed.
    pub fn fast_forward(&mut self, frames: u32) {
        self.frames_emitted = frames.min(self.target_frames);
    }
}

/// Output of one decode step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    pub frame: TokenFrame,
    pub cost: SimDuration,
    /// Set on the end-of-sequence frame, which carries the EOS semantic id
    /// and is not audio.
    pub finished: bool,
}

/// `round(ratio * text_tokens)` before jitter.
pub fn expected_frames(text_tokens: usize, cfg: &MockModelConfig) -> usize {
    (cfg.frames_per_text_token * text_tokens as f64).round() as usize
}

#[derive(Debug, Clone)]
pub struct MockModel {
    codebook: CodebookConfig,
    cfg: MockModelConfig,
}

impl MockModel {
    pub fn new(codebook: CodebookConfig, cfg: MockModelConfig) -> Result<Self, ModelError> {
        codebook.validate()?;
        cfg.validate()?;
        Ok(Self { codebook, cfg })
    }

    pub fn codebook(&self) -> &CodebookConfig {
        &self.codebook
    }

    pub fn config(&self) -> &MockModelConfig {
        &self.cfg
    }

    pub fn prefill_cost(&self, units: usize) -> SimDuration {
        self.cfg.prefill_cost_per_unit * units as u64
    }

    /// Slow step plus one fast step per acoustic codebook.
    pub fn per_frame_cost(&self) -> SimDuration {
        self.cfg.slow_step_cost + self.cfg.fast_step_cost_per_codebook * (self.codebook.n_codebooks as u64 - 1)
    }

    /// Target length after deterministic jitter, capped by `max_frames`.
    pub fn target_frames(&self, text_tokens: usize, digest: u64, sampling: &SamplingParams) -> u32 {
        let u = unit_f64(mix("length-jitter", &[self.cfg.seed, sampling.seed, digest]));
        let factor = 1.0 + self.cfg.ratio_jitter * (2.0 * u - 1.0);
        let target = (self.cfg.frames_per_text_token * text_tokens as f64 * factor).round();
        (target.max(0.0) as u64).min(sampling.max_frames as u64) as u32
    }

    /// Runs (simulated) prefill over the prompt, skipping the first
    /// `skip_units` key-units whose state is already cached. The returned
    /// state depends on every unit regardless of `skip_units`.
    pub fn prefill(
        &self,
        segments: &[PromptSegment],
        sampling: &SamplingParams,
        skip_units: usize,
    ) -> Result<(MockModelState, SimDuration), ModelError> {
        let total = prompt_units(segments);
        if total == 0 {
            return Err(ModelError::EmptyPrompt);
        }
        if skip_units > total {
            return Err(ModelError::SkipTooLong { skip: skip_units, total });
        }
        for s in segments {
            s.validate(&self.codebook)?;
        }
        let units = KeyUnit::from_segments(segments);
        let state = self.state_for(&units, text_token_count(segments), sampling);
        Ok((state, self.prefill_cost(total - skip_units)))
    }

    /// Builds the post-prefill state from precomputed prompt key-units.
    pub fn state_for(&self, prompt: &[KeyUnit], text_tokens: usize, sampling: &SamplingParams) -> MockModelState {
        let digest = prompt_digest(prompt);
        MockModelState {
            rng_state: mix("model-state", &[self.cfg.seed, sampling.seed, digest]),
            frames_emitted: 0,
            target_frames: self.target_frames(text_tokens, digest, sampling),
            prompt_digest: digest,
            finished: false,
        }
    }

    fn semantic_at(&self, state: &MockModelState, step: u32) -> u32 {
        // Uniform over the semantic vocab with the EOS id removed.
        let eos = self.codebook.eos_semantic_id;
        let span = self.codebook.semantic_vocab as u64 - 1;
        let id = (mix("semantic", &[state.rng_state, step as u64]) % span) as u32;
        if id >= eos {
            id + 1
        } else {
            id
        }
    }

    fn acoustic_at(&self, state: &MockModelState, step: u32, semantic: u32) -> Vec<u32> {
        (1..self.codebook.n_codebooks)
            .map(|k| {
                let h = mix("acoustic", &[state.rng_state, step as u64, k as u64, semantic as u64]);
                (h % self.codebook.vocab(k) as u64) as u32
            })
            .collect()
    }

    /// One slow step followed by the depth-wise fast steps.
    pub fn decode_step(&self, state: &mut MockModelState) -> Result<DecodeOutput, ModelError> {
        if state.finished {
            return Err(ModelError::Finished);
        }
        let cost = self.per_frame_cost();
        let step = state.frames_emitted;
        if step >= state.target_frames {
            state.finished = true;
            let eos = self.codebook.eos_semantic_id;
            let frame = TokenFrame::new(eos, self.acoustic_at(state, step, eos));
            return Ok(DecodeOutput { frame, cost, finished: true });
        }
        let semantic = self.semantic_at(state, step);
        let frame = TokenFrame::new(semantic, self.acoustic_at(state, step, semantic));
        state.frames_emitted += 1;
        Ok(DecodeOutput { frame, cost, finished: false })
    }
}
