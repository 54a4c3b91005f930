//! Token universe: codebook geometry, audio frames, mixed prompts, and the
//! multi-codebook fusion kernel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::time::SimDuration;

/// Number of slots in the hashed text vocabulary.
pub const TEXT_VOCAB: u32 = 32_768;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("codebook {codebook}: token id {id} out of range for vocab of {vocab}")]
    OutOfRange { codebook: usize, id: u32, vocab: usize },
    #[error("frame carries {got} acoustic ids, expected {expected}")]
    FrameWidth { expected: usize, got: usize },
    #[error("invalid codebook config: {0}")]
    Config(String),
    #[error("invalid prompt segment: {0}")]
    Segment(String),
    #[error("embedding table shape mismatch: {0}")]
    Shape(String),
}

fn default_n_codebooks() -> usize {
    10
}
fn default_semantic_vocab() -> usize {
    4096
}
fn default_acoustic_vocab_sizes() -> Vec<usize> {
    vec![1024; 9]
}
fn default_sample_rate() -> u32 {
    44_100
}
fn default_samples_per_frame() -> u32 {
    2048
}
fn default_eos() -> u32 {
    4095
}

/// Codebook geometry of the residual audio codec.
///
/// Codebook 0 is semantic, codebooks `1..n_codebooks` are acoustic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    #[serde(default = "default_n_codebooks")]
    pub n_codebooks: usize,
    #[serde(default = "default_semantic_vocab")]
    pub semantic_vocab: usize,
    #[serde(default = "default_acoustic_vocab_sizes")]
    pub acoustic_vocab_sizes: Vec<usize>,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default = "default_samples_per_frame")]
    pub samples_per_frame: u32,
    #[serde(default = "default_eos")]
    pub eos_semantic_id: u32,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            n_codebooks: default_n_codebooks(),
            semantic_vocab: default_semantic_vocab(),
            acoustic_vocab_sizes: default_acoustic_vocab_sizes(),
            sample_rate: default_sample_rate(),
            samples_per_frame: default_samples_per_frame(),
            eos_semantic_id: default_eos(),
        }
    }
}

impl CodebookConfig {
    /// Uniform acoustic vocab, EOS at the top of the semantic range.
    pub fn uniform(n_codebooks: usize, semantic_vocab: usize, acoustic_vocab: usize) -> Self {
        Self {
            n_codebooks,
            semantic_vocab,
            acoustic_vocab_sizes: vec![acoustic_vocab; n_codebooks.saturating_sub(1)],
            eos_semantic_id: semantic_vocab.saturating_sub(1) as u32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        let bad = |m: String| Err(TokenError::Config(m));
        if self.n_codebooks < 2 {
            return bad(format!("n_codebooks must be >= 2, got {}", self.n_codebooks));
        }
        if self.acoustic_vocab_sizes.len() != self.n_codebooks - 1 {
            return bad(format!(
                "acoustic_vocab_sizes has {} entries, expected {}",
                self.acoustic_vocab_sizes.len(),
                self.n_codebooks - 1
            ));
        }
        if self.semantic_vocab < 2 || self.acoustic_vocab_sizes.iter().any(|&v| v < 2) {
            return bad("every vocab size must be >= 2".into());
        }
        if self.eos_semantic_id as usize >= self.semantic_vocab {
            return bad(format!(
                "eos_semantic_id {} not below semantic_vocab {}",
                self.eos_semantic_id, self.semantic_vocab
            ));
        }
        if self.sample_rate == 0 || self.samples_per_frame == 0 {
            return bad("sample_rate and samples_per_frame must be positive".into());
        }
        Ok(())
    }

    /// Vocab size of codebook `k` (0 = semantic).
    pub fn vocab(&self, k: usize) -> usize {
        if k == 0 {
            self.semantic_vocab
        } else {
            self.acoustic_vocab_sizes[k - 1]
        }
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.samples_per_frame as f64
    }

    /// Audio duration of one frame (2048 / 44100 s by default).
    pub fn frame_duration(&self) -> SimDuration {
        let ns = self.samples_per_frame as u128 * 1_000_000_000u128 / self.sample_rate as u128;
        SimDuration::from_nanos(ns as u64)
    }

    /// Audio seconds represented by `frames` frames, computed without rounding.
    pub fn audio_seconds(&self, frames: u64) -> f64 {
        frames as f64 * self.samples_per_frame as f64 / self.sample_rate as f64
    }

    pub fn validate_frame(&self, frame: &TokenFrame) -> Result<(), TokenError> {
        if frame.acoustic.len() != self.n_codebooks - 1 {
            return Err(TokenError::FrameWidth {
                expected: self.n_codebooks - 1,
                got: frame.acoustic.len(),
            });
        }
        for (k, id) in frame.ids().enumerate() {
            let vocab = self.vocab(k);
            if id as usize >= vocab {
                return Err(TokenError::OutOfRange { codebook: k, id, vocab });
            }
        }
        Ok(())
    }
}

/// One codec frame: a semantic token plus `N - 1` acoustic tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenFrame {
    pub semantic: u32,
    pub acoustic: Vec<u32>,
}

impl TokenFrame {
    pub fn new(semantic: u32, acoustic: Vec<u32>) -> Self {
        Self { semantic, acoustic }
    }

    /// Builds a frame from a full `N`-length id row (semantic first).
    pub fn from_row(row: &[u32]) -> Option<Self> {
        let (&semantic, acoustic) = row.split_first()?;
        Some(Self { semantic, acoustic: acoustic.to_vec() })
    }

    /// All `N` ids, semantic first.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.semantic).chain(self.acoustic.iter().copied())
    }

    pub fn to_row(&self) -> Vec<u32> {
        self.ids().collect()
    }

    pub fn width(&self) -> usize {
        1 + self.acoustic.len()
    }
}

/// A piece of a mixed prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSegment {
    TextTokens(Vec<u32>),
    AudioFrames(Vec<TokenFrame>),
    SpeakerTag(u32),
    VocalTag(String),
}

impl PromptSegment {
    /// Number of cache key-units this segment contributes.
    pub fn unit_len(&self) -> usize {
        match self {
            PromptSegment::TextTokens(ids) => ids.len(),
            PromptSegment::AudioFrames(frames) => frames.len(),
            PromptSegment::SpeakerTag(_) | PromptSegment::VocalTag(_) => 1,
        }
    }

    pub fn validate(&self, cfg: &CodebookConfig) -> Result<(), TokenError> {
        match self {
            PromptSegment::TextTokens(ids) => {
                if let Some(&id) = ids.iter().find(|&&id| id >= TEXT_VOCAB) {
                    return Err(TokenError::Segment(format!("text token {id} outside text vocab")));
                }
            }
            PromptSegment::AudioFrames(frames) => {
                if frames.is_empty() {
                    return Err(TokenError::Segment("empty audio frame segment".into()));
                }
                for f in frames {
                    cfg.validate_frame(f)?;
                }
            }
            PromptSegment::SpeakerTag(_) => {}
            PromptSegment::VocalTag(label) => {
                if label.is_empty() {
                    return Err(TokenError::Segment("empty vocal tag label".into()));
                }
            }
        }
        Ok(())
    }
}

/// Total key-unit length of a prompt.
pub fn prompt_units(segments: &[PromptSegment]) -> usize {
    segments.iter().map(PromptSegment::unit_len).sum()
}

/// Number of text tokens in a prompt.
pub fn text_token_count(segments: &[PromptSegment]) -> usize {
    segments
        .iter()
        .map(|s| match s {
            PromptSegment::TextTokens(ids) => ids.len(),
            _ => 0,
        })
        .sum()
}

/// Embedding tables for multi-codebook fusion. Rows are stored flat,
/// row-major, `dim` values per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables<T> {
    dim: usize,
    lm_table: Vec<T>,
    codebook_tables: Vec<Vec<T>>,
}

impl<T: Scalar> EmbeddingTables<T> {
    /// `lm_table` has `semantic_vocab * dim` entries and `codebook_tables[k]`
    /// has `vocab(k) * dim`.
    pub fn new(
        cfg: &CodebookConfig,
        dim: usize,
        lm_table: Vec<T>,
        codebook_tables: Vec<Vec<T>>,
    ) -> Result<Self, TokenError> {
        cfg.validate()?;
        if dim == 0 {
            return Err(TokenError::Shape("dim must be positive".into()));
        }
        if lm_table.len() != cfg.semantic_vocab * dim {
            return Err(TokenError::Shape(format!(
                "lm_table has {} entries, expected {}",
                lm_table.len(),
                cfg.semantic_vocab * dim
            )));
        }
        if codebook_tables.len() != cfg.n_codebooks {
            return Err(TokenError::Shape(format!(
                "{} codebook tables, expected {}",
                codebook_tables.len(),
                cfg.n_codebooks
            )));
        }
        for (k, table) in codebook_tables.iter().enumerate() {
            if table.len() != cfg.vocab(k) * dim {
                return Err(TokenError::Shape(format!(
                    "codebook table {k} has {} entries, expected {}",
                    table.len(),
                    cfg.vocab(k) * dim
                )));
            }
        }
        let finite = lm_table.iter().chain(codebook_tables.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(TokenError::Shape("non-finite embedding entry".into()));
        }
        Ok(Self { dim, lm_table, codebook_tables })
    }

    pub fn zeros(cfg: &CodebookConfig, dim: usize) -> Result<Self, TokenError> {
        let lm = vec![T::zero(); cfg.semantic_vocab * dim];
        let books = (0..cfg.n_codebooks).map(|k| vec![T::zero(); cfg.vocab(k) * dim]).collect();
        Self::new(cfg, dim, lm, books)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_codebooks(&self) -> usize {
        self.codebook_tables.len()
    }

    fn rows(table: &[T], dim: usize) -> usize {
        table.len() / dim
    }

    pub fn lm_row(&self, id: u32) -> Option<&[T]> {
        let i = id as usize;
        (i < Self::rows(&self.lm_table, self.dim)).then(|| &self.lm_table[i * self.dim..(i + 1) * self.dim])
    }

    pub fn codebook_row(&self, k: usize, id: u32) -> Option<&[T]> {
        let table = self.codebook_tables.get(k)?;
        let i = id as usize;
        (i < Self::rows(table, self.dim)).then(|| &table[i * self.dim..(i + 1) * self.dim])
    }

    pub fn lm_table_mut(&mut self) -> &mut [T] {
        &mut self.lm_table
    }

    pub fn codebook_table_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.codebook_tables[k]
    }
}

/// Multi-codebook fusion: the next slow-step input embedding for a frame.
///
/// Sums the language-model embedding of the semantic token with one
/// embedding per codebook, so the semantic token contributes twice (once via
/// the LM table, once via codebook table 0).
pub fn mcf_fuse<T: Scalar>(frame: &TokenFrame, tables: &EmbeddingTables<T>) -> Result<Vec<T>, TokenError> {
    let n = tables.n_codebooks();
    if frame.width() != n {
        return Err(TokenError::FrameWidth { expected: n - 1, got: frame.acoustic.len() });
    }
    let lm = tables.lm_row(frame.semantic).ok_or(TokenError::OutOfRange {
        codebook: 0,
        id: frame.semantic,
        vocab: tables.lm_table.len() / tables.dim,
    })?;
    let mut out = lm.to_vec();
    for (k, id) in frame.ids().enumerate() {
        let row = tables.codebook_row(k, id).ok_or(TokenError::OutOfRange {
            codebook: k,
            id,
            vocab: tables.codebook_tables[k].len() / tables.dim,
        })?;
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(out)
}
