//! Token-weighted transcription reward over rich transcripts.
//!
//! The prompt is flattened into tokens: words (weight 1), speaker tags
//! (`speaker` weight) and vocal tags (`vocal` weight). Each prompt token is
//! credited with the confidence of the hypothesis token it aligns to, or 0
//! when it has no correct counterpart. The reward is
//! `sum(weight * credit) / sum(weight)`, so it lies in [0, 1].
//!
//! Alignment:
//! - the i-th prompt word pairs with the i-th hypothesis word;
//! - the j-th prompt speaker tag pairs with the j-th hypothesis speaker tag;
//! - prompt vocal tags are matched greedily, in order, to the next unused
//!   hypothesis vocal tag with the same label.
//!
//! `confidences` has one entry per hypothesis token in reading order.

use serde::{Deserialize, Serialize};

use super::{MathError, Result};
use crate::scalar::Scalar;
use crate::transcript::RichSegment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SttPenalties<T> {
    pub speaker: T,
    pub vocal: T,
}

impl<T: Scalar> Default for SttPenalties<T> {
    fn default() -> Self {
        Self { speaker: T::lit(5.0), vocal: T::lit(3.0) }
    }
}

enum Tok<'a> {
    Word(&'a str),
    Speaker(u32),
    Vocal(&'a str),
}

fn flatten(segments: &[RichSegment]) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    for s in segments {
        match s {
            RichSegment::Words(ws) => out.extend(ws.iter().map(|w| Tok::Word(w))),
            RichSegment::Speaker(k) => out.push(Tok::Speaker(*k)),
            RichSegment::Vocal(l) => out.push(Tok::Vocal(l)),
        }
    }
    out
}

/// Number of hypothesis tokens `confidences` must cover.
pub fn token_count(segments: &[RichSegment]) -> usize {
    flatten(segments).len()
}

pub fn stt_reward_mock<T: Scalar>(
    prompt: &[RichSegment],
    hypothesis: &[RichSegment],
    confidences: &[T],
    penalties: &SttPenalties<T>,
) -> Result<T> {
    let p = flatten(prompt);
    if p.is_empty() {
        return Err(MathError::Empty);
    }
    let h = flatten(hypothesis);
    if confidences.len() != h.len() {
        return Err(MathError::Shape(format!(
            "confidences: expected {} (one per hypothesis token), got {}",
            h.len(),
            confidences.len()
        )));
    }
    if confidences.iter().any(|&c| !c.is_finite() || c < T::zero() || c > T::one()) {
        return Err(MathError::Domain("confidences must lie in [0, 1]".into()));
    }
    if [penalties.speaker, penalties.vocal].iter().any(|&w| !w.is_finite() || w <= T::zero()) {
        return Err(MathError::Domain("tag weights must be finite and > 0".into()));
    }

    let mut h_words = Vec::new();
    let mut h_spk = Vec::new();
    let mut h_voc = Vec::new();
    for (tok, &c) in h.iter().zip(confidences) {
        match *tok {
            Tok::Word(w) => h_words.push((w, c)),
            Tok::Speaker(k) => h_spk.push((k, c)),
            Tok::Vocal(l) => h_voc.push((l, c)),
        }
    }

    let mut mass = T::zero();
    let mut credit = T::zero();
    let (mut wi, mut si, mut vi) = (0, 0, 0);
    for tok in &p {
        match *tok {
            Tok::Word(w) => {
                mass = mass + T::one();
                if let Some(&(hw, c)) = h_words.get(wi) {
                    if hw == w {
                        credit = credit + c;
                    }
                }
                wi += 1;
            }
            Tok::Speaker(k) => {
                mass = mass + penalties.speaker;
                if let Some(&(hk, c)) = h_spk.get(si) {
                    if hk == k {
                        credit = credit + penalties.speaker * c;
                    }
                }
                si += 1;
            }
            Tok::Vocal(l) => {
                mass = mass + penalties.vocal;
                if let Some(off) = h_voc[vi..].iter().position(|&(hl, _)| hl == l) {
                    credit = credit + penalties.vocal * h_voc[vi + off].1;
                    vi += off + 1;
                }
            }
        }
    }
    Ok(credit / mass)
}
