//! Rich-transcript parsing: plain words interleaved with speaker-turn
//! control tags (`<|speaker:K|>`) and bracketed vocal-event tags
//! (`[laugh]`, `[in a hurry]`).

use std::fmt::Write as _;

use thiserror::Error;

use crate::digest::StableHasher;
use crate::token::{PromptSegment, TEXT_VOCAB};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("transcript parse error at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("unclosed vocal tag")]
    UnclosedBracket,
    #[error("unexpected ']'")]
    StrayCloseBracket,
    #[error("nested '[' inside vocal tag")]
    NestedBracket,
    #[error("empty vocal tag")]
    EmptyVocalTag,
    #[error("unclosed control tag")]
    UnclosedControl,
    #[error("unknown control tag {0:?}")]
    UnknownControl(String),
    #[error("speaker index {0:?} is not a non-negative integer")]
    BadSpeakerIndex(String),
}

/// Lossless parse result; words are kept as strings so the transcript can be
/// re-rendered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RichSegment {
    Words(Vec<String>),
    Speaker(u32),
    Vocal(String),
}

/// Stable word -> text-token id mapping (hash into the text vocab).
pub fn word_id(word: &str) -> u32 {
    let mut h = StableHasher::with_domain("text-token");
    h.write_bytes(word.as_bytes());
    (h.finish() % TEXT_VOCAB as u64) as u32
}

/// Stable hash of a vocal tag label, used as its cache key.
pub fn label_hash(label: &str) -> u64 {
    let mut h = StableHasher::with_domain("vocal-tag");
    h.write_bytes(label.as_bytes());
    h.finish()
}

fn err(offset: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { offset, kind }
}

pub fn parse_rich_segments(text: &str) -> Result<Vec<RichSegment>, ParseError> {
    let mut out: Vec<RichSegment> = Vec::new();
    let push_word = |out: &mut Vec<RichSegment>, w: &str| match out.last_mut() {
        Some(RichSegment::Words(ws)) => ws.push(w.to_string()),
        _ => out.push(RichSegment::Words(vec![w.to_string()])),
    };

    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("in bounds");
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if let Some(inner) = rest.strip_prefix("<|") {
            let close = inner.find("|>").ok_or_else(|| err(i, ParseErrorKind::UnclosedControl))?;
            let body = &inner[..close];
            let Some(idx) = body.strip_prefix("speaker:") else {
                return Err(err(i, ParseErrorKind::UnknownControl(body.to_string())));
            };
            if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err(i, ParseErrorKind::BadSpeakerIndex(idx.to_string())));
            }
            let k = idx.parse::<u32>().map_err(|_| err(i, ParseErrorKind::BadSpeakerIndex(idx.to_string())))?;
            out.push(RichSegment::Speaker(k));
            i += 2 + close + 2;
            continue;
        }
        match c {
            '[' => {
                let inner = &rest[1..];
                let close = inner.find(']').ok_or_else(|| err(i, ParseErrorKind::UnclosedBracket))?;
                if let Some(nested) = inner[..close].find('[') {
                    return Err(err(i + 1 + nested, ParseErrorKind::NestedBracket));
                }
                let label = inner[..close].trim();
                if label.is_empty() {
                    return Err(err(i, ParseErrorKind::EmptyVocalTag));
                }
                out.push(RichSegment::Vocal(label.to_string()));
                i += 1 + close + 1;
            }
            ']' => return Err(err(i, ParseErrorKind::StrayCloseBracket)),
            _ => {
                // A word runs until whitespace or the start of a tag.
                let mut end = i;
                for (off, ch) in rest.char_indices() {
                    if ch.is_whitespace() || ch == '[' || ch == ']' || rest[off..].starts_with("<|") {
                        break;
                    }
                    end = i + off + ch.len_utf8();
                }
                push_word(&mut out, &text[i..end]);
                i = end;
            }
        }
    }
    Ok(out)
}

/// Parses an annotated transcript into prompt segments. Consecutive words
/// form one `TextTokens` segment.
pub fn parse_rich_transcript(text: &str) -> Result<Vec<PromptSegment>, ParseError> {
    Ok(parse_rich_segments(text)?.into_iter().map(to_prompt_segment).collect())
}

pub fn to_prompt_segment(seg: RichSegment) -> PromptSegment {
    match seg {
        RichSegment::Words(ws) => PromptSegment::TextTokens(ws.iter().map(|w| word_id(w)).collect()),
        RichSegment::Speaker(k) => PromptSegment::SpeakerTag(k),
        RichSegment::Vocal(label) => PromptSegment::VocalTag(label),
    }
}

/// Canonical rendering: single spaces between every word and tag.
pub fn render_rich_segments(segments: &[RichSegment]) -> String {
    let mut s = String::new();
    let sep = |s: &mut String| {
        if !s.is_empty() {
            s.push(' ');
        }
    };
    for seg in segments {
        match seg {
            RichSegment::Words(ws) => {
                for w in ws {
                    sep(&mut s);
                    s.push_str(w);
                }
            }
            RichSegment::Speaker(k) => {
                sep(&mut s);
                let _ = write!(s, "<|speaker:{k}|>");
            }
            RichSegment::Vocal(label) => {
                sep(&mut s);
                let _ = write!(s, "[{label}]");
            }
        }
    }
    s
}
