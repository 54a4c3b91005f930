//! Simulated frame-to-audio decoder, co-scheduled with LLM decode.
//!
//! Frames are buffered per request and cut into chunks: the first chunk is
//! `first_chunk_frames` long, later ones `steady_chunk_frames`, and the
//! remainder is flushed at end of sequence.
//!
//! One logical worker processes chunk jobs in batched rounds: a job that
//! arrives while the worker is idle starts a round at once; jobs arriving
//! while a round runs join the next round, which starts when the current
//! one ends. Each job completes at its round start plus its own cost, and a
//! round lasts as long as its most expensive job. Per request, chunks
//! complete in order. In overlapped mode this timeline runs alongside
//! decode.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::StableHasher;
use crate::pager::RequestId;
use crate::time::{SimDuration, SimInstant};
use crate::token::TokenFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VocoderConcurrency {
    #[default]
    Overlapped,
    Serial,
}

fn default_first_chunk() -> u32 {
    2
}
fn default_steady_chunk() -> u32 {
    8
}
fn default_cost() -> SimDuration {
    SimDuration::from_millis(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderConfig {
    #[serde(default = "default_first_chunk")]
    pub first_chunk_frames: u32,
    #[serde(default = "default_steady_chunk")]
    pub steady_chunk_frames: u32,
    #[serde(default = "default_cost")]
    pub cost_per_frame: SimDuration,
    #[serde(default)]
    pub concurrency: VocoderConcurrency,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            first_chunk_frames: default_first_chunk(),
            steady_chunk_frames: default_steady_chunk(),
            cost_per_frame: default_cost(),
            concurrency: VocoderConcurrency::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocoderError {
    #[error("request {request}: frame {got} arrived, expected {expected}")]
    OutOfOrder { request: RequestId, expected: u32, got: u32 },
    #[error("request {0}: flush before end of sequence")]
    FlushBeforeEos(RequestId),
    #[error("request {0}: frame after end of sequence")]
    AfterEos(RequestId),
    #[error("invalid vocoder config: {0}")]
    Config(String),
}

/// Descriptor of one synthesized audio chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioChunkDesc {
    pub request_id: RequestId,
    pub chunk_index: u32,
    pub frame_start: u32,
    pub frame_count: u32,
    pub sample_count: u64,
    /// Hex digest of the pseudo-PCM payload.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkJob {
    pub desc: AudioChunkDesc,
    pub cost: SimDuration,
}

#[derive(Debug, Default)]
struct Stream {
    next_frame: u32,
    buffer_start: u32,
    buffered: Vec<TokenFrame>,
    next_chunk: u32,
    eos: bool,
}

#[derive(Debug)]
pub struct Vocoder {
    cfg: VocoderConfig,
    samples_per_frame: u32,
    streams: HashMap<RequestId, Stream>,
    round_start: SimInstant,
    round_end: SimInstant,
    last_ready: HashMap<RequestId, SimInstant>,
}

/// Deterministic stand-in for PCM: a hash of the frames' token ids.
pub fn pcm_digest(frames: &[TokenFrame]) -> String {
    let mut h = StableHasher::with_domain("pseudo-pcm");
    for f in frames {
        for id in f.ids() {
            h.write_u32(id);
        }
    }
    let bytes = h.finish_bytes();
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Vocoder {
    pub fn new(cfg: VocoderConfig, samples_per_frame: u32) -> Result<Self, VocoderError> {
        if cfg.first_chunk_frames == 0 || cfg.steady_chunk_frames == 0 {
            return Err(VocoderError::Config("chunk sizes must be >= 1".into()));
        }
        Ok(Self {
            cfg,
            samples_per_frame,
            streams: HashMap::new(),
            round_start: SimInstant::EPOCH,
            round_end: SimInstant::EPOCH,
            last_ready: HashMap::new(),
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    pub fn chunk_cost(&self, frames: u32) -> SimDuration {
        self.cfg.cost_per_frame * frames as u64
    }

    fn cut(&self, id: RequestId, s: &mut Stream, n: usize) -> ChunkJob {
        let frames: Vec<TokenFrame> = s.buffered.drain(..n).collect();
        let desc = AudioChunkDesc {
            request_id: id,
            chunk_index: s.next_chunk,
            frame_start: s.buffer_start,
            frame_count: n as u32,
            sample_count: n as u64 * self.samples_per_frame as u64,
            digest: pcm_digest(&frames),
        };
        s.next_chunk += 1;
        s.buffer_start += n as u32;
        ChunkJob { cost: self.chunk_cost(n as u32), desc }
    }

    /// Buffers frame `step` of `id`; returns a chunk job once enough frames
    /// are buffered.
    pub fn enqueue(&mut self, id: RequestId, step: u32, frame: TokenFrame) -> Result<Option<ChunkJob>, VocoderError> {
        let mut s = self.streams.remove(&id).unwrap_or_default();
        let res = (|| {
            if s.eos {
                return Err(VocoderError::AfterEos(id));
            }
            if step != s.next_frame {
                return Err(VocoderError::OutOfOrder { request: id, expected: s.next_frame, got: step });
            }
            s.next_frame += 1;
            s.buffered.push(frame);
            let want = if s.next_chunk == 0 { self.cfg.first_chunk_frames } else { self.cfg.steady_chunk_frames };
            Ok((s.buffered.len() >= want as usize).then(|| self.cut(id, &mut s, want as usize)))
        })();
        self.streams.insert(id, s);
        res
    }

    pub fn mark_eos(&mut self, id: RequestId) {
        self.streams.entry(id).or_default().eos = true;
    }

    /// Emits the residual frames of a finished request as a final short
    /// chunk and forgets the request.
    pub fn flush(&mut self, id: RequestId) -> Result<Option<ChunkJob>, VocoderError> {
        match self.streams.get(&id) {
            Some(s) if s.eos => {}
            _ => return Err(VocoderError::FlushBeforeEos(id)),
        }
        let mut s = self.streams.remove(&id).expect("checked above");
        let n = s.buffered.len();
        Ok((n > 0).then(|| self.cut(id, &mut s, n)))
    }

    /// Drops all buffered and timeline state for `id`.
    pub fn forget(&mut self, id: RequestId) {
        self.streams.remove(&id);
        self.last_ready.remove(&id);
    }

    /// Places a job on the worker timeline; returns its completion time.
    pub fn schedule(&mut self, job: &ChunkJob, submitted_at: SimInstant) -> SimInstant {
        let t = submitted_at;
        if t >= self.round_end {
            self.round_start = t;
            self.round_end = t;
        } else if t >= self.round_start {
            // The running round is closed; open the next one.
            self.round_start = self.round_end;
        }
        let mut ready = self.round_start + job.cost;
        if let Some(&prev) = self.last_ready.get(&job.desc.request_id) {
            ready = ready.max(prev);
        }
        self.round_end = self.round_end.max(ready);
        self.last_ready.insert(job.desc.request_id, ready);
        ready
    }

    /// When the worker finishes everything scheduled so far.
    pub fn worker_free_at(&self) -> SimInstant {
        self.round_end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(i: u32) -> TokenFrame {
        TokenFrame::new(i, vec![i + 1, i + 2])
    }

    fn voc(first: u32, steady: u32) -> Vocoder {
        Vocoder::new(
            VocoderConfig { first_chunk_frames: first, steady_chunk_frames: steady, ..Default::default() },
            2048,
        )
        .unwrap()
    }

    fn run(v: &mut Vocoder, id: RequestId, n: u32) -> Vec<AudioChunkDesc> {
        let mut out = vec![];
        for i in 0..n {
            out.extend(v.enqueue(id, i, frame(i)).unwrap().map(|j| j.desc));
        }
        v.mark_eos(id);
        out.extend(v.flush(id).unwrap().map(|j| j.desc));
        out
    }

    #[test]
    fn chunking_two_then_fours() {
        let mut v = voc(2, 4);
        let chunks = run(&mut v, 1, 10);
        let sizes: Vec<u32> = chunks.iter().map(|c| c.frame_count).collect();
        assert_eq!(sizes, vec![2, 4, 4]);
        assert_eq!(chunks.iter().map(|c| c.chunk_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(chunks.iter().map(|c| c.frame_start).collect::<Vec<_>>(), vec![0, 2, 6]);
        assert_eq!(chunks.iter().map(|c| c.sample_count).sum::<u64>(), 10 * 2048);
    }

    #[test]
    fn residual_flush() {
        let mut v = voc(1, 4);
        let sizes: Vec<u32> = run(&mut v, 1, 8).iter().map(|c| c.frame_count).collect();
        assert_eq!(sizes, vec![1, 4, 3]);
        let mut v = voc(1, 4);
        let sizes: Vec<u32> = run(&mut v, 1, 5).iter().map(|c| c.frame_count).collect();
        assert_eq!(sizes, vec![1, 4]);
    }

    #[test]
    fn zero_frames_no_chunk() {
        let mut v = voc(2, 8);
        assert!(run(&mut v, 3, 0).is_empty());
    }

    #[test]
    fn contract_errors() {
        let mut v = voc(2, 8);
        v.enqueue(1, 0, frame(0)).unwrap();
        assert_eq!(
            v.enqueue(1, 2, frame(2)).unwrap_err(),
            VocoderError::OutOfOrder { request: 1, expected: 1, got: 2 }
        );
        assert_eq!(v.flush(1).unwrap_err(), VocoderError::FlushBeforeEos(1));
        assert_eq!(v.flush(9).unwrap_err(), VocoderError::FlushBeforeEos(9));
        v.mark_eos(1);
        assert_eq!(v.enqueue(1, 1, frame(1)).unwrap_err(), VocoderError::AfterEos(1));
    }

    #[test]
    fn digest_deterministic_and_content_sensitive() {
        let a = run(&mut voc(2, 4), 1, 10);
        let b = run(&mut voc(2, 4), 7, 10);
        let da: Vec<_> = a.iter().map(|c| c.digest.clone()).collect();
        let db: Vec<_> = b.iter().map(|c| c.digest.clone()).collect();
        assert_eq!(da, db);
        assert_ne!(pcm_digest(&[frame(0)]), pcm_digest(&[frame(1)]));
        assert_eq!(da[0].len(), 16);
    }

    fn job(id: RequestId, ms: u64) -> ChunkJob {
        let mut desc = run(&mut voc(1, 1), id, 1).remove(0);
        desc.request_id = id;
        ChunkJob { desc, cost: SimDuration::from_millis(ms) }
    }

    fn ms(v: u64) -> SimInstant {
        SimInstant::EPOCH + SimDuration::from_millis(v)
    }

    #[test]
    fn idle_worker_starts_immediately() {
        let mut v = voc(1, 1);
        assert_eq!(v.schedule(&job(1, 2), ms(0)), ms(2));
        assert_eq!(v.schedule(&job(1, 2), ms(10)), ms(12));
    }

    #[test]
    fn jobs_arriving_mid_round_batch_into_the_next() {
        let mut v = voc(1, 1);
        assert_eq!(v.schedule(&job(1, 16), ms(0)), ms(16));
        // Both wait for the running round, then run side by side.
        assert_eq!(v.schedule(&job(2, 4), ms(5)), ms(20));
        assert_eq!(v.schedule(&job(3, 8), ms(9)), ms(24));
        assert_eq!(v.worker_free_at(), ms(24));
        // Arrives while that round runs: waits for it.
        assert_eq!(v.schedule(&job(4, 2), ms(18)), ms(26));
    }

    #[test]
    fn same_request_chunks_complete_in_order() {
        let mut v = voc(1, 1);
        v.schedule(&job(9, 1), ms(0));
        assert_eq!(v.schedule(&job(1, 8), ms(0)), ms(9));
        // Cheaper later chunk of request 1 in the same round cannot overtake.
        assert_eq!(v.schedule(&job(1, 1), ms(0)), ms(9));
        v.forget(1);
        assert_eq!(v.schedule(&job(1, 1), ms(0)), ms(2));
    }
}
