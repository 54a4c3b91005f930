use std::collections::HashMap;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::cache::WaveformCache;
use super::RewardBundle;
use crate::align::{sim_reward, stt_reward_mock, SttPenalties};
use crate::digest::{mix, unit_f64, StableHasher};
use crate::token::TokenFrame;
use crate::transcript::RichSegment;

/// What every candidate of one group is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreContext {
    /// Target text the candidates should have spoken.
    pub transcript: Vec<RichSegment>,
    /// Speaker embedding of the reference voice.
    pub reference_embedding: Vec<f64>,
    /// Digest of everything above; part of the cache key.
    pub digest: u64,
}

impl ScoreContext {
    pub const EMBED_DIM: usize = 32;

    pub fn new(transcript: Vec<RichSegment>, reference: &[Vec<u32>], system_text: &str) -> Self {
        let mut h = StableHasher::with_domain("voice");
        h.write_bytes(system_text.as_bytes());
        for row in reference {
            for &id in row {
                h.write_u32(id);
            }
        }
        let voice = h.finish();
        let reference_embedding = (0..Self::EMBED_DIM as u64)
            .map(|j| 2.0 * unit_f64(mix("voice-embed", &[voice, j])) - 1.0)
            .collect();
        let mut h = StableHasher::with_domain("score-context");
        h.write_u64(voice);
        h.write_bytes(crate::transcript::render_rich_segments(&transcript).as_bytes());
        Self { transcript, reference_embedding, digest: h.finish() }
    }
}

/// Content digest of a frame sequence.
pub fn waveform_digest(frames: &[TokenFrame]) -> u64 {
    let mut h = StableHasher::with_domain("waveform");
    h.write_u64(frames.len() as u64);
    for f in frames {
        for id in f.ids() {
            h.write_u32(id);
        }
    }
    h.finish()
}

pub fn cache_key(ctx: &ScoreContext, waveform: u64) -> u64 {
    mix("score-key", &[ctx.digest, waveform])
}

/// Scores one decoded candidate. Must be a pure function of its inputs.
pub trait RewardScorer: Send + Sync {
    fn score(&self, ctx: &ScoreContext, frames: &[TokenFrame]) -> Result<RewardBundle, String>;
}

/// Deterministic stand-ins for the ASR, preference and speaker models, all
/// driven by the waveform digest.
#[derive(Debug, Clone)]
pub struct MockScorer {
    pub penalties: SttPenalties<f64>,
    pub word_error: f64,
    pub tag_error: f64,
    /// Spread of the candidate speaker embedding around the reference.
    pub voice_noise: f64,
}

impl Default for MockScorer {
    fn default() -> Self {
        Self { penalties: SttPenalties::default(), word_error: 0.08, tag_error: 0.2, voice_noise: 0.6 }
    }
}

impl MockScorer {
    /// Pseudo-transcription: each target token is kept, substituted or
    /// dropped depending on a hash of the waveform, with a confidence.
    pub fn transcribe(&self, ctx: &ScoreContext, wave: u64) -> (Vec<RichSegment>, Vec<f64>) {
        let mut hyp = Vec::new();
        let mut i = 0u64;
        let mut next = |domain: &str| {
            i += 1;
            unit_f64(mix(domain, &[wave, i]))
        };
        for seg in &ctx.transcript {
            match seg {
                RichSegment::Words(ws) => {
                    let out: Vec<String> = ws
                        .iter()
                        .map(|w| if next("asr-word") < self.word_error { "<unk>".to_string() } else { w.clone() })
                        .collect();
                    hyp.push(RichSegment::Words(out));
                }
                RichSegment::Speaker(k) => {
                    let u = next("asr-speaker");
                    if u >= self.tag_error {
                        hyp.push(RichSegment::Speaker(*k));
                    } else if u >= self.tag_error / 2.0 {
                        hyp.push(RichSegment::Speaker(k + 1));
                    }
                }
                RichSegment::Vocal(l) => {
                    if next("asr-vocal") >= self.tag_error {
                        hyp.push(RichSegment::Vocal(l.clone()));
                    }
                }
            }
        }
        let n = crate::align::stt_token_count(&hyp) as u64;
        let conf = (0..n).map(|j| 0.6 + 0.4 * unit_f64(mix("asr-conf", &[wave, j]))).collect();
        (hyp, conf)
    }

    pub fn embed(&self, ctx: &ScoreContext, wave: u64) -> Vec<f64> {
        ctx.reference_embedding
            .iter()
            .enumerate()
            .map(|(j, &r)| r + self.voice_noise * (2.0 * unit_f64(mix("spk-embed", &[wave, j as u64])) - 1.0))
            .collect()
    }
}

impl RewardScorer for MockScorer {
    fn score(&self, ctx: &ScoreContext, frames: &[TokenFrame]) -> Result<RewardBundle, String> {
        if frames.is_empty() {
            return Err("empty waveform".into());
        }
        let wave = waveform_digest(frames);
        let (hyp, conf) = self.transcribe(ctx, wave);
        let stt = stt_reward_mock(&ctx.transcript, &hyp, &conf, &self.penalties).map_err(|e| e.to_string())?;
        let pref = unit_f64(mix("pref", &[wave]));
        let sim = sim_reward(&ctx.reference_embedding, &self.embed(ctx, wave)).map_err(|e| e.to_string())?;
        Ok(RewardBundle { stt, pref, sim })
    }
}

/// Wraps a scorer and fails every waveform whose digest is divisible by
/// `modulus`.
pub struct FailingScorer<S> {
    pub inner: S,
    pub modulus: u64,
}

impl<S: RewardScorer> RewardScorer for FailingScorer<S> {
    fn score(&self, ctx: &ScoreContext, frames: &[TokenFrame]) -> Result<RewardBundle, String> {
        if self.modulus > 0 && waveform_digest(frames).is_multiple_of(self.modulus) {
            return Err("injected scorer failure".into());
        }
        self.inner.score(ctx, frames)
    }
}

struct Task {
    batch: u64,
    index: usize,
    ctx: Arc<ScoreContext>,
    frames: Arc<Vec<TokenFrame>>,
}

type Outcome = (u64, usize, Result<RewardBundle, String>);

/// Fixed set of scoring threads sharing one cache. Batches may overlap:
/// submit the next group before collecting the previous one.
pub struct ScoringPool {
    tasks: Option<Sender<Task>>,
    results: Receiver<Outcome>,
    pending: HashMap<u64, Vec<(usize, Result<RewardBundle, String>)>>,
    handles: Vec<JoinHandle<()>>,
    cache: Arc<WaveformCache>,
}

impl ScoringPool {
    pub fn new(workers: usize, scorer: Arc<dyn RewardScorer>, cache: Arc<WaveformCache>) -> Self {
        let (task_tx, task_rx) = unbounded::<Task>();
        let (res_tx, res_rx) = unbounded::<Outcome>();
        let handles = (0..workers.max(1))
            .map(|_| {
                let rx = task_rx.clone();
                let tx = res_tx.clone();
                let scorer = scorer.clone();
                let cache = cache.clone();
                std::thread::spawn(move || {
                    for t in rx {
                        let key = cache_key(&t.ctx, waveform_digest(&t.frames));
                        let out = std::panic::catch_unwind(AssertUnwindSafe(|| {
                            cache.get_or_compute(key, || scorer.score(&t.ctx, &t.frames))
                        }))
                        .unwrap_or_else(|_| Err("scorer panicked".into()));
                        if tx.send((t.batch, t.index, out)).is_err() {
                            break;
                        }
                    }
                })
            })
            .collect();
        Self { tasks: Some(task_tx), results: res_rx, pending: HashMap::new(), handles, cache }
    }

    pub fn cache(&self) -> &WaveformCache {
        &self.cache
    }

    pub fn submit(&self, batch: u64, ctx: Arc<ScoreContext>, candidates: Vec<Arc<Vec<TokenFrame>>>) {
        let tx = self.tasks.as_ref().expect("pool open");
        for (index, frames) in candidates.into_iter().enumerate() {
            tx.send(Task { batch, index, ctx: ctx.clone(), frames }).expect("scoring workers alive");
        }
    }

    /// Blocks until all `n` results of `batch` are in; returned in index order.
    pub fn collect(&mut self, batch: u64, n: usize) -> Vec<Result<RewardBundle, String>> {
        while self.pending.get(&batch).map_or(0, Vec::len) < n {
            let (b, i, r) = self.results.recv().expect("scoring workers alive");
            self.pending.entry(b).or_default().push((i, r));
        }
        let mut got = self.pending.remove(&batch).unwrap_or_default();
        got.sort_by_key(|(i, _)| *i);
        got.into_iter().map(|(_, r)| r).collect()
    }
}

impl Drop for ScoringPool {
    fn drop(&mut self) {
        self.tasks.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
