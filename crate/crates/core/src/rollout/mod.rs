//! Group rollouts for preference alignment: sample G candidates per prompt
//! through the engine, score them on a worker pool behind a shared
//! waveform cache, fuse rewards and compute group-relative advantages.

mod cache;
mod score;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheCounters, WaveformCache};
pub use score::{
    cache_key, waveform_digest, FailingScorer, MockScorer, RewardScorer, ScoreContext, ScoringPool,
};

use crate::align::{grpo_advantages, reward_fuse, RewardWeights};
use crate::config::EngineConfig;
use crate::digest::mix;
use crate::mock::SamplingParams;
use crate::scheduler::{ClockKind, Engine, EngineError, EngineEvent, Request, SubmitError};
use crate::token::{PromptSegment, TokenFrame};
use crate::transcript::parse_rich_segments;
use crate::wire::{FieldError, GenerateRequest};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid job: {0}")]
    Job(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("engine rejected a candidate after {attempts} attempts: {last}")]
    Rejected { attempts: u32, last: String },
}

/// Per-candidate reward components, each in its scorer's natural range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub stt: f64,
    pub pref: f64,
    pub sim: f64,
}

/// One prompt sampled `seeds.len()` times.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutJob {
    pub prompt: GenerateRequest,
    pub seeds: Vec<u64>,
    pub weights: RewardWeights<f64>,
}

impl RolloutJob {
    pub fn new(prompt: GenerateRequest, group_size: usize, base_seed: u64, weights: RewardWeights<f64>) -> Result<Self, RolloutError> {
        let seeds = (0..group_size as u64).map(|i| mix("rollout-seed", &[base_seed, i])).collect();
        let job = Self { prompt, seeds, weights };
        job.validate()?;
        Ok(job)
    }

    pub fn group_size(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.seeds.len() < 2 {
            return Err(RolloutError::Job(format!("group size must be >= 2, got {}", self.seeds.len())));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(RolloutError::Job("sampling seeds must be distinct".into()));
        }
        self.weights.validate().map_err(|e| RolloutError::Job(e.to_string()))
    }

    pub fn context(&self) -> Result<ScoreContext, RolloutError> {
        let transcript = parse_rich_segments(&self.prompt.text).map_err(|e| FieldError::new("text", e.to_string()))?;
        Ok(ScoreContext::new(transcript, &self.prompt.system.reference_frames, &self.prompt.system.text))
    }
}

/// Retry schedule for engine backpressure, counted in engine iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_steps: u32,
    pub max_backoff_steps: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 8, initial_backoff_steps: 1, max_backoff_steps: 64 }
    }
}

/// A decoded candidate. `error` is set when the engine failed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub seed: u64,
    pub frames: Vec<TokenFrame>,
    pub error: Option<String>,
}

struct Collector {
    by_id: HashMap<u64, usize>,
    candidates: Vec<Candidate>,
    open: usize,
}

impl Collector {
    fn absorb(&mut self, events: Vec<EngineEvent>) {
        for ev in events {
            match ev {
                EngineEvent::FrameOut { request, frame, .. } => {
                    if let Some(&i) = self.by_id.get(&request) {
                        self.candidates[i].frames.push(frame);
                    }
                }
                EngineEvent::Done { request, metrics } => {
                    if let Some(i) = self.by_id.remove(&request) {
                        self.candidates[i].error = metrics.error;
                        self.open -= 1;
                    }
                }
                _ => {}
            }
        }
    }
}

/// Samples every seed of `job` through `engine` and runs it until all
/// candidates finish. Backpressure is retried with exponential backoff in
/// engine iterations; other rejections fail the job.
pub fn rollout_group(engine: &mut Engine, job: &RolloutJob, retry: &RetryPolicy) -> Result<Vec<Candidate>, RolloutError> {
    job.validate()?;
    let segments: Vec<PromptSegment> = job.prompt.to_segments(&engine.config().codebook)?;
    let mut c = Collector {
        by_id: HashMap::new(),
        candidates: job
            .seeds
            .iter()
            .enumerate()
            .map(|(index, &seed)| Candidate { index, seed, frames: Vec::new(), error: None })
            .collect(),
        open: 0,
    };
    for (index, &seed) in job.seeds.iter().enumerate() {
        let mut backoff = retry.initial_backoff_steps.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let req = Request::new(segments.clone(), SamplingParams { seed, max_frames: job.prompt.max_frames });
            match engine.submit(req) {
                Ok(t) => {
                    c.by_id.insert(t.id, index);
                    c.open += 1;
                    break;
                }
                Err(SubmitError::Backpressure(n)) if attempt < retry.max_attempts => {
                    tracing::debug!(waiting = n, attempt, "rollout backpressure, backing off");
                    for _ in 0..backoff {
                        if engine.is_idle() {
                            break;
                        }
                        let ev = engine.step()?;
                        c.absorb(ev);
                    }
                    backoff = (backoff * 2).min(retry.max_backoff_steps.max(1));
                }
                Err(e) => return Err(RolloutError::Rejected { attempts: attempt, last: e.to_string() }),
            }
        }
    }
    while c.open > 0 {
        let ev = engine.step()?;
        c.absorb(ev);
    }
    Ok(c.candidates)
}

/// A scored candidate. Failed candidates carry `error` and no reward or
/// advantage and are left out of the group statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub seed: u64,
    pub frames: usize,
    pub waveform: String,
    pub r_stt: Option<f64>,
    pub r_pref: Option<f64>,
    pub r_sim: Option<f64>,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub candidates: Vec<ScoredCandidate>,
    pub mean_reward: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

/// Fuses rewards and computes advantages over the successful candidates.
/// With fewer than two successes no advantages are produced.
pub fn finalize_group(
    candidates: &[Candidate],
    results: Vec<Result<RewardBundle, String>>,
    weights: &RewardWeights<f64>,
) -> ScoredGroup {
    let mut out: Vec<ScoredCandidate> = candidates
        .iter()
        .zip(results)
        .map(|(c, r)| {
            let r = match &c.error {
                Some(e) => Err(format!("generation failed: {e}")),
                None => r,
            };
            let mut s = ScoredCandidate {
                index: c.index,
                seed: c.seed,
                frames: c.frames.len(),
                waveform: format!("{:016x}", waveform_digest(&c.frames)),
                r_stt: None,
                r_pref: None,
                r_sim: None,
                reward: None,
                advantage: None,
                error: None,
            };
            match r {
                Ok(b) => {
                    s.r_stt = Some(b.stt);
                    s.r_pref = Some(b.pref);
                    s.r_sim = Some(b.sim);
                    s.reward = Some(reward_fuse(b.stt, b.pref, b.sim, weights));
                }
                Err(e) => s.error = Some(e),
            }
            s
        })
        .collect();
    let ok: Vec<usize> = out.iter().filter(|s| s.reward.is_some()).map(|s| s.index).collect();
    let rewards: Vec<f64> = ok.iter().map(|&i| out[i].reward.unwrap_or_default()).collect();
    if let Ok(adv) = grpo_advantages(&rewards) {
        for (&i, a) in ok.iter().zip(adv) {
            out[i].advantage = Some(a);
        }
    }
    let mean_reward = (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
    let failed = out.len() - ok.len();
    ScoredGroup { candidates: out, mean_reward, scored: ok.len(), failed }
}

/// Scores `candidates` on `pool` and finalizes the group.
pub fn score_group(pool: &mut ScoringPool, ctx: Arc<ScoreContext>, candidates: &[Candidate], weights: &RewardWeights<f64>) -> ScoredGroup {
    let batch = mix("adhoc-batch", &[ctx.digest, candidates.len() as u64]);
    pool.submit(batch, ctx, candidates.iter().map(|c| Arc::new(c.frames.clone())).collect());
    let results = pool.collect(batch, candidates.len());
    finalize_group(candidates, results, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub steps: usize,
    pub group_size: usize,
    pub workers: usize,
    pub seed: u64,
    pub weights: RewardWeights<f64>,
    pub cache_capacity: usize,
    pub retry: RetryPolicy,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            group_size: 8,
            workers: 4,
            seed: 0,
            weights: RewardWeights::default(),
            cache_capacity: 4096,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub prompt: usize,
    pub mean_reward: Option<f64>,
    pub mean_stt: Option<f64>,
    pub mean_pref: Option<f64>,
    pub mean_sim: Option<f64>,
    pub advantage_min: Option<f64>,
    pub advantage_max: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

impl StepRow {
    fn new(step: usize, prompt: usize, g: &ScoredGroup) -> Self {
        let mean = |f: fn(&ScoredCandidate) -> Option<f64>| {
            let v: Vec<f64> = g.candidates.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let adv = g.candidates.iter().filter_map(|c| c.advantage);
        Self {
            step,
            prompt,
            mean_reward: g.mean_reward,
            mean_stt: mean(|c| c.r_stt),
            mean_pref: mean(|c| c.r_pref),
            mean_sim: mean(|c| c.r_sim),
            advantage_min: adv.clone().reduce(f64::min),
            advantage_max: adv.reduce(f64::max),
            scored: g.scored,
            failed: g.failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub version: u32,
    pub config: LoopConfig,
    pub prompts: usize,
    pub series: Vec<StepRow>,
    pub cache: CacheCounters,
    pub cache_hit_rate: Option<f64>,
    pub last_group: Vec<ScoredCandidate>,
}

impl RolloutReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Mean-reward series as a fixed-height text chart, one column per step.
    pub fn render_series(&self, height: usize) -> String {
        let vals: Vec<Option<f64>> = self.series.iter().map(|r| r.mean_reward).collect();
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        let (Some(lo), Some(hi)) = (present.iter().copied().reduce(f64::min), present.iter().copied().reduce(f64::max)) else {
            return String::from("(no rewards)\n");
        };
        let height = height.max(2);
        let span = (hi - lo).max(1e-12);
        let level = |v: f64| (((v - lo) / span) * (height - 1) as f64).round() as usize;
        let mut out = String::new();
        for row in (0..height).rev() {
            let label = lo + span * row as f64 / (height - 1) as f64;
            out.push_str(&format!("{label:>7.4} |"));
            for v in &vals {
                out.push(match v {
                    Some(v) if level(*v) == row => '*',
                    _ => ' ',
                });
            }
            out.push('\n');
        }
        out.push_str(&format!("{:>7} +{}\n", "", "-".repeat(vals.len())));
        out
    }
}

/// Runs `cfg.steps` rollout steps over `prompts` (cycled), scoring each
/// group on the pool while the next group is decoding. No parameters are
/// updated; the series records reward statistics of the sampled groups.
pub fn run_loop(
    cfg: &LoopConfig,
    engine_cfg: EngineConfig,
    prompts: &[GenerateRequest],
    scorer: Arc<dyn RewardScorer>,
) -> Result<RolloutReport, RolloutError> {
    if prompts.is_empty() {
        return Err(RolloutError::Job("no prompts".into()));
    }
    if cfg.workers == 0 {
        return Err(RolloutError::Job("workers must be >= 1".into()));
    }
    let mut engine_cfg = engine_cfg;
    engine_cfg.scheduler.clock = ClockKind::Simulated;
    let mut engine = Engine::new(engine_cfg)?;
    let cache = Arc::new(WaveformCache::new(cfg.cache_capacity));
    let mut pool = ScoringPool::new(cfg.workers, scorer, cache.clone());

    let contexts: Vec<Arc<ScoreContext>> = prompts
        .iter()
        .map(|p| {
            RolloutJob { prompt: p.clone(), seeds: vec![0, 1], weights: cfg.weights }.context().map(Arc::new)
        })
        .collect::<Result<_, _>>()?;

    let mut series = Vec::with_capacity(cfg.steps);
    let mut last_group = Vec::new();
    let mut in_flight: Option<(usize, usize, Vec<Candidate>)> = None;
    for step in 0..=cfg.steps {
        let launched = if step < cfg.steps {
            let p = step % prompts.len();
            let job = RolloutJob::new(prompts[p].clone(), cfg.group_size, mix("loop-step", &[cfg.seed, step as u64]), cfg.weights)?;
            let cands = rollout_group(&mut engine, &job, &cfg.retry)?;
            pool.submit(step as u64, contexts[p].clone(), cands.iter().map(|c| Arc::new(c.frames.clone())).collect());
            Some((step, p, cands))
        } else {
            None
        };
        if let Some((s, p, cands)) = in_flight.take() {
            let results = pool.collect(s as u64, cands.len());
            let g = finalize_group(&cands, results, &cfg.weights);
            series.push(StepRow::new(s, p, &g));
            last_group = g.candidates;
        }
        in_flight = launched;
    }
    drop(pool);
    let counters = cache.counters();
    Ok(RolloutReport {
        version: 1,
        config: cfg.clone(),
        prompts: prompts.len(),
        series,
        cache: counters,
        cache_hit_rate: counters.hit_rate(),
        last_group,
    })
}
