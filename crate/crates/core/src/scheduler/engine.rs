use std::collections::{HashMap, VecDeque};

use tracing::{debug, trace};

use super::{
    percentile, Clock, EngineError, EngineEvent, FinishReason, Phase, PoolGauges, Request, RequestMetrics,
    StatsSnapshot, SubmitError, Ticket,
};
use crate::config::EngineConfig;
use crate::mock::{DecodeOutput, MockModel, MockModelState};
use crate::pager::{BlockPool, PageTable, PagerError, RequestId};
use crate::radix::{hit_rate, KeyUnit, NodeHandle, RadixCache};
use crate::time::{SimDuration, SimInstant};
use crate::token::{prompt_units, text_token_count, TokenFrame};
use crate::vocoder::{AudioChunkDesc, ChunkJob, Vocoder, VocoderConcurrency};

/// Completed-request window used for latency percentiles in stats.
const STATS_WINDOW: usize = 1024;

#[derive(Debug)]
struct Entry {
    request: Request,
    arrival: SimInstant,
    prompt: Vec<KeyUnit>,
    text_tokens: usize,
    /// Audio frames emitted so far (EOS excluded).
    generated: Vec<TokenFrame>,
    phase: Phase,
    table: PageTable,
    /// Units this admission must hold: prompt plus frames generated before
    /// any preemption.
    prefill_total: usize,
    lock: Option<NodeHandle>,
    model: Option<MockModelState>,
    first_hit: Option<usize>,
    admit_seq: u64,
    preemptions: u32,
    eos: bool,
    chunks_in_flight: u32,
    first_audio: Option<SimInstant>,
    last_audio: Option<SimInstant>,
}

impl Entry {
    fn key_units(&self) -> Vec<KeyUnit> {
        let mut k = self.prompt.clone();
        k.extend(self.generated.iter().map(KeyUnit::frame));
        k
    }
}

#[derive(Debug)]
struct PendingChunk {
    ready_at: SimInstant,
    chunk: AudioChunkDesc,
}

/// Outcome of trying to reserve a decode slot under memory pressure.
enum Relief {
    Retry,
    SelfPreempted,
    Failed(String),
}

pub struct Engine {
    cfg: EngineConfig,
    model: MockModel,
    clock: Clock,
    pool: BlockPool,
    cache: RadixCache,
    vocoder: Vocoder,
    entries: HashMap<RequestId, Entry>,
    waiting: VecDeque<RequestId>,
    /// Admission order.
    running: Vec<RequestId>,
    pending_audio: VecDeque<PendingChunk>,
    next_id: RequestId,
    admit_counter: u64,
    decode_cursor: usize,
    completed: VecDeque<RequestMetrics>,
    requests_completed: u64,
    requests_failed: u64,
    frames_total: u64,
    preemptions: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let model = MockModel::new(cfg.codebook.clone(), cfg.model.clone())?;
        let vocoder = Vocoder::new(cfg.vocoder.clone(), cfg.codebook.samples_per_frame)?;
        Ok(Self {
            clock: Clock::new(cfg.scheduler.clock),
            pool: BlockPool::new(&cfg.pool),
            cache: RadixCache::new(cfg.pool.page_size, cfg.cache.capacity_units),
            model,
            vocoder,
            entries: HashMap::new(),
            waiting: VecDeque::new(),
            running: Vec::new(),
            pending_audio: VecDeque::new(),
            next_id: 0,
            admit_counter: 0,
            decode_cursor: 0,
            completed: VecDeque::new(),
            requests_completed: 0,
            requests_failed: 0,
            frames_total: 0,
            preemptions: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MockModel {
        &self.model
    }

    pub fn now(&self) -> SimInstant {
        self.clock.now()
    }

    pub fn cache(&self) -> &RadixCache {
        &self.cache
    }

    pub fn pool(&self) -> &BlockPool {
        &self.pool
    }

    pub fn phase(&self, id: RequestId) -> Option<&Phase> {
        self.entries.get(&id).map(|e| &e.phase)
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    /// No queued, running, or draining work.
    pub fn is_idle(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves an idle simulated clock forward (used by open-loop drivers).
    pub fn advance_idle_to(&mut self, t: SimInstant) {
        if self.is_idle() {
            self.clock.advance_to(t);
        }
    }

    /// Enqueues a request (FIFO). The arrival time is stamped from the
    /// engine clock unless the request carries one.
    pub fn submit(&mut self, request: Request) -> Result<Ticket, SubmitError> {
        if self.waiting.len() >= self.cfg.scheduler.max_waiting {
            return Err(SubmitError::Backpressure(self.waiting.len()));
        }
        if request.sampling.max_frames == 0 {
            return Err(SubmitError::Invalid("max_frames must be >= 1".into()));
        }
        if prompt_units(&request.segments) == 0 {
            return Err(SubmitError::Invalid("empty prompt".into()));
        }
        for s in &request.segments {
            s.validate(&self.cfg.codebook).map_err(|e| SubmitError::Invalid(e.to_string()))?;
        }
        self.clock.sync();
        let id = self.next_id;
        self.next_id += 1;
        let arrival = request.arrival_time.unwrap_or_else(|| self.clock.now());
        let entry = Entry {
            prompt: KeyUnit::from_segments(&request.segments),
            text_tokens: text_token_count(&request.segments),
            request,
            arrival,
            generated: Vec::new(),
            phase: Phase::Waiting,
            table: PageTable::new(id),
            prefill_total: 0,
            lock: None,
            model: None,
            first_hit: None,
            admit_seq: 0,
            preemptions: 0,
            eos: false,
            chunks_in_flight: 0,
            first_audio: None,
            last_audio: None,
        };
        self.entries.insert(id, entry);
        self.waiting.push_back(id);
        trace!(id, "submitted");
        Ok(Ticket { id })
    }

    /// Runs one engine iteration and returns the events it produced, in
    /// emission order.
    pub fn step(&mut self) -> Result<Vec<EngineEvent>, EngineError> {
        self.clock.sync();
        let mut events = Vec::new();

        self.admit(&mut events)?;

        let decode_set = self.pick_decode_set();

        // Chunked prefill; requests that complete switch to decoding at the
        // end of the iteration.
        let chunk = self.cfg.scheduler.prefill_chunk_units;
        let mut prefill_units = 0usize;
        let mut prefill_done = Vec::new();
        for &id in &self.running {
            let e = self.entries.get_mut(&id).expect("running entry");
            if let Phase::Prefilling { done_units } = e.phase {
                let n = chunk.min(e.prefill_total - done_units);
                prefill_units += n;
                e.phase = Phase::Prefilling { done_units: done_units + n };
                if done_units + n == e.prefill_total {
                    prefill_done.push(id);
                }
            }
        }
        let prefill_cost = self.model.prefill_cost(prefill_units);

        // Reserve KV slots first so preemption never hits a request that
        // already decoded this iteration.
        let mut to_decode = Vec::new();
        for id in decode_set {
            if !self.running.contains(&id) {
                continue;
            }
            match self.reserve_decode_slot(id, &mut events)? {
                Some(true) => to_decode.push(id),
                Some(false) => {}
                None => continue,
            }
        }

        let mut outputs: Vec<(RequestId, DecodeOutput)> = Vec::new();
        for id in to_decode {
            let e = self.entries.get_mut(&id).expect("decoding entry");
            let state = e.model.as_mut().expect("decoding entry has model state");
            outputs.push((id, self.model.decode_step(state)?));
        }
        let decode_cost = if outputs.is_empty() { SimDuration::ZERO } else { self.model.per_frame_cost() };

        let mut jobs: Vec<ChunkJob> = Vec::new();
        for (id, out) in outputs {
            if out.finished {
                jobs.extend(self.finish_decode(id)?);
            } else {
                let e = self.entries.get_mut(&id).expect("decoding entry");
                let step = e.generated.len() as u32;
                e.generated.push(out.frame.clone());
                e.phase = Phase::Decoding { frames_done: step + 1 };
                self.frames_total += 1;
                if let Some(job) = self.vocoder.enqueue(id, step, out.frame.clone())? {
                    jobs.push(job);
                }
                events.push(EngineEvent::FrameOut { request: id, step, frame: out.frame });
            }
        }

        let serial = self.cfg.vocoder.concurrency == VocoderConcurrency::Serial;
        let vocoder_cost: SimDuration = if serial { jobs.iter().map(|j| j.cost).sum() } else { SimDuration::ZERO };
        let duration = prefill_cost.max(decode_cost) + vocoder_cost;
        self.clock.advance(duration);
        let end = self.clock.now();

        for job in jobs {
            let ready_at = if serial { end } else { self.vocoder.schedule(&job, end) };
            let e = self.entries.get_mut(&job.desc.request_id).expect("entry with audio");
            e.chunks_in_flight += 1;
            // Batched vocoder rounds can finish out of submission order.
            let at = self.pending_audio.partition_point(|p| p.ready_at <= ready_at);
            self.pending_audio.insert(at, PendingChunk { ready_at, chunk: job.desc });
        }

        for id in prefill_done {
            self.complete_prefill(id)?;
        }

        if duration == SimDuration::ZERO && self.running.is_empty() {
            // Nothing ran; let the vocoder worker catch up.
            if let Some(next) = self.pending_audio.front().map(|p| p.ready_at) {
                self.clock.advance_to(next);
            }
        }
        self.release_audio(&mut events);
        Ok(events)
    }

    /// Steps until every request has finished; returns all events.
    pub fn drain(&mut self) -> Result<Vec<EngineEvent>, EngineError> {
        let mut all = Vec::new();
        while !self.is_idle() {
            all.extend(self.step()?);
        }
        Ok(all)
    }

    fn pick_decode_set(&mut self) -> Vec<RequestId> {
        let decoding: Vec<RequestId> = self
            .running
            .iter()
            .copied()
            .filter(|id| matches!(self.entries[id].phase, Phase::Decoding { .. }))
            .collect();
        let budget = self.cfg.scheduler.decode_budget();
        if decoding.len() <= budget {
            return decoding;
        }
        // Rotate so no request starves when the budget is below the batch.
        let start = self.decode_cursor % decoding.len();
        self.decode_cursor = self.decode_cursor.wrapping_add(budget);
        decoding.iter().cycle().skip(start).take(budget).copied().collect()
    }

    fn admit(&mut self, events: &mut Vec<EngineEvent>) -> Result<(), EngineError> {
        while self.running.len() < self.cfg.scheduler.max_running {
            let Some(&id) = self.waiting.front() else { break };
            let key = self.entries[&id].key_units();
            let total = key.len();
            let m = self.cache.match_prefix(&key);
            let ps = self.pool.page_size();
            let cow = usize::from(!m.matched_len.is_multiple_of(ps) && m.matched_len < total);
            let needed = self.pool.blocks_for(total) - m.blocks.len() + cow;

            self.cache.lock(m.node)?;
            if self.pool.free_blocks() < needed {
                self.evict_for(needed)?;
            }
            if self.pool.free_blocks() < needed {
                self.cache.unlock(m.node)?;
                if self.running.is_empty() {
                    // Nothing will ever free more memory for this request.
                    self.waiting.pop_front();
                    let msg = format!("prompt needs {needed} KV blocks, pool cannot supply them");
                    self.fail(id, msg, events);
                    continue;
                }
                break;
            }

            self.waiting.pop_front();
            self.pool.share(&m.blocks)?;
            let e = self.entries.get_mut(&id).expect("waiting entry");
            e.table.blocks = m.blocks;
            e.table.filled_units = m.matched_len;
            if cow == 1 {
                self.pool.make_tail_private(&mut e.table)?;
            }
            let extra = self.pool.blocks_for(total) - e.table.blocks.len();
            let fresh = self.pool.alloc_blocks(extra)?;
            e.table.blocks.extend(fresh);
            e.table.filled_units = total;
            e.prefill_total = total;
            e.lock = Some(m.node);
            self.admit_counter += 1;
            e.admit_seq = self.admit_counter;
            if e.first_hit.is_none() {
                let hit = m.matched_len.min(e.prompt.len());
                e.first_hit = Some(hit);
                self.cache.record_prefill(hit, e.prompt.len());
            }
            debug!(id, matched = m.matched_len, total, "admitted");
            if m.matched_len == total {
                let state = self.build_state(id);
                let e = self.entries.get_mut(&id).expect("entry");
                e.model = Some(state);
                e.phase = Phase::Decoding { frames_done: e.generated.len() as u32 };
            } else {
                e.phase = Phase::Prefilling { done_units: m.matched_len };
            }
            self.running.push(id);
        }
        Ok(())
    }

    fn build_state(&self, id: RequestId) -> MockModelState {
        let e = &self.entries[&id];
        let mut state = self.model.state_for(&e.prompt, e.text_tokens, &e.request.sampling);
        state.fast_forward(e.generated.len() as u32);
        state
    }

    /// Publishes a finished prefill to the cache and starts decoding.
    fn complete_prefill(&mut self, id: RequestId) -> Result<(), EngineError> {
        if !self.running.contains(&id) {
            return Ok(());
        }
        let state = self.build_state(id);
        let e = self.entries.get_mut(&id).expect("prefilled entry");
        let key = e.key_units();
        let ins = self.cache.insert(&key, &e.table.blocks)?;
        self.pool.share(&ins.retained)?;
        self.cache.lock(ins.node)?;
        if let Some(old) = e.lock.replace(ins.node) {
            self.cache.unlock(old)?;
        }
        e.model = Some(state);
        e.phase = Phase::Decoding { frames_done: e.generated.len() as u32 };
        self.trim_cache()?;
        Ok(())
    }

    fn trim_cache(&mut self) -> Result<(), EngineError> {
        let ev = self.cache.evict_to_fit();
        self.pool.release(&ev.freed_blocks)?;
        Ok(())
    }

    /// Evicts unlocked cache entries until `needed` blocks are free or the
    /// cache has nothing left to give.
    fn evict_for(&mut self, needed: usize) -> Result<(), EngineError> {
        let ps = self.pool.page_size();
        let watermark = (self.cfg.cache.capacity_units as f64 * self.cfg.cache.evict_watermark) as usize;
        while self.pool.free_blocks() < needed {
            let short = needed - self.pool.free_blocks();
            let target = (short * ps).max(self.cache.resident_units().saturating_sub(watermark));
            let ev = self.cache.evict(target);
            if ev.freed_units == 0 {
                break;
            }
            self.pool.release(&ev.freed_blocks)?;
        }
        Ok(())
    }

    /// `Some(true)`: slot reserved (or not needed, for the EOS step).
    /// `Some(false)`: the request was preempted or failed.
    /// `None`: the request is no longer running.
    fn reserve_decode_slot(&mut self, id: RequestId, events: &mut Vec<EngineEvent>) -> Result<Option<bool>, EngineError> {
        loop {
            let Some(e) = self.entries.get_mut(&id) else { return Ok(None) };
            if !matches!(e.phase, Phase::Decoding { .. }) {
                return Ok(None);
            }
            let state = e.model.as_ref().expect("decoding entry has model state");
            if state.frames_emitted() >= state.target_frames() {
                // Next step is EOS, which is not stored.
                return Ok(Some(true));
            }
            match self.pool.append_slot(&mut e.table) {
                Ok(_) => return Ok(Some(true)),
                Err(PagerError::OutOfBlocks { .. }) => match self.relieve_pressure(id, events)? {
                    Relief::Retry => continue,
                    Relief::SelfPreempted => return Ok(Some(false)),
                    Relief::Failed(msg) => {
                        self.fail(id, msg, events);
                        return Ok(Some(false));
                    }
                },
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn relieve_pressure(&mut self, id: RequestId, events: &mut Vec<EngineEvent>) -> Result<Relief, EngineError> {
        self.evict_for(1)?;
        if self.pool.free_blocks() > 0 {
            return Ok(Relief::Retry);
        }
        let victim = self
            .running
            .iter()
            .copied()
            .filter(|v| matches!(self.entries[v].phase, Phase::Decoding { .. }))
            .max_by_key(|v| self.entries[v].admit_seq)
            .unwrap_or(id);
        if victim == id && self.running.len() == 1 {
            return Ok(Relief::Failed("KV pool too small for a single request".into()));
        }
        self.preempt(victim, events)?;
        Ok(if victim == id { Relief::SelfPreempted } else { Relief::Retry })
    }

    fn preempt(&mut self, id: RequestId, events: &mut Vec<EngineEvent>) -> Result<(), EngineError> {
        let e = self.entries.get_mut(&id).expect("running entry");
        self.pool.release_table(&mut e.table)?;
        if let Some(lock) = e.lock.take() {
            self.cache.unlock(lock)?;
        }
        e.model = None;
        e.preemptions += 1;
        e.phase = Phase::Preempted;
        self.preemptions += 1;
        self.running.retain(|&r| r != id);
        events.push(EngineEvent::Preempted { request: id });
        debug!(id, frames = e.generated.len(), "preempted");
        // Recompute resumes ahead of new arrivals.
        e.phase = Phase::Waiting;
        self.waiting.push_front(id);
        Ok(())
    }

    fn finish_decode(&mut self, id: RequestId) -> Result<Option<ChunkJob>, EngineError> {
        let e = self.entries.get_mut(&id).expect("decoding entry");
        e.eos = true;
        if !e.table.blocks.is_empty() {
            let key = e.key_units();
            debug_assert_eq!(key.len(), e.table.filled_units);
            let ins = self.cache.insert(&key, &e.table.blocks)?;
            self.pool.share(&ins.retained)?;
        }
        if let Some(lock) = e.lock.take() {
            self.cache.unlock(lock)?;
        }
        self.pool.release_table(&mut e.table)?;
        e.model = None;
        self.running.retain(|&r| r != id);
        self.trim_cache()?;
        self.vocoder.mark_eos(id);
        Ok(self.vocoder.flush(id)?)
    }

    fn fail(&mut self, id: RequestId, msg: String, events: &mut Vec<EngineEvent>) {
        if let Some(mut e) = self.entries.remove(&id) {
            let _ = self.pool.release_table(&mut e.table);
            if let Some(lock) = e.lock.take() {
                let _ = self.cache.unlock(lock);
            }
            self.running.retain(|&r| r != id);
            self.waiting.retain(|&r| r != id);
            self.vocoder.forget(id);
            self.pending_audio.retain(|p| p.chunk.request_id != id);
            self.requests_failed += 1;
            let now = self.clock.now();
            let metrics = RequestMetrics {
                arrival: e.arrival,
                finished_at: now,
                ttfa: None,
                rtf: None,
                frames: e.generated.len() as u32,
                prompt_units: e.prompt.len(),
                cache_hit_units: e.first_hit.unwrap_or(0),
                preemptions: e.preemptions,
                error: Some(msg.clone()),
            };
            e.phase = Phase::Finished(FinishReason::Error(msg));
            events.push(EngineEvent::Done { request: id, metrics });
        }
    }

    fn release_audio(&mut self, events: &mut Vec<EngineEvent>) {
        let now = self.clock.now();
        while self.pending_audio.front().is_some_and(|p| p.ready_at <= now) {
            let p = self.pending_audio.pop_front().expect("non-empty");
            let id = p.chunk.request_id;
            let e = self.entries.get_mut(&id).expect("entry with audio");
            e.chunks_in_flight -= 1;
            e.first_audio.get_or_insert(p.ready_at);
            e.last_audio = Some(p.ready_at);
            events.push(EngineEvent::AudioChunk { chunk: p.chunk, ready_at: p.ready_at });
        }
        let finished: Vec<RequestId> = self
            .entries
            .iter()
            .filter(|(_, e)| e.eos && e.chunks_in_flight == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut finished = finished;
        finished.sort_unstable();
        for id in finished {
            let e = self.entries.remove(&id).expect("finished entry");
            self.vocoder.forget(id);
            let frames = e.generated.len() as u32;
            let finished_at = e.last_audio.unwrap_or(now).max(e.arrival);
            let audio_s = self.cfg.codebook.audio_seconds(frames as u64);
            let metrics = RequestMetrics {
                arrival: e.arrival,
                finished_at,
                ttfa: e.first_audio.map(|t| t - e.arrival),
                rtf: (frames > 0).then(|| (finished_at - e.arrival).as_secs_f64() / audio_s),
                frames,
                prompt_units: e.prompt.len(),
                cache_hit_units: e.first_hit.unwrap_or(0),
                preemptions: e.preemptions,
                error: None,
            };
            self.requests_completed += 1;
            self.completed.push_back(metrics.clone());
            if self.completed.len() > STATS_WINDOW {
                self.completed.pop_front();
            }
            events.push(EngineEvent::Done { request: id, metrics });
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        let mut ttfas: Vec<f64> = self.completed.iter().filter_map(RequestMetrics::ttfa_ms).collect();
        ttfas.sort_by(f64::total_cmp);
        let rtfs: Vec<f64> = self.completed.iter().filter_map(|m| m.rtf).collect();
        let elapsed = self.clock.now().since_epoch();
        let tokens = self.frames_total * self.cfg.codebook.n_codebooks as u64;
        StatsSnapshot {
            requests_completed: self.requests_completed,
            requests_failed: self.requests_failed,
            hit_rate: hit_rate(&self.cache.stats()),
            cache: self.cache.stats(),
            resident_units: self.cache.resident_units(),
            ttfa_p50_ms: percentile(&ttfas, 50.0),
            ttfa_p99_ms: percentile(&ttfas, 99.0),
            mean_rtf: (!rtfs.is_empty()).then(|| rtfs.iter().sum::<f64>() / rtfs.len() as f64),
            tokens_per_s: (elapsed > SimDuration::ZERO).then(|| tokens as f64 / elapsed.as_secs_f64()),
            frames_total: self.frames_total,
            preemptions: self.preemptions,
            elapsed_ms: elapsed.as_millis_f64(),
            pool: PoolGauges {
                page_size: self.pool.page_size(),
                total_blocks: self.pool.total_blocks(),
                free_blocks: self.pool.free_blocks(),
                used_blocks: self.pool.used_blocks(),
            },
            waiting: self.waiting.len(),
            running: self.running.len(),
        }
    }

    /// Conservation and structure checks across pager, cache and page tables.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.cache.check_invariants()?;
        let mut refs: HashMap<u32, u32> = HashMap::new();
        for b in self.cache.held_blocks() {
            *refs.entry(b.0).or_default() += 1;
        }
        for e in self.entries.values() {
            let mut seen = std::collections::HashSet::new();
            for b in &e.table.blocks {
                if !seen.insert(b.0) {
                    return Err(format!("block {} twice in one page table", b.0));
                }
                *refs.entry(b.0).or_default() += 1;
            }
            if e.table.filled_units > e.table.blocks.len() * self.pool.page_size() {
                return Err("page table overfilled".into());
            }
        }
        for (b, n) in &refs {
            let rc = self.pool.refcount(crate::pager::BlockId(*b));
            if rc != *n {
                return Err(format!("block {b}: refcount {rc}, {n} holders"));
            }
        }
        if refs.len() + self.pool.free_blocks() != self.pool.total_blocks() {
            return Err(format!(
                "conservation: {} resident + {} free != {}",
                refs.len(),
                self.pool.free_blocks(),
                self.pool.total_blocks()
            ));
        }
        Ok(())
    }
}
