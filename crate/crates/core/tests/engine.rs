use std::collections::BTreeMap;

use dualar_core::config::EngineConfig;
use dualar_core::mock::SamplingParams;
use dualar_core::scheduler::{Engine, EngineEvent, Request, RequestMetrics, SubmitError};
use dualar_core::time::SimDuration;
use dualar_core::token::{PromptSegment, TokenFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ref_frames(n: usize, salt: u32) -> Vec<TokenFrame> {
    (0..n as u32).map(|i| TokenFrame::new((i * 7 + salt) % 4000, vec![(i + salt) % 1024; 9])).collect()
}

fn prompt(prefix: usize, salt: u32, text: &[u32]) -> Vec<PromptSegment> {
    vec![PromptSegment::AudioFrames(ref_frames(prefix, salt)), PromptSegment::TextTokens(text.to_vec())]
}

fn ttfa_cfg() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.model.prefill_cost_per_unit = SimDuration::from_millis(1);
    cfg.vocoder.first_chunk_frames = 1;
    cfg
}

fn run_one(engine: &mut Engine, segments: Vec<PromptSegment>, seed: u64) -> RequestMetrics {
    let t = engine.submit(Request::new(segments, SamplingParams { seed, max_frames: 64 })).unwrap();
    let events = engine.drain().unwrap();
    events
        .into_iter()
        .find_map(|e| match e {
            EngineEvent::Done { request, metrics } if request == t.id => Some(metrics),
            _ => None,
        })
        .unwrap()
}

#[test]
fn cold_and_warm_ttfa_match_cost_model() {
    let mut engine = Engine::new(ttfa_cfg()).unwrap();
    let segs = vec![PromptSegment::AudioFrames(ref_frames(95, 1)), PromptSegment::TextTokens(vec![1, 2, 3, 4, 5])];
    let cold = run_one(&mut engine, segs.clone(), 1);
    assert_eq!(cold.ttfa, Some(SimDuration::from_micros(111_050)));
    let warm = run_one(&mut engine, segs, 1);
    assert_eq!(warm.ttfa, Some(SimDuration::from_micros(11_050)));
    assert_eq!(warm.cache_hit_units, 100);
}

#[test]
fn cached_prefix_saves_exactly_its_prefill_cost() {
    let mut engine = Engine::new(ttfa_cfg()).unwrap();
    let cold = run_one(&mut engine, prompt(200, 3, &[10, 11, 12]), 1);
    let warm = run_one(&mut engine, prompt(200, 3, &[20, 21, 22]), 2);
    assert_eq!(warm.cache_hit_units, 200);
    assert_eq!(cold.ttfa.unwrap().saturating_sub(warm.ttfa.unwrap()), SimDuration::from_millis(200));
}

#[test]
fn frames_are_gapless_and_one_done_per_request() {
    let mut engine = Engine::new(EngineConfig::default()).unwrap();
    let mut ids = Vec::new();
    for i in 0..24u32 {
        let r = Request::new(prompt(20, i % 3, &[i, i + 1, i + 2]), SamplingParams { seed: i as u64, max_frames: 40 });
        ids.push(engine.submit(r).unwrap().id);
    }
    let events = engine.drain().unwrap();
    let mut next: BTreeMap<u64, u32> = BTreeMap::new();
    let mut done: BTreeMap<u64, u32> = BTreeMap::new();
    for e in &events {
        match e {
            EngineEvent::FrameOut { request, step, .. } => {
                assert!(!done.contains_key(request));
                let n = next.entry(*request).or_default();
                assert_eq!(*step, *n);
                *n += 1;
            }
            EngineEvent::Done { request, metrics } => {
                assert!(metrics.error.is_none());
                assert_eq!(metrics.frames, next.get(request).copied().unwrap_or(0));
                *done.entry(*request).or_default() += 1;
            }
            _ => {}
        }
    }
    assert_eq!(done.len(), ids.len());
    assert!(done.values().all(|&n| n == 1));
    engine.check_invariants().unwrap();
    let mut held = engine.cache().held_blocks();
    held.sort();
    held.dedup();
    assert_eq!(engine.pool().used_blocks(), held.len());
}

#[test]
fn audio_chunks_cover_frames_in_order() {
    let mut engine = Engine::new(EngineConfig::default()).unwrap();
    for i in 0..6u32 {
        engine.submit(Request::new(prompt(8, i, &[i; 7]), SamplingParams { seed: 9, max_frames: 50 })).unwrap();
    }
    let mut covered: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    let mut frames: BTreeMap<u64, u32> = BTreeMap::new();
    for e in engine.drain().unwrap() {
        match e {
            EngineEvent::AudioChunk { chunk, .. } => {
                let c = covered.entry(chunk.request_id).or_default();
                assert_eq!(chunk.chunk_index, c.0);
                assert_eq!(chunk.frame_start, c.1);
                c.0 += 1;
                c.1 += chunk.frame_count;
            }
            EngineEvent::Done { request, metrics } => {
                frames.insert(request, metrics.frames);
            }
            _ => {}
        }
    }
    for (id, n) in frames {
        assert_eq!(covered.get(&id).map(|c| c.1).unwrap_or(0), n);
    }
}

#[test]
fn admission_is_fifo() {
    let mut cfg = EngineConfig::default();
    cfg.scheduler.max_running = 1;
    let mut engine = Engine::new(cfg).unwrap();
    for i in 0..5u32 {
        engine.submit(Request::new(prompt(4, i, &[i, 2]), SamplingParams { seed: 1, max_frames: 5 })).unwrap();
    }
    let order: Vec<u64> = engine
        .drain()
        .unwrap()
        .into_iter()
        .filter_map(|e| match e {
            EngineEvent::Done { request, .. } => Some(request),
            _ => None,
        })
        .collect();
    assert_eq!(order, vec![0, 1, 2, 3, 4]);
}

#[test]
fn backpressure_and_invalid_requests_are_rejected() {
    let mut cfg = EngineConfig::default();
    cfg.scheduler.max_waiting = 2;
    let mut engine = Engine::new(cfg).unwrap();
    let mk = || Request::new(prompt(2, 0, &[1]), SamplingParams::default());
    engine.submit(mk()).unwrap();
    engine.submit(mk()).unwrap();
    assert!(matches!(engine.submit(mk()), Err(SubmitError::Backpressure(2))));
    let empty = Request::new(vec![PromptSegment::TextTokens(vec![])], SamplingParams::default());
    let mut engine = Engine::new(EngineConfig::default()).unwrap();
    assert!(matches!(engine.submit(empty), Err(SubmitError::Invalid(_))));
    let zero = Request::new(prompt(1, 0, &[1]), SamplingParams { seed: 0, max_frames: 0 });
    assert!(matches!(engine.submit(zero), Err(SubmitError::Invalid(_))));
}

#[test]
fn oversized_prompt_fails_instead_of_hanging() {
    let mut cfg = EngineConfig::default();
    cfg.pool.total_blocks = 4;
    cfg.pool.page_size = 4;
    let mut engine = Engine::new(cfg).unwrap();
    engine.submit(Request::new(prompt(40, 0, &[1]), SamplingParams::default())).unwrap();
    let events = engine.drain().unwrap();
    let m = events
        .iter()
        .find_map(|e| match e {
            EngineEvent::Done { metrics, .. } => Some(metrics),
            _ => None,
        })
        .unwrap();
    assert!(m.error.is_some());
    assert_eq!(engine.stats().requests_failed, 1);
    engine.check_invariants().unwrap();
}

fn frames_by_request(cfg: EngineConfig, reqs: &[Request]) -> (BTreeMap<u64, Vec<TokenFrame>>, u64) {
    let mut engine = Engine::new(cfg).unwrap();
    for r in reqs {
        engine.submit(r.clone()).unwrap();
    }
    let mut out: BTreeMap<u64, Vec<TokenFrame>> = BTreeMap::new();
    let mut preempted = 0;
    while !engine.is_idle() {
        for e in engine.step().unwrap() {
            match e {
                EngineEvent::FrameOut { request, frame, .. } => out.entry(request).or_default().push(frame),
                EngineEvent::Preempted { .. } => preempted += 1,
                EngineEvent::Done { metrics, .. } => assert!(metrics.error.is_none(), "{:?}", metrics.error),
                _ => {}
            }
        }
        engine.check_invariants().unwrap();
    }
    (out, preempted)
}

#[test]
fn preempted_requests_resume_with_identical_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let reqs: Vec<Request> = (0..50u32)
        .map(|i| {
            let text: Vec<u32> = (0..rng.random_range(3..12)).map(|_| rng.random_range(0..32768)).collect();
            let seg = prompt(rng.random_range(1..24), i, &text);
            Request::new(seg, SamplingParams { seed: rng.random(), max_frames: 60 })
        })
        .collect();
    let mut roomy = EngineConfig::default();
    roomy.scheduler.max_running = 8;
    let (reference, none) = frames_by_request(roomy.clone(), &reqs);
    assert_eq!(none, 0);

    let mut tight = roomy;
    tight.pool.page_size = 4;
    tight.pool.total_blocks = 60;
    tight.cache.capacity_units = 32;
    let (pressed, preempted) = frames_by_request(tight, &reqs);
    assert!(preempted > 0, "pool was not tight enough to force preemption");
    assert_eq!(reference, pressed);
}

#[test]
fn stats_report_completed_work() {
    let mut cfg = EngineConfig::default();
    cfg.scheduler.max_running = 1;
    let mut engine = Engine::new(cfg).unwrap();
    for i in 0..4u32 {
        engine.submit(Request::new(prompt(16, 0, &[i, 5, 6]), SamplingParams { seed: 3, max_frames: 30 })).unwrap();
    }
    engine.drain().unwrap();
    let s = engine.stats();
    assert_eq!(s.requests_completed, 4);
    assert_eq!(s.running + s.waiting, 0);
    assert!(s.ttfa_p50_ms.unwrap() <= s.ttfa_p99_ms.unwrap());
    assert!(s.hit_rate.unwrap() > 0.0);
    assert!(s.mean_rtf.unwrap() > 0.0);
}

fn trace(cfg: EngineConfig, reqs: &[Request]) -> (Vec<(u64, u32)>, Vec<String>, BTreeMap<u64, u64>) {
    let mut engine = Engine::new(cfg).unwrap();
    for r in reqs {
        engine.submit(r.clone()).unwrap();
    }
    let mut frames = Vec::new();
    let mut chunks = Vec::new();
    let mut finished = BTreeMap::new();
    for e in engine.drain().unwrap() {
        match e {
            EngineEvent::FrameOut { request, step, .. } => frames.push((request, step)),
            EngineEvent::AudioChunk { chunk, .. } => {
                chunks.push(format!("{}:{}:{:?}:{}", chunk.request_id, chunk.chunk_index, (chunk.frame_start, chunk.frame_count), chunk.digest))
            }
            EngineEvent::Done { request, metrics } => {
                finished.insert(request, metrics.finished_at.since_epoch().as_nanos());
            }
            _ => {}
        }
    }
    chunks.sort();
    (frames, chunks, finished)
}

#[test]
fn overlapped_vocoder_never_slower_than_serial() {
    let reqs: Vec<Request> = (0..6u32)
        .map(|i| Request::new(prompt(8 + i as usize, i, &[i, 1, 2, 3]), SamplingParams { seed: i as u64, max_frames: 40 }))
        .collect();
    let overlapped = EngineConfig::default();
    let mut serial = EngineConfig::default();
    serial.vocoder.concurrency = dualar_core::vocoder::VocoderConcurrency::Serial;
    let (fo, co, to) = trace(overlapped, &reqs);
    let (fs, cs, ts) = trace(serial, &reqs);
    assert_eq!(fo, fs);
    assert_eq!(co, cs);
    assert!(to.iter().all(|(id, t)| *t <= ts[id]));
    assert!(to.values().max() < ts.values().max());
}
