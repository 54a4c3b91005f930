//! One PASS/FAIL line per acceptance criterion, then the total wall time.

#[path = "../../core/tests/support/pager_fuzz.rs"]
mod pager_fuzz;
#[path = "../../core/tests/support/radix_oracle.rs"]
mod radix_oracle;
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dualar_core::bench::{run_in_process, voice_reference, Arrival, TextLen, WorkloadSpec};
use dualar_core::config::EngineConfig;
use dualar_core::mathcheck::{self, CheckConfig};
use dualar_core::mock::SamplingParams;
use dualar_core::rollout::{run_loop, score_group, Candidate, LoopConfig, MockScorer, ScoringPool, WaveformCache};
use dualar_core::scheduler::{Engine, EngineEvent, Request, RequestMetrics};
use dualar_core::time::SimDuration;
use dualar_core::token::{CodebookConfig, PromptSegment, TokenFrame};
use dualar_core::wire::GenerateRequest;
use dualar_core::RewardWeights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rows_pass(report: &mathcheck::CheckReport, names: &[&str]) -> Result<(), String> {
    for n in names {
        let row = report.row(n).ok_or_else(|| format!("missing check {n}"))?;
        ensure(row.passed, || format!("{n}: max rel err {:e} {}", row.max_rel_err, row.detail))?;
    }
    Ok(())
}

fn c1_math_oracles() -> Outcome {
    let t = Instant::now();
    let report = mathcheck::run(&CheckConfig::default());
    let elapsed = t.elapsed();
    let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed: {failed:?}"))?;
    ensure(report.rows.iter().all(|r| r.cases >= 1000 || r.name == "kl_enumeration"), || "fewer than 1000 cases".into())?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{} kernels x 1000 cases at 1e-12 in {:.2}s", report.rows.len(), elapsed.as_secs_f64()))
}

fn c2_kl() -> Outcome {
    let report = mathcheck::run(&CheckConfig { cases: 10, ..CheckConfig::default() });
    rows_pass(&report, &["kl_schulman", "kl_enumeration", "kl_nonnegative"])?;
    let r = report.row("kl_enumeration").unwrap();
    Ok(format!("50 pairs exact to {:.1e}; 10,000 samples nonnegative", r.max_rel_err))
}

fn c3_advantages() -> Outcome {
    let report = mathcheck::run(&CheckConfig::default());
    rows_pass(&report, &["grpo_advantages", "advantage_sum_zero", "advantage_scale_no_std", "advantage_shift_exact"])?;
    Ok("sum zero, exact scaling, no std division".into())
}

fn c4_radix() -> Outcome {
    let s = radix_oracle::run_scripts(1000, 0)?;
    Ok(format!("{} scripts, {} match lengths agree, invariants after {} mutations", s.scripts, s.matches_checked, s.mutations))
}

fn c5_pager() -> Outcome {
    let s = pager_fuzz::run_fuzz(10_000, 0)?;
    ensure(s.ooms > 0 && s.double_frees_caught > 0, || format!("fuzz did not exercise failures: {s:?}"))?;
    Ok(format!("{} steps, {} all-or-nothing OOMs, {} bad releases refused", s.steps, s.ooms, s.double_frees_caught))
}

fn run_one(engine: &mut Engine, segments: Vec<PromptSegment>, seed: u64) -> RequestMetrics {
    let t = engine.submit(Request::new(segments, SamplingParams { seed, max_frames: 64 })).unwrap();
    engine
        .drain()
        .unwrap()
        .into_iter()
        .find_map(|e| match e {
            EngineEvent::Done { request, metrics } if request == t.id => Some(metrics),
            _ => None,
        })
        .unwrap()
}

fn c6_ttfa_delta() -> Outcome {
    let cfg = EngineConfig::default();
    let per_unit = cfg.model.prefill_cost_per_unit;
    let mut engine = Engine::new(cfg.clone()).map_err(|e| e.to_string())?;
    let refs: Vec<TokenFrame> = voice_reference(5, 0, 200, &cfg.codebook)
        .iter()
        .map(|r| TokenFrame::from_row(r).unwrap())
        .collect();
    let prompt = |text: Vec<u32>| vec![PromptSegment::AudioFrames(refs.clone()), PromptSegment::TextTokens(text)];
    let cold = run_one(&mut engine, prompt(vec![1, 2, 3]), 1);
    let warm = run_one(&mut engine, prompt(vec![4, 5, 6]), 2);
    ensure(warm.cache_hit_units == 200, || format!("warm hit {} units", warm.cache_hit_units))?;
    let (c, w) = (cold.ttfa.unwrap(), warm.ttfa.unwrap());
    let want = SimDuration::from_nanos(per_unit.as_nanos() * 200);
    ensure(c.saturating_sub(w) == want, || format!("delta {:?} vs {:?}", c.saturating_sub(w), want))?;
    Ok(format!("cold {:.2} ms, warm {:.2} ms, delta exactly {:.2} ms", c.as_millis_f64(), w.as_millis_f64(), want.as_millis_f64()))
}

fn c7_rtf() -> Outcome {
    let text = TextLen { mu: 50f64.ln(), sigma: 0.2, min: 1, max: 512 };
    let unloaded = WorkloadSpec { n_requests: 20, n_voices: 4, arrival: Arrival::Closed { concurrency: 1 }, text_len: text.clone(), ..WorkloadSpec::default() };
    let r = run_in_process(&unloaded, EngineConfig::default()).map_err(|e| e.to_string())?;
    let rtf = r.summary.rtf_mean.ok_or("no RTF")?;
    ensure((rtf - 0.195).abs() <= 0.0195, || format!("unloaded mean RTF {rtf}"))?;

    let mut cfg = EngineConfig::default();
    cfg.scheduler.max_running = 16;
    cfg.scheduler.prefill_chunk_units = 32;
    let sat = WorkloadSpec { n_requests: 160, n_voices: 4, arrival: Arrival::Closed { concurrency: 16 }, text_len: text, ..WorkloadSpec::default() };
    let r = run_in_process(&sat, cfg.clone()).map_err(|e| e.to_string())?;
    let bound = 16.0 * cfg.codebook.n_codebooks as f64 / 9.05e-3;
    let tps = r.summary.tokens_per_s.ok_or("no throughput")?;
    let worst = r.rows.iter().filter_map(|x| x.rtf).fold(0.0, f64::max);
    ensure(tps >= 0.85 * bound, || format!("throughput {tps:.0} < 0.85 x {bound:.0}"))?;
    ensure(worst < 0.5, || format!("max RTF {worst}"))?;
    Ok(format!("unloaded RTF {rtf:.4}; 16-way {tps:.0} tok/s ({:.1}% of bound), max RTF {worst:.3}", 100.0 * tps / bound))
}

fn c8_hit_rate() -> Outcome {
    let single = WorkloadSpec {
        n_requests: 10,
        n_voices: 1,
        arrival: Arrival::Closed { concurrency: 1 },
        text_len: TextLen { mu: 10f64.ln(), sigma: 0.0, min: 1, max: 512 },
        text_pool: Some(1),
        max_frames: 64,
        ..WorkloadSpec::default()
    };
    let r = run_in_process(&single, EngineConfig::default()).map_err(|e| e.to_string())?;
    ensure(r.summary.hit_rate == Some(0.9), || format!("single-voice hit rate {:?}", r.summary.hit_rate))?;
    let mut rates = Vec::new();
    for skew in [0.0, 0.5, 1.1, 1.6, 2.5] {
        let r = run_in_process(&WorkloadSpec { voice_skew: skew, ..WorkloadSpec::default() }, EngineConfig::default())
            .map_err(|e| e.to_string())?;
        rates.push(r.summary.hit_rate.ok_or("no hit rate")?);
    }
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("not monotone: {rates:?}"))?;
    let shown: Vec<String> = rates.iter().map(|h| format!("{h:.3}")).collect();
    Ok(format!("single voice 0.90 exactly; skew 0/0.5/1.1/1.6/2.5 -> {}", shown.join("/")))
}

fn c9_streaming() -> Outcome {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(support::streaming_criterion(100))?;
    Ok("100 concurrent streams gapless, one terminal each, replay identical".into())
}

fn c10_preemption() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cb = CodebookConfig::default();
    let reqs: Vec<Request> = (0..50usize)
        .map(|i| {
            let refs = voice_reference(9, i, rng.random_range(1..24), &cb).iter().map(|r| TokenFrame::from_row(r).unwrap()).collect();
            let text: Vec<u32> = (0..rng.random_range(3..12)).map(|_| rng.random_range(0..32768)).collect();
            Request::new(
                vec![PromptSegment::AudioFrames(refs), PromptSegment::TextTokens(text)],
                SamplingParams { seed: rng.random(), max_frames: 60 },
            )
        })
        .collect();
    let run = |cfg: EngineConfig| -> Result<(Vec<Vec<TokenFrame>>, u64), String> {
        let mut engine = Engine::new(cfg).map_err(|e| e.to_string())?;
        let ids: Vec<u64> = reqs.iter().map(|r| engine.submit(r.clone()).map(|t| t.id)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let mut frames = vec![Vec::new(); reqs.len()];
        let mut preempted = 0;
        for e in engine.drain().map_err(|e| e.to_string())? {
            match e {
                EngineEvent::FrameOut { request, frame, .. } => frames[ids.iter().position(|&x| x == request).unwrap()].push(frame),
                EngineEvent::Preempted { .. } => preempted += 1,
                EngineEvent::Done { metrics, .. } if metrics.error.is_some() => return Err(metrics.error.unwrap()),
                _ => {}
            }
        }
        Ok((frames, preempted))
    };
    let mut roomy = EngineConfig::default();
    roomy.scheduler.max_running = 8;
    let (reference, _) = run(roomy.clone())?;
    let mut tight = roomy;
    tight.pool.page_size = 4;
    tight.pool.total_blocks = 60;
    tight.cache.capacity_units = 32;
    let (pressed, preempted) = run(tight)?;
    ensure(preempted > 0, || "no preemption was forced".into())?;
    ensure(reference == pressed, || "frame sequences differ after preemption".into())?;
    Ok(format!("50 requests, {preempted} preemptions, frames identical"))
}

fn c11_rollout() -> Outcome {
    let mut p = GenerateRequest::new("the quick brown fox [laugh] jumps over <|speaker:1|> the lazy dog");
    p.system.text = "<|speaker:0|>".into();
    p.system.reference_frames = voice_reference(3, 0, 24, &CodebookConfig::default());
    p.max_frames = 96;
    let prompts = vec![p];
    let lc = |workers, steps| LoopConfig { steps, group_size: 8, workers, seed: 1, ..LoopConfig::default() };
    let one = run_loop(&lc(1, 10), EngineConfig::default(), &prompts, Arc::new(MockScorer::default())).map_err(|e| e.to_string())?;
    let eight = run_loop(&lc(8, 10), EngineConfig::default(), &prompts, Arc::new(MockScorer::default())).map_err(|e| e.to_string())?;
    ensure(one.series == eight.series && one.last_group == eight.last_group, || "1 vs 8 workers differ".into())?;

    let job = dualar_core::rollout::RolloutJob::new(prompts[0].clone(), 2, 0, RewardWeights::default()).map_err(|e| e.to_string())?;
    let ctx = Arc::new(job.context().map_err(|e| e.to_string())?);
    let frames = |k: u32| (0..12u32).map(|i| TokenFrame::new(k * 50 + i, vec![i % 5; 9])).collect::<Vec<_>>();
    let sets = [1, 2, 1, 3, 2, 1, 4, 5];
    let cands: Vec<Candidate> = sets
        .iter()
        .enumerate()
        .map(|(index, &k)| Candidate { index, seed: index as u64, frames: frames(k), error: None })
        .collect();
    let cache = Arc::new(WaveformCache::with_spot_check(64, 0));
    let mut pool = ScoringPool::new(4, Arc::new(MockScorer::default()), cache.clone());
    score_group(&mut pool, ctx, &cands, &RewardWeights::default());
    let c = cache.counters();
    ensure(c.hits == 3 && c.misses == 5, || format!("3 duplicates gave {} hits, {} misses", c.hits, c.misses))?;

    let long = run_loop(&lc(4, 100), EngineConfig::default(), &prompts, Arc::new(MockScorer::default())).map_err(|e| e.to_string())?;
    ensure(long.series.len() == 100 && long.series.iter().all(|s| s.mean_reward.is_some()), || "incomplete series".into())?;
    let json = long.to_json().map_err(|e| e.to_string())?;
    ensure(json.contains("\"series\"") && !long.render_series(8).is_empty(), || "series not rendered".into())?;
    let first = long.series[0].mean_reward.unwrap();
    let last = long.series[99].mean_reward.unwrap();
    Ok(format!("1 vs 8 workers identical; 3 duplicates -> 3 hits; 100-step series {first:.3} .. {last:.3}"))
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("math oracles", c1_math_oracles),
        ("KL enumeration", c2_kl),
        ("advantage properties", c3_advantages),
        ("radix-cache oracle", c4_radix),
        ("pager conservation", c5_pager),
        ("warm/cold TTFA delta", c6_ttfa_delta),
        ("RTF calibration", c7_rtf),
        ("hit-rate reproduction", c8_hit_rate),
        ("streaming correctness", c9_streaming),
        ("preemption determinism", c10_preemption),
        ("rollout harness", c11_rollout),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    let total = start.elapsed();
    let budget = Duration::from_secs(600);
    if total < budget {
        println!("criterion 12 PASS end-to-end budget: criteria 1-11 took {:.1}s (< 600s)", total.as_secs_f64());
    } else {
        failures += 1;
        println!("criterion 12 FAIL end-to-end budget: criteria 1-11 took {:.1}s (>= 600s)", total.as_secs_f64());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
