use dualar_core::bench::{generate_workload, run_in_process, Arrival, TextLen, WorkloadSpec, ZipfTable};
use dualar_core::config::EngineConfig;
use dualar_core::token::{prompt_units, CodebookConfig};

fn cb() -> CodebookConfig {
    CodebookConfig::default()
}

/// Ten identical 200-unit prompts (189 reference frames, one speaker tag,
/// ten words) sent one after another.
fn single_voice_spec() -> WorkloadSpec {
    WorkloadSpec {
        n_requests: 10,
        n_voices: 1,
        arrival: Arrival::Closed { concurrency: 1 },
        text_len: TextLen { mu: 10f64.ln(), sigma: 0.0, min: 1, max: 512 },
        text_pool: Some(1),
        max_frames: 64,
        ..WorkloadSpec::default()
    }
}

#[test]
fn single_voice_prompts_are_200_units() {
    let reqs = generate_workload(&single_voice_spec(), &cb());
    let segs = reqs[0].request.to_segments(&cb()).unwrap();
    assert_eq!(prompt_units(&segs), 200);
    assert!(reqs.iter().all(|r| r.request.system == reqs[0].request.system && r.request.text == reqs[0].request.text));
}

#[test]
fn sequential_single_voice_hit_rate_is_exactly_nine_tenths() {
    let report = run_in_process(&single_voice_spec(), EngineConfig::default()).unwrap();
    assert_eq!(report.summary.completed, 10);
    assert_eq!(report.summary.hit_rate, Some(0.9));
    assert_eq!(report.rows[0].cache_hit_units, 0);
    assert!(report.rows[1..].iter().all(|r| r.cache_hit_units == 200));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let spec = WorkloadSpec { n_requests: 40, n_voices: 8, ..WorkloadSpec::default() };
    let a = run_in_process(&spec, EngineConfig::default()).unwrap();
    let b = run_in_process(&spec, EngineConfig::default()).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let csv = String::from_utf8(a.to_csv().unwrap()).unwrap();
    assert!(csv.starts_with("index,voice,arrival_ms,finished_ms,ttfa_ms,rtf,frames,prompt_units,cache_hit_units,error\n"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn hit_rate_is_monotone_in_skew() {
    let mut last = -1.0;
    for skew in [0.0, 0.5, 1.1, 1.6, 2.5] {
        let spec = WorkloadSpec { voice_skew: skew, ..WorkloadSpec::default() };
        let r = run_in_process(&spec, EngineConfig::default()).unwrap();
        let h = r.summary.hit_rate.unwrap();
        assert!(h >= last, "skew {skew}: hit rate {h} < {last}");
        last = h;
    }
}

#[test]
fn voice_frequencies_follow_zipf() {
    let spec = WorkloadSpec { n_requests: 10_000, n_voices: 20, voice_skew: 1.1, ref_frames: 1, ..WorkloadSpec::default() };
    let reqs = generate_workload(&spec, &cb());
    let mut counts = [0usize; 20];
    for r in &reqs {
        counts[r.voice] += 1;
    }
    let z = ZipfTable::new(20, 1.1);
    let chi2: f64 = (0..20)
        .map(|k| {
            let e = z.pmf(k) * 10_000.0;
            (counts[k] as f64 - e).powi(2) / e
        })
        .sum();
    // 99.9th percentile of chi-square with 19 degrees of freedom.
    assert!(chi2 < 43.82, "chi2 = {chi2}");
}

#[test]
fn degenerate_workloads() {
    let one = WorkloadSpec { n_requests: 20, n_voices: 1, ref_frames: 4, ..WorkloadSpec::default() };
    let reqs = generate_workload(&one, &cb());
    assert!(reqs.iter().all(|r| r.request.system == reqs[0].request.system));
    let steep = WorkloadSpec { n_requests: 50, n_voices: 30, voice_skew: 200.0, ref_frames: 4, ..WorkloadSpec::default() };
    assert!(generate_workload(&steep, &cb()).iter().all(|r| r.voice == 0));
    let bad = WorkloadSpec { n_voices: 0, ..WorkloadSpec::default() };
    assert!(bad.validate().is_err());
    assert!(WorkloadSpec::from_json(r#"{"version": 2}"#).is_err());
    assert!(WorkloadSpec::from_json(r#"{"n_requests": 3, "arrival": {"kind": "closed", "concurrency": 2}}"#).is_ok());
}

#[test]
fn unloaded_rtf_matches_calibration() {
    let spec = WorkloadSpec {
        n_requests: 20,
        n_voices: 4,
        arrival: Arrival::Closed { concurrency: 1 },
        text_len: TextLen { mu: 50f64.ln(), sigma: 0.2, min: 1, max: 512 },
        ..WorkloadSpec::default()
    };
    let r = run_in_process(&spec, EngineConfig::default()).unwrap();
    let rtf = r.summary.rtf_mean.unwrap();
    assert!((rtf - 0.195).abs() <= 0.0195, "mean RTF {rtf}");
}

#[test]
fn saturated_throughput_approaches_batch_bound() {
    let mut cfg = EngineConfig::default();
    cfg.scheduler.max_running = 16;
    cfg.scheduler.prefill_chunk_units = 32;
    let spec = WorkloadSpec {
        n_requests: 160,
        n_voices: 4,
        arrival: Arrival::Closed { concurrency: 16 },
        text_len: TextLen { mu: 50f64.ln(), sigma: 0.2, min: 1, max: 512 },
        ..WorkloadSpec::default()
    };
    let r = run_in_process(&spec, cfg.clone()).unwrap();
    let bound = 16.0 * cfg.codebook.n_codebooks as f64 / 9.05e-3;
    let tps = r.summary.tokens_per_s.unwrap();
    assert!(tps >= 0.85 * bound, "throughput {tps} vs bound {bound}");
    let worst = r.rows.iter().filter_map(|x| x.rtf).fold(0.0, f64::max);
    assert!(worst < 0.5, "max RTF {worst}");
}
