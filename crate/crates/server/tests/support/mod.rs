#![allow(dead_code)]

use dualar_core::bench::voice_reference;
use dualar_core::config::EngineConfig;
use dualar_core::token::CodebookConfig;
use dualar_core::wire::{GenerateRequest, StreamEvent};
use dualar_server::client::{generate, Transcript};
use dualar_server::RunningServer;

pub async fn start(cfg: EngineConfig) -> RunningServer {
    dualar_server::spawn(cfg, "127.0.0.1:0").await.expect("server starts")
}

/// A seeded request with its own voice, so concurrent requests share no
/// prefix.
pub fn seeded_request(i: usize) -> GenerateRequest {
    let words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
    let text: Vec<&str> = (0..4 + i % 5).map(|k| words[(i * 3 + k) % words.len()]).collect();
    let mut r = GenerateRequest::new(text.join(" "));
    r.system.text = format!("<|speaker:{}|>", i % 3);
    r.system.reference_frames = voice_reference(1234, i, 8 + i % 7, &CodebookConfig::default());
    r.seed = 1000 + i as u64;
    r.max_frames = 48;
    r
}

/// Steps gapless from 0, chunks contiguous from 0, exactly one terminal
/// event and it is last.
pub fn check_stream(t: &Transcript) -> Result<(), String> {
    if t.status != 200 {
        return Err(format!("status {}", t.status));
    }
    let mut next_step = 0;
    let mut next_chunk = 0;
    let mut terminals = 0;
    for (i, ev) in t.events.iter().enumerate() {
        match ev {
            StreamEvent::Frame { step, .. } => {
                if *step != next_step {
                    return Err(format!("step {step} where {next_step} expected"));
                }
                next_step += 1;
            }
            StreamEvent::Audio { chunk, .. } => {
                if *chunk != next_chunk {
                    return Err(format!("chunk {chunk} where {next_chunk} expected"));
                }
                next_chunk += 1;
            }
            StreamEvent::Done { .. } | StreamEvent::Error { .. } => {
                terminals += 1;
                if i + 1 != t.events.len() {
                    return Err("terminal event is not last".into());
                }
            }
        }
    }
    if terminals != 1 {
        return Err(format!("{terminals} terminal events"));
    }
    if next_step == 0 {
        return Err("no frames".into());
    }
    Ok(())
}

/// Stream body with scheduling-dependent parts removed: frame lines, then
/// audio lines, then the terminal line without timing fields.
pub fn replay_form(t: &Transcript) -> String {
    let mut frames = String::new();
    let mut audio = String::new();
    let mut tail = String::new();
    for ev in &t.events {
        match ev {
            StreamEvent::Frame { .. } => frames.push_str(&ev.to_line()),
            StreamEvent::Audio { .. } => audio.push_str(&ev.to_line()),
            _ => tail.push_str(&ev.without_timing().to_line()),
        }
    }
    frames + &audio + &tail
}

/// Sends all requests concurrently and returns transcripts in input order.
pub async fn concurrent_round(url: &str, reqs: &[GenerateRequest]) -> Vec<Transcript> {
    let client = reqwest::Client::new();
    let tasks: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| {
            let client = client.clone();
            let url = url.to_string();
            tokio::spawn(async move { generate(&client, &url, &r).await.expect("transport") })
        })
        .collect();
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        out.push(t.await.expect("task"));
    }
    out
}

/// 100 concurrent seeded streams against one server, replayed against a
/// fresh one.
pub async fn streaming_criterion(n: usize) -> Result<(), String> {
    let reqs: Vec<GenerateRequest> = (0..n).map(seeded_request).collect();
    let first = {
        let s = start(EngineConfig::default()).await;
        concurrent_round(&s.url(), &reqs).await
    };
    let second = {
        let s = start(EngineConfig::default()).await;
        concurrent_round(&s.url(), &reqs).await
    };
    for (i, (a, b)) in first.iter().zip(&second).enumerate() {
        check_stream(a).map_err(|e| format!("request {i}: {e}"))?;
        check_stream(b).map_err(|e| format!("replay {i}: {e}"))?;
        if replay_form(a) != replay_form(b) {
            return Err(format!("request {i}: replay differs"));
        }
    }
    Ok(())
}
