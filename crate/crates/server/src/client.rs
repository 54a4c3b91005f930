//! Workload driver against a running server.

use std::sync::Arc;
use std::time::{Duration, Instant};

use dualar_core::bench::{generate_workload, Arrival, BenchError, RequestRow, RunReport, WorkloadSpec};
use dualar_core::token::CodebookConfig;
use dualar_core::wire::{GenerateRequest, StreamEvent};
use futures::StreamExt;
use tokio::sync::Semaphore;

/// Events of one generate call.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub status: u16,
    pub events: Vec<StreamEvent>,
    /// Raw response body.
    pub body: String,
}

/// POSTs one streaming generate request and reads the NDJSON body.
pub async fn generate(client: &reqwest::Client, base: &str, req: &GenerateRequest) -> Result<Transcript, String> {
    let resp = client
        .post(format!("{}/v1/generate", base.trim_end_matches('/')))
        .json(req)
        .send()
        .await
        .map_err(|e| format!("transport: {e}"))?;
    let status = resp.status().as_u16();
    let mut body = Vec::new();
    let mut chunks = resp.bytes_stream();
    while let Some(c) = chunks.next().await {
        body.extend_from_slice(&c.map_err(|e| format!("transport: {e}"))?);
    }
    let body = String::from_utf8(body).map_err(|e| format!("body is not UTF-8: {e}"))?;
    let mut events = Vec::new();
    if status == 200 {
        if req.stream {
            for line in body.lines() {
                events.push(serde_json::from_str(line).map_err(|e| format!("bad event line: {e}"))?);
            }
        } else {
            events = serde_json::from_str(&body).map_err(|e| format!("bad event list: {e}"))?;
        }
    }
    Ok(Transcript { status, events, body })
}

fn row_from(index: usize, voice: usize, arrival_ms: f64, started: Instant, out: Result<Transcript, String>) -> RequestRow {
    let mut row = RequestRow {
        index,
        voice,
        arrival_ms,
        finished_ms: None,
        ttfa_ms: None,
        rtf: None,
        frames: 0,
        prompt_units: 0,
        cache_hit_units: 0,
        error: None,
    };
    match out {
        Err(e) => row.error = Some(e),
        Ok(t) if t.status != 200 => row.error = Some(format!("http {}: {}", t.status, t.body.trim())),
        Ok(t) => {
            row.finished_ms = Some(started.elapsed().as_secs_f64() * 1e3);
            match t.events.last() {
                Some(StreamEvent::Done { metrics }) => {
                    row.ttfa_ms = metrics.ttfa_ms;
                    row.rtf = metrics.rtf;
                    row.frames = metrics.frames;
                    row.cache_hit_units = metrics.cache_hit_units;
                }
                Some(StreamEvent::Error { message }) => row.error = Some(message.clone()),
                _ => row.error = Some("stream ended without a terminal event".into()),
            }
        }
    }
    row
}

/// Drives `spec` against the server at `base`. Poisson arrival offsets are
/// divided by `time_scale` and replayed in real time. Transport failures are
/// recorded per row and the run continues.
pub async fn run_http(spec: &WorkloadSpec, base: &str, codebook: &CodebookConfig, time_scale: f64) -> Result<RunReport, BenchError> {
    spec.validate()?;
    let reqs = generate_workload(spec, codebook);
    let client = reqwest::Client::new();
    let started = Instant::now();
    let gate = match spec.arrival {
        Arrival::Closed { concurrency } => Some(Arc::new(Semaphore::new(concurrency.max(1)))),
        Arrival::Poisson { .. } => None,
    };
    let mut tasks = Vec::with_capacity(reqs.len());
    for t in reqs {
        let permit = match &gate {
            Some(g) => Some(g.clone().acquire_owned().await.expect("semaphore open")),
            None => {
                let at = Duration::from_secs_f64(t.at.as_secs_f64() / time_scale.max(1e-9));
                tokio::time::sleep_until(tokio::time::Instant::from_std(started + at)).await;
                None
            }
        };
        let mut prompt = t.request.clone();
        prompt.stream = true;
        let client = client.clone();
        let base = base.to_string();
        let units = t.request.to_segments(codebook).map(|s| dualar_core::token::prompt_units(&s)).unwrap_or(0);
        tasks.push(tokio::spawn(async move {
            let arrival_ms = started.elapsed().as_secs_f64() * 1e3;
            let out = generate(&client, &base, &prompt).await;
            drop(permit);
            let mut row = row_from(t.index, t.voice, arrival_ms, started, out);
            row.prompt_units = units;
            row
        }));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        rows.push(task.await.map_err(|e| BenchError::Driver(e.to_string()))?);
    }
    rows.sort_by_key(|r| r.index);
    Ok(RunReport::new("http", spec.clone(), rows, codebook.n_codebooks))
}
