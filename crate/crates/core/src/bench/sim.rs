use std::collections::HashMap;

use super::{generate_workload, Arrival, BenchError, RequestRow, RunReport, TimedRequest, WorkloadSpec};
use crate::config::EngineConfig;
use crate::scheduler::{ClockKind, Engine, EngineEvent, RequestMetrics};
use crate::time::SimInstant;
use crate::token::prompt_units;

struct Driver<'a> {
    engine: Engine,
    reqs: &'a [TimedRequest],
    in_flight: HashMap<u64, usize>,
    rows: Vec<RequestRow>,
}

impl Driver<'_> {
    fn submit(&mut self, i: usize, at: SimInstant) {
        let t = &self.reqs[i];
        let cb = &self.engine.config().codebook;
        let mut row = RequestRow {
            index: t.index,
            voice: t.voice,
            arrival_ms: at.since_epoch().as_millis_f64(),
            finished_ms: None,
            ttfa_ms: None,
            rtf: None,
            frames: 0,
            prompt_units: 0,
            cache_hit_units: 0,
            error: None,
        };
        let req = match t.request.to_request(cb) {
            Ok(mut r) => {
                row.prompt_units = prompt_units(&r.segments);
                r.arrival_time = Some(at);
                r
            }
            Err(e) => {
                row.error = Some(e.to_string());
                self.rows.push(row);
                return;
            }
        };
        match self.engine.submit(req) {
            Ok(ticket) => {
                self.in_flight.insert(ticket.id, self.rows.len());
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        self.rows.push(row);
    }

    fn finish(&mut self, id: u64, m: &RequestMetrics) {
        let Some(slot) = self.in_flight.remove(&id) else { return };
        let row = &mut self.rows[slot];
        row.finished_ms = Some(m.finished_at.since_epoch().as_millis_f64());
        row.ttfa_ms = m.ttfa_ms();
        row.rtf = m.rtf;
        row.frames = m.frames;
        row.cache_hit_units = m.cache_hit_units;
        row.error = m.error.clone();
    }

    /// Steps once; returns how many requests finished.
    fn step(&mut self) -> Result<usize, BenchError> {
        let mut done = 0;
        for ev in self.engine.step()? {
            if let EngineEvent::Done { request, metrics } = &ev {
                self.finish(*request, metrics);
                done += 1;
            }
        }
        Ok(done)
    }
}

/// Replays the workload against an in-process engine on the simulated
/// clock. Deterministic: identical spec and config give identical reports.
pub fn run_in_process(spec: &WorkloadSpec, mut cfg: EngineConfig) -> Result<RunReport, BenchError> {
    spec.validate()?;
    cfg.scheduler.clock = ClockKind::Simulated;
    let n_codebooks = cfg.codebook.n_codebooks;
    let reqs = generate_workload(spec, &cfg.codebook);
    let mut d = Driver { engine: Engine::new(cfg)?, reqs: &reqs, in_flight: HashMap::new(), rows: Vec::new() };

    match spec.arrival {
        Arrival::Poisson { .. } => {
            let mut next = 0;
            loop {
                while next < reqs.len() && SimInstant::EPOCH + reqs[next].at <= d.engine.now() {
                    d.submit(next, SimInstant::EPOCH + reqs[next].at);
                    next += 1;
                }
                if d.engine.is_idle() {
                    if next == reqs.len() {
                        break;
                    }
                    d.engine.advance_idle_to(SimInstant::EPOCH + reqs[next].at);
                    continue;
                }
                d.step()?;
            }
        }
        Arrival::Closed { concurrency } => {
            let mut next = 0;
            while next < reqs.len().min(concurrency) {
                d.submit(next, d.engine.now());
                next += 1;
            }
            while !d.engine.is_idle() {
                let freed = d.step()?;
                for _ in 0..freed {
                    if next < reqs.len() {
                        d.submit(next, d.engine.now());
                        next += 1;
                    }
                }
                // Rejected submissions leave slots free with nothing running.
                while d.engine.is_idle() && next < reqs.len() {
                    d.submit(next, d.engine.now());
                    next += 1;
                }
            }
        }
    }
    Ok(RunReport::new("sim", spec.clone(), d.rows, n_codebooks))
}
