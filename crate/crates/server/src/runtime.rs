//! The engine runs on its own OS thread. Connections talk to it through a
//! command queue and get back a per-request event channel.

use std::collections::HashMap;
use std::thread::JoinHandle;

use dualar_core::config::EngineConfig;
use dualar_core::pager::RequestId;
use dualar_core::scheduler::{Engine, Request, StatsSnapshot, SubmitError};
use dualar_core::wire::StreamEvent;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("engine queue full: {0}")]
    Backpressure(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("engine failure: {0}")]
    Fatal(String),
}

enum Command {
    Submit {
        request: Request,
        reply: oneshot::Sender<Result<mpsc::UnboundedReceiver<StreamEvent>, RuntimeError>>,
    },
    Stats {
        reply: oneshot::Sender<Result<StatsSnapshot, RuntimeError>>,
    },
}

/// Cloneable handle to the engine thread.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::UnboundedSender<Command>,
}

/// Owns the engine thread; dropping every handle stops it.
pub struct EngineRuntime {
    handle: EngineHandle,
    thread: Option<JoinHandle<()>>,
}

impl EngineRuntime {
    pub fn start(cfg: EngineConfig) -> Result<Self, RuntimeError> {
        let engine = Engine::new(cfg).map_err(|e| RuntimeError::Fatal(e.to_string()))?;
        let (tx, rx) = mpsc::unbounded_channel();
        let thread = std::thread::Builder::new()
            .name("engine".into())
            .spawn(move || run(engine, rx))
            .map_err(|e| RuntimeError::Fatal(e.to_string()))?;
        Ok(Self { handle: EngineHandle { tx }, thread: Some(thread) })
    }

    pub fn handle(&self) -> EngineHandle {
        self.handle.clone()
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }
}

impl EngineHandle {
    pub async fn submit(&self, request: Request) -> Result<mpsc::UnboundedReceiver<StreamEvent>, RuntimeError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Submit { request, reply })
            .map_err(|_| RuntimeError::Fatal("engine thread stopped".into()))?;
        rx.await.map_err(|_| RuntimeError::Fatal("engine thread stopped".into()))?
    }

    pub async fn stats(&self) -> Result<StatsSnapshot, RuntimeError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Stats { reply })
            .map_err(|_| RuntimeError::Fatal("engine thread stopped".into()))?;
        rx.await.map_err(|_| RuntimeError::Fatal("engine thread stopped".into()))?
    }
}

struct Loop {
    engine: Engine,
    streams: HashMap<RequestId, mpsc::UnboundedSender<StreamEvent>>,
    fatal: Option<String>,
}

impl Loop {
    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit { request, reply } => {
                let out = match &self.fatal {
                    Some(msg) => Err(RuntimeError::Fatal(msg.clone())),
                    None => match self.engine.submit(request) {
                        Ok(ticket) => {
                            let (tx, rx) = mpsc::unbounded_channel();
                            self.streams.insert(ticket.id, tx);
                            Ok(rx)
                        }
                        Err(SubmitError::Backpressure(n)) => {
                            Err(RuntimeError::Backpressure(format!("{n} requests waiting")))
                        }
                        Err(SubmitError::Invalid(m)) => Err(RuntimeError::Invalid(m)),
                    },
                };
                let _ = reply.send(out);
            }
            Command::Stats { reply } => {
                let _ = reply.send(Ok(self.engine.stats()));
            }
        }
    }

    fn step(&mut self) {
        match self.engine.step() {
            Ok(events) => {
                for ev in &events {
                    let id = ev.request();
                    let Some(wire) = StreamEvent::from_engine(ev) else { continue };
                    let terminal = wire.is_terminal();
                    if let Some(tx) = self.streams.get(&id) {
                        // A closed receiver means the client went away; the
                        // request still runs to completion.
                        let _ = tx.send(wire);
                    }
                    if terminal {
                        self.streams.remove(&id);
                    }
                }
            }
            Err(e) => {
                let msg = e.to_string();
                tracing::error!(error = %msg, "engine failed");
                for (_, tx) in self.streams.drain() {
                    let _ = tx.send(StreamEvent::Error { message: format!("engine failure: {msg}") });
                }
                self.fatal = Some(msg);
            }
        }
    }
}

fn run(engine: Engine, mut rx: mpsc::UnboundedReceiver<Command>) {
    let mut lp = Loop { engine, streams: HashMap::new(), fatal: None };
    loop {
        if lp.engine.is_idle() || lp.fatal.is_some() {
            match rx.blocking_recv() {
                Some(cmd) => lp.handle(cmd),
                None => return,
            }
        }
        while let Ok(cmd) = rx.try_recv() {
            lp.handle(cmd);
        }
        if !lp.engine.is_idle() && lp.fatal.is_none() {
            lp.step();
        }
    }
}
