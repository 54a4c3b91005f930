//! HTTP front-end for the dual-AR engine plus the command-line plumbing
//! shared by the `dualar` binary and the integration tests.

pub mod client;
pub mod http;
pub mod runtime;

use std::net::SocketAddr;

use dualar_core::config::EngineConfig;
use dualar_core::scheduler::ClockKind;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use http::{router, AppState};
pub use runtime::{EngineHandle, EngineRuntime, RuntimeError};

/// Command-line and environment overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub clock: Option<ClockKind>,
    pub max_running: Option<usize>,
    pub prefill_chunk: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: EngineConfig) -> anyhow::Result<EngineConfig> {
        if let Some(c) = self.clock {
            cfg.scheduler.clock = c;
        }
        if let Some(n) = self.max_running {
            cfg.scheduler.max_running = n;
        }
        if let Some(n) = self.prefill_chunk {
            cfg.scheduler.prefill_chunk_units = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A server bound to a local port, running on the current tokio runtime.
pub struct RunningServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Starts the engine thread and serves on `listen` in the background.
pub async fn spawn(cfg: EngineConfig, listen: &str) -> anyhow::Result<RunningServer> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let codebook = cfg.codebook.clone();
    let rt = EngineRuntime::start(cfg)?;
    let app = router(AppState { engine: rt.handle(), codebook });
    let task = tokio::spawn(async move {
        let _rt = rt;
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(RunningServer { addr, task })
}
