use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualar_core::bench::{run_in_process, voice_reference, WorkloadSpec};
use dualar_core::config::EngineConfig;
use dualar_core::mathcheck::{self, CheckConfig};
use dualar_core::rollout::{run_loop, LoopConfig, MockScorer};
use dualar_core::scheduler::ClockKind;
use dualar_core::wire::GenerateRequest;
use dualar_core::RewardWeights;
use dualar_server::Overrides;

#[derive(Parser)]
#[command(name = "dualar", version, about = "Dual-AR TTS serving engine on a mock model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Workload benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Group rollouts with mock reward scoring.
    Rollout {
        #[command(subcommand)]
        command: RolloutCommand,
    },
    /// Check the alignment math kernels against naive oracles.
    Mathcheck(MathcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Sim,
    Wall,
}

impl From<ClockArg> for ClockKind {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Sim => ClockKind::Simulated,
            ClockArg::Wall => ClockKind::Wall,
        }
    }
}

#[derive(Args)]
struct EngineArgs {
    /// Engine config file (.json or .toml).
    #[arg(long, env = "ENGINE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, env = "ENGINE_CLOCK")]
    clock: Option<ClockArg>,
    #[arg(long, env = "ENGINE_MAX_RUNNING")]
    max_running: Option<usize>,
    /// Prefill chunk size in key-units.
    #[arg(long, env = "ENGINE_PREFILL_CHUNK")]
    prefill_chunk: Option<usize>,
}

impl EngineArgs {
    fn load(&self) -> anyhow::Result<EngineConfig> {
        let base = match &self.config {
            Some(p) => EngineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => EngineConfig::default(),
        };
        Overrides { clock: self.clock.map(Into::into), max_running: self.max_running, prefill_chunk: self.prefill_chunk }
            .apply(base)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "ENGINE_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a workload and write report.csv and report.json.
    Run(BenchRunArgs),
}

#[derive(Args)]
struct BenchRunArgs {
    /// Workload spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Drive a running server instead of an in-process engine.
    #[arg(long)]
    url: Option<String>,
    /// Speed-up applied to Poisson arrival times when driving a server.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Subcommand)]
enum RolloutCommand {
    /// Run a seeded rollout loop and write a JSON report.
    Run(RolloutRunArgs),
}

#[derive(Args)]
struct RolloutRunArgs {
    /// Prompt file: one rich transcript per line, or JSON generate
    /// request(s).
    #[arg(long)]
    prompt: PathBuf,
    /// Group size.
    #[arg(long = "G", default_value_t = 8)]
    group: usize,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reward weights as stt,pref,sim.
    #[arg(long, default_value = "0.4,0.3,0.3")]
    weights: String,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct MathcheckArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("ENGINE_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve(a) => serve(a),
        Command::Bench { command: BenchCommand::Run(a) } => bench(a),
        Command::Rollout { command: RolloutCommand::Run(a) } => rollout(a),
        Command::Mathcheck(a) => {
            let report = mathcheck::run(&CheckConfig { seed: a.seed, cases: a.cases, ..CheckConfig::default() });
            print!("{}", report.render());
            if !report.all_passed() {
                bail!("mathcheck failed");
            }
            Ok(())
        }
    }
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let cfg = a.engine.load()?;
    runtime()?.block_on(async move {
        let server = dualar_server::spawn(cfg, &a.listen).await?;
        tracing::info!(addr = %server.addr, "listening");
        tokio::signal::ctrl_c().await?;
        Ok(())
    })
}

fn bench(a: BenchRunArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = WorkloadSpec::from_json(&text)?;
    let cfg = a.engine.load()?;
    let report = match &a.url {
        None => run_in_process(&spec, cfg)?,
        Some(url) => runtime()?.block_on(dualar_server::client::run_http(&spec, url, &cfg.codebook, a.time_scale))?,
    };
    report.write_to(&a.out)?;
    let s = &report.summary;
    println!(
        "requests {} completed {} failed {} hit_rate {} ttfa_p50_ms {} rtf_mean {} tokens_per_s {}",
        s.requests,
        s.completed,
        s.failed,
        fmt_opt(s.hit_rate),
        fmt_opt(s.ttfa_p50_ms),
        fmt_opt(s.rtf_mean),
        fmt_opt(s.tokens_per_s)
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn parse_weights(s: &str) -> anyhow::Result<RewardWeights> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
    let [stt, pref, sim] = parts[..] else { bail!("--weights needs three comma-separated numbers") };
    let w = RewardWeights { stt, pref, sim };
    w.validate()?;
    Ok(w)
}

/// Plain lines get the default voice: a reference clip and speaker tag.
fn load_prompts(path: &Path, cfg: &EngineConfig, seed: u64) -> anyhow::Result<Vec<GenerateRequest>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        return Ok(vec![serde_json::from_str(trimmed)?]);
    }
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    let reference = voice_reference(seed, 0, 189, &cfg.codebook);
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut r = GenerateRequest::new(l);
            r.system.text = "<|speaker:0|>".into();
            r.system.reference_frames = reference.clone();
            r
        })
        .collect())
}

fn rollout(a: RolloutRunArgs) -> anyhow::Result<()> {
    let cfg = a.engine.load()?;
    let prompts = load_prompts(&a.prompt, &cfg, a.seed)?;
    if prompts.is_empty() {
        bail!("{} holds no prompts", a.prompt.display());
    }
    let lc = LoopConfig {
        steps: a.steps,
        group_size: a.group,
        workers: a.workers,
        seed: a.seed,
        weights: parse_weights(&a.weights)?,
        ..LoopConfig::default()
    };
    let report = run_loop(&lc, cfg, &prompts, Arc::new(MockScorer::default()))?;
    std::fs::write(&a.out, report.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("mean fused reward per step:");
    print!("{}", report.render_series(10));
    println!(
        "cache hits {} misses {} spot checks {} mismatches {}",
        report.cache.hits, report.cache.misses, report.cache.spot_checks, report.cache.spot_mismatches
    );
    println!("wrote {}", a.out.display());
    Ok(())
}
