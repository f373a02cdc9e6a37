use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cityfabric::emulator::serve::Pacing;
use cityfabric::emulator::wire;
use cityfabric::emulator::StreamTrace;
use cityfabric::fl::{run_rounds, FlConfig, RoundRecord};
use cityfabric::forecast::ForecastModel;
use cityfabric::gateway::runner::{run_scenario, RunOptions};
use cityfabric::gateway::{api, ingest, pipeline, Gateway, GatewayOptions};
use cityfabric::scenario::{load_scenario, ModelKind, Scenario};
use cityfabric::scheduler::{default_fleet, sweep, write_sweep_csv, PlacementPolicy};

#[derive(Parser)]
#[command(name = "cityfabric", version, about = "Edge-cloud traffic analytics fabric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write its artifacts.
    Run(RunArgs),
    /// Scheduler tools.
    Sched {
        #[command(subcommand)]
        command: SchedCommand,
    },
    /// Federated learning simulation.
    Fl {
        #[command(subcommand)]
        command: FlCommand,
    },
    /// Print the detection events of one stream.
    Replay(ReplayArgs),
    /// Start the gateway API and keep it running.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ScenarioArg {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long, default_value = "neighborhood100")]
    scenario: String,
}

impl ScenarioArg {
    fn load(&self) -> Result<Scenario> {
        load_scenario(&self.scenario).with_context(|| format!("loading scenario {}", self.scenario))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ha,
    Seasonal,
    Gru,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Ha => ModelKind::HistoricalAverage,
            ModelArg::Seasonal => ModelKind::SeasonalNaive,
            ModelArg::Gru => ModelKind::GraphGruLite,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value = "fast")]
    mode: Pacing,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Shorten the trace to this many seconds.
    #[arg(long)]
    duration_s: Option<u64>,
    #[arg(long)]
    skip_fl: bool,
    #[arg(long)]
    skip_forecast: bool,
    /// Override the scenario's forecasting model.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Realtime mode: serve the API on this address during the run.
    #[arg(long)]
    listen: Option<SocketAddr>,
}

#[derive(Subcommand)]
enum SchedCommand {
    /// Sequential arrivals of equal streams; one CSV row per stream count.
    Sweep {
        /// Use this scenario's fleet instead of the default testbed.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, value_enum)]
        policy: Option<PlacementPolicy>,
        #[arg(long, default_value_t = 80)]
        streams: usize,
        #[arg(long, default_value_t = 25)]
        fps: u32,
        /// Output CSV; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FlCommand {
    /// Run federated rounds and write one JSON line per client and round.
    Run(FlArgs),
}

#[derive(Args)]
struct FlArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// JSON file with an fl section; overrides the scenario's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Use only the first N clients.
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Frames per stream; replaces the sampling window with duration / N.
    #[arg(long)]
    target_frames: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum WireFormat {
    Ndjson,
    Binary,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Stream name.
    #[arg(long)]
    stream: String,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long, value_enum, default_value = "ndjson")]
    format: WireFormat,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Also accept newline-delimited JSON summaries over TCP here.
    #[arg(long)]
    ingest_listen: Option<SocketAddr>,
    #[arg(long, value_enum, default_value = "realtime")]
    mode: Pacing,
    #[arg(long, default_value = "out/gateway-store")]
    store_dir: PathBuf,
    #[arg(long, value_enum, default_value = "ha")]
    model: ModelArg,
    /// Start every stream immediately.
    #[arg(long)]
    start_all: bool,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Sched { command: SchedCommand::Sweep { scenario, policy, streams, fps, out } } => {
            sched_sweep(scenario, policy, streams, fps, out)
        }
        Command::Fl { command: FlCommand::Run(a) } => fl_run(a),
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(a),
    }
}

fn run(a: RunArgs) -> Result<()> {
    let sc = Arc::new(a.scenario.load()?);
    let opts = RunOptions {
        mode: a.mode,
        out_dir: a.out_dir,
        skip_fl: a.skip_fl,
        skip_forecast: a.skip_forecast,
        duration_s: a.duration_s,
        api_addr: a.listen,
        model: a.model.map(Into::into),
    };
    let report = run_scenario(&sc, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sched_sweep(
    scenario: Option<String>,
    policy: Option<PlacementPolicy>,
    streams: usize,
    fps: u32,
    out: Option<PathBuf>,
) -> Result<()> {
    let fleet = match scenario {
        Some(s) => load_scenario(&s)?.fleet,
        None => default_fleet(),
    };
    let counts: Vec<usize> = (1..=streams).collect();
    let policies = match policy {
        Some(p) => vec![p],
        None => vec![PlacementPolicy::BestFit, PlacementPolicy::WorstFit],
    };
    let mut rows = Vec::new();
    for p in policies {
        rows.extend(sweep(&fleet, &counts, fps, p)?.into_iter().map(|(r, _)| r));
    }
    match out {
        Some(path) => write_sweep_csv(File::create(&path)?, &rows)?,
        None => write_sweep_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn fl_run(a: FlArgs) -> Result<()> {
    let mut cfg: FlConfig = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match a.scenario.load()?.config.fl {
            Some(fl) => fl,
            None => bail!("scenario {} has no fl section", a.scenario.scenario),
        },
    };
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(n) = a.clients {
        if n == 0 || n > cfg.clients.len() {
            bail!("--clients must be in 1..={}", cfg.clients.len());
        }
        cfg.clients.truncate(n);
    }
    if let Some(t) = a.tau {
        cfg.oracle.tau = t;
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    if let Some(f) = a.target_frames {
        cfg.sampling.target_frames = Some(f);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let path = a.out_dir.join("fl_rounds.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    let log = run_rounds(&cfg, Some(&mut w))?;
    w.flush()?;
    for r in &log.records {
        match r {
            RoundRecord::Client { round: 0, client_id, streams, frames, items, .. } => {
                println!("client {client_id}: {streams} streams, {frames} frames, {items} labeled items");
            }
            RoundRecord::Round { round, participants, total_samples, accuracy, .. } => {
                println!("round {round}: {participants} clients, {total_samples} samples, accuracy {accuracy:.4}");
            }
            _ => {}
        }
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let sc = a.scenario.load()?;
    let Some(id) = sc.stream_by_name(&a.stream) else { bail!("unknown stream {}", a.stream) };
    let duration = a.duration_s.unwrap_or(sc.config.duration_s as f64);
    let trace = StreamTrace::new(&sc.streams[id.index()], &sc.processes[id.index()], duration);
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let mut buf = Vec::new();
    for (e, _) in trace {
        match a.format {
            WireFormat::Ndjson => wire::write_ndjson(&mut w, &e)?,
            WireFormat::Binary => {
                buf.clear();
                wire::encode_event(&e, &mut buf);
                w.write_all(&buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let sc = Arc::new(a.scenario.load()?);
    let f = &sc.config.forecast;
    tracing::info!("fitting {:?} on {} minutes of synthetic history", ModelKind::from(a.model), f.train_minutes);
    let history = pipeline::synthetic_series(&sc, "history", f.train_minutes as usize);
    let (flows, _) = pipeline::edge_flows(&sc, &history)?;
    let thresholds = pipeline::thresholds(&sc, &flows)?;
    let (model, _) = pipeline::fit_model(&sc, a.model.into(), &history)?;
    let model: Arc<dyn ForecastModel> = Arc::from(model);

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let gw = Gateway::start(
            sc.clone(),
            GatewayOptions {
                pacing: a.mode,
                store_dir: a.store_dir,
                model: Some(model),
                thresholds,
                duration_s: None,
            },
        )?;
        let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
        if let Some(addr) = a.ingest_listen {
            let listener = tokio::net::TcpListener::bind(addr).await?;
            tracing::info!("ingest listening on {}", listener.local_addr()?);
            let cams: HashMap<_, _> = sc.streams.iter().map(|d| (d.name.clone(), d.stream_id)).collect();
            tokio::spawn(ingest::serve_ingest(listener, gw.store.clone(), cams, stop_rx.clone()));
        }
        if a.start_all {
            let r = gw.start_streams(gw.stream_names(), None).await?;
            tracing::info!("{} streams started, {} rejected", r.accepted.len(), r.rejected.len());
        }
        let listener = tokio::net::TcpListener::bind(a.listen).await?;
        tracing::info!("api listening on http://{}", listener.local_addr()?);
        axum::serve(listener, api::router(gw.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        let _ = stop_tx.send(true);
        gw.shutdown().await;
        Ok(())
    })
}
