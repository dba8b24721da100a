use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use notelab::bench::{emit_report, format_table, load_report, run_scenario, BenchReport, Protocol, ScenarioConfig, Scope};
use notelab::connector::{CommitLog, LogConfig};
use notelab::session::{self, DownOutcome};
use notelab::topology::{self, Running, TopologyConfig};
use notelab_core::link::DelayModel;
use notelab_core::SizeClass;

#[derive(Parser)]
#[command(name = "notelab", version, about = "IoT-edge-cloud lab testbed on one host")]
struct Cli {
    /// State directory for logs, snapshots and the runtime file
    /// [env: NOTELAB_DATA_DIR, default: ./notelab-data].
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a topology file and print it with defaults filled in.
    Validate { config: PathBuf },
    /// Launch a topology and run it in the foreground until `down` or Ctrl-C.
    Up {
        config: PathBuf,
        /// Bind every listener to an ephemeral port instead.
        #[arg(long)]
        ephemeral_ports: bool,
    },
    /// Stop the running topology.
    Down,
    /// Print per-component health and counters as JSON.
    Status,
    /// Measure latency through one protocol and write report files.
    Bench(BenchArgs),
    /// Print the summary table of an earlier bench report.
    Report {
        /// `report.json` or the directory holding it.
        path: PathBuf,
        /// Also re-emit the report files into this directory.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Recover a connector log and print its per-topic offsets as JSON.
    Offsets {
        /// Log directory [default: <data dir>/connector].
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Mqtt,
    Coap,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Edge,
    EndToEnd,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Payload sizes: 10, 100, 1024 or 10B, 100B, 1KB.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "10,100,1024")]
    sizes: Vec<SizeClass>,
    #[arg(long, value_enum, default_value = "edge")]
    scope: ScopeArg,
    /// Measured messages per size class.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pause between probes in milliseconds.
    #[arg(long)]
    interval_ms: Option<u64>,
    /// Injected one-way delay on the publisher link.
    #[arg(long, default_value_t = 0.0)]
    fixed_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter_ms: f64,
    /// Datagram loss probability (CoAP only).
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    /// Straggler wait after the last probe.
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Take n, warmup, seed, sizes and interval defaults from this
    /// topology's scenario section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Launch a transient topology instead of using the running one.
    #[arg(long)]
    self_contained: bool,
    /// Report directory [default: <data dir>/reports/<protocol>-<scope>].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<SizeClass, String> {
    if let Some(c) = SizeClass::from_label(s) {
        return Ok(c);
    }
    let n: usize = s.parse().map_err(|_| format!("unknown size {s:?}"))?;
    SizeClass::ALL.into_iter().find(|c| c.target_len() == n).ok_or_else(|| format!("no size class of {n} bytes"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let dir = cli.data_dir.clone().unwrap_or_else(session::data_dir);
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(run(cli.command, &dir)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn out(text: &str) {
    use std::io::Write;
    let mut o = std::io::stdout().lock();
    let _ = writeln!(o, "{text}").and_then(|_| o.flush());
}

async fn run(command: Command, dir: &Path) -> anyhow::Result<()> {
    match command {
        Command::Validate { config } => {
            let cfg = topology::validate_file(&config)?;
            out(&cfg.to_pretty_json());
        }
        Command::Up { config, ephemeral_ports } => {
            let mut cfg = topology::validate_file(&config)?;
            if ephemeral_ports {
                cfg = cfg.with_ephemeral_ports();
            }
            session::serve(cfg, dir).await?;
        }
        Command::Down => match session::down(dir).await? {
            DownOutcome::Stopped => eprintln!("stopped"),
            DownOutcome::NotRunning => eprintln!("nothing is running"),
        },
        Command::Status => {
            let st = session::status(dir).await?;
            out(&serde_json::to_string_pretty(&st)?);
            if !st.all_healthy() {
                anyhow::bail!("some components are unhealthy");
            }
        }
        Command::Bench(args) => bench(args, dir).await?,
        Command::Report { path, emit } => {
            let file = if path.is_dir() { path.join("report.json") } else { path };
            let report = load_report(&file)?;
            out(format_table(&report).trim_end());
            if let Some(dest) = emit {
                emit_report(&report, &dest)?;
            }
        }
        Command::Offsets { log_dir } => {
            let log_dir = log_dir.unwrap_or_else(|| dir.join(topology::DEFAULT_CONNECTOR_ID));
            if !log_dir.is_dir() {
                anyhow::bail!("no connector log at {}", log_dir.display());
            }
            let log = CommitLog::open(&log_dir, LogConfig::default())?;
            out(&serde_json::to_string_pretty(&log.offsets())?);
        }
    }
    Ok(())
}

async fn bench(args: BenchArgs, dir: &Path) -> anyhow::Result<()> {
    let protocol = match args.protocol {
        ProtocolArg::Mqtt => Protocol::Mqtt,
        ProtocolArg::Coap => Protocol::Coap,
        ProtocolArg::Http => Protocol::Http,
    };
    let scope = match args.scope {
        ScopeArg::Edge => Scope::Edge,
        ScopeArg::EndToEnd => Scope::EndToEnd,
    };
    let mut cfg = ScenarioConfig::new(protocol, scope);
    cfg.size_classes = args.sizes;
    if let Some(path) = &args.config {
        let topo: TopologyConfig = topology::validate_file(path)?;
        if let Some(s) = topo.scenario {
            cfg.n_messages = s.n_messages.unwrap_or(cfg.n_messages);
            cfg.warmup = s.warmup.unwrap_or(cfg.warmup);
            cfg.seed = s.seed.unwrap_or(cfg.seed);
            cfg.interval_ms = s.interval_ms.unwrap_or(cfg.interval_ms);
            if let Some(sizes) = s.size_classes {
                cfg.size_classes = sizes;
            }
        }
    }
    cfg.n_messages = args.n.unwrap_or(cfg.n_messages);
    cfg.warmup = args.warmup.unwrap_or(cfg.warmup);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.interval_ms = args.interval_ms.unwrap_or(cfg.interval_ms);
    cfg.timeout_ms = args.timeout_ms;
    cfg.delay_model = DelayModel { fixed_ms: args.fixed_ms, jitter_ms: args.jitter_ms, drop_prob: args.drop, seed: 0 };
    cfg.delay_model.validate()?;

    let report: BenchReport = if args.self_contained {
        let bed_dir = dir.join(format!("testbed-{}", std::process::id()));
        let mut run = Running::up(topology::self_contained(), &bed_dir).await?;
        let res = match run.bench_target(protocol) {
            Some(target) => run_scenario(&cfg, &target).await.map_err(anyhow::Error::from),
            None => Err(anyhow::anyhow!("no {} proxy", protocol.label())),
        };
        run.down().await;
        let _ = std::fs::remove_dir_all(&bed_dir);
        res?
    } else {
        session::bench(dir, &cfg).await.map_err(|e| match e {
            session::SessionError::NotUp(d) => {
                anyhow::anyhow!("no topology is up in {}; start one with `up` or pass --self-contained", d.display())
            }
            e => e.into(),
        })?
    };
    let out_dir = args.out.unwrap_or_else(|| dir.join("reports").join(format!("{}-{}", protocol.label(), scope.label())));
    let files = emit_report(&report, &out_dir)?;
    out(format_table(&report).trim_end());
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}
