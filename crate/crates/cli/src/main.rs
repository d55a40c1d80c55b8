//! `teleop`: run, split, replay and validate teleoperation sessions.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use teleop_core::metrics::SessionReport;
use teleop_core::session::{
    replay, run_session, start_roles, MasterKind, Mode, Role, SessionConfig,
};

#[derive(Parser)]
#[command(
    name = "teleop",
    version,
    about = "Haptic/video teleoperation link simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a deterministic virtual-time session and print its report.
    Run(RunArgs),
    /// Run the operator role in wall time.
    Operator(RoleArgs),
    /// Run the teleoperator role in wall time.
    Teleoperator(RoleArgs),
    /// Recompute a report from dumped traces.
    Replay(ReplayArgs),
    /// Check a config file and list every problem.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Common {
    /// Session config (JSON); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Session length, e.g. `10s`, `1500ms`, or plain seconds.
    #[arg(long, value_parser = parse_duration)]
    duration: Option<Duration>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write meta.json, stages.csv and tracking.csv into this directory.
    #[arg(long)]
    dump_traces: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RoleArgs {
    #[command(flatten)]
    common: Common,
    /// Console gateway port (operator side).
    #[arg(long)]
    gateway_port: Option<u16>,
    /// Take master input from the console instead of the scripted trajectory.
    #[arg(long)]
    live: bool,
    /// Also run the teleoperator in this process, over loopback.
    #[arg(long)]
    with_teleoperator: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace directories; several (one per role) are merged.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    if let Ok(secs) = s.parse::<f64>() {
        return Duration::try_from_secs_f64(secs).map_err(|e| e.to_string());
    }
    humantime::parse_duration(s).map_err(|e| e.to_string())
}

fn load(common: &Common) -> Result<SessionConfig> {
    let mut cfg = match &common.config {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = common.duration {
        cfg.duration_s = d.as_secs_f64();
    }
    Ok(cfg)
}

fn check(cfg: &SessionConfig) -> Result<()> {
    let issues = cfg.issues();
    if issues.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
    Err(anyhow!("invalid config:\n{}", lines.join("\n")))
}

fn emit(report: &SessionReport, path: Option<&Path>) -> Result<()> {
    let text = report.to_json();
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load(&args.common)?;
    cfg.mode = Mode::VirtualTime;
    cfg.role = Role::Both;
    check(&cfg)?;
    let out = run_session(&cfg, cfg.duration_us())?;
    if let Some(dir) = &args.common.dump_traces {
        out.traces
            .write_dir(dir)
            .with_context(|| format!("writing traces to {}", dir.display()))?;
    }
    emit(&out.report, args.common.report.as_deref())
}

fn role(args: RoleArgs, role: Role) -> Result<()> {
    let mut cfg = load(&args.common)?;
    cfg.mode = Mode::WallTime;
    cfg.role = if args.with_teleoperator {
        Role::Both
    } else {
        role
    };
    if args.gateway_port.is_some() {
        cfg.net.gateway_port = args.gateway_port;
    }
    if args.live {
        cfg.master.source = MasterKind::Live;
    }
    check(&cfg)?;

    let handle = start_roles(&cfg)?;
    if let Some(a) = handle.gateway_addr() {
        eprintln!("console gateway on ws://{a}");
    }
    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = interrupted.clone();
        ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
            .context("installing signal handler")?;
    }
    while !handle.is_finished() {
        if interrupted.load(Ordering::SeqCst) {
            handle.stop();
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let out = handle.wait()?;
    if let Some(dir) = &args.common.dump_traces {
        out.traces
            .write_dir(dir)
            .with_context(|| format!("writing traces to {}", dir.display()))?;
    }
    emit(&out.report, args.common.report.as_deref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Operator(a) => role(a, Role::Operator),
        Command::Teleoperator(a) => role(a, Role::Teleoperator),
        Command::Replay(a) => {
            let dirs: Vec<&Path> = a.traces.iter().map(PathBuf::as_path).collect();
            replay(&dirs)
                .map_err(anyhow::Error::from)
                .and_then(|r| emit(&r, a.report.as_deref()))
        }
        Command::Validate(a) => SessionConfig::load(&a.config)
            .map_err(anyhow::Error::from)
            .and_then(|c| check(&c))
            .map(|()| println!("{}: ok", a.config.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
