//! `cotransport` command-line entry point.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage or configuration error.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{out_root, ConfigError, RunConfig};
use cotransport::cognition::{plan_with_external, ExternalPlanner, PlanSource, SubprocessPlanner};
use cotransport::env::TransportEnv;
use cotransport::eval::{ablate, load_actors, render_suite, run_episode, run_suite};
use cotransport::geometry::Pose2;
use cotransport::grid::rasterize;
use cotransport::marl::{grad_oracle, Actor, RunDir, Trainer};
use cotransport::neural::ActMode;
use cotransport::replay::{verify_replay, Replay, ReplayWriter};
use cotransport::scenario::load_scenario;
use cotransport_hitl::{Server, ServerConfig};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;
use thiserror::Error;

/// Largest acceptable relative error of the gradient check.
const GRAD_TOL: f64 = 1e-4;
/// Largest acceptable joint-critic target drift.
const PROP1_TOL: f64 = 1e-12;

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Domain(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! domain {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}
domain!(
    cotransport::marl::MarlError,
    cotransport::eval::EvalError,
    cotransport::replay::ReplayError,
    cotransport::cognition::CognitionError,
    cotransport::scenario::ScenarioError,
    cotransport::env::EnvError,
    cotransport_hitl::HitlError,
    serde_json::Error
);

#[derive(Parser)]
#[command(name = "cotransport", version, about = "Cooperative object transport: train, evaluate, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Dotted override, e.g. `--set train.lr=3e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory; defaults to a subdirectory of $COTRANSPORT_OUT or ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train both agents with the joint-critic clipped surrogate.
    Train(TrainArgs),
    /// Train the robot with a scripted partner.
    TrainSingle(TrainArgs),
    /// Evaluate checkpoints over the scenario matrix.
    Eval(EvalArgs),
    /// Compare full, no-skill and no-cognition variants on one scenario.
    Ablate(AblateArgs),
    /// Record and/or verify an episode replay.
    Replay(ReplayArgs),
    /// Print the anchor sequence for a scenario's start state.
    Plan(PlanArgs),
    /// Finite-difference check of the surrogate and critic gradients.
    DiagGrad(SeedArgs),
    /// Target drift of joint vs marginal critics under partner drift.
    DiagProp1(SeedArgs),
    /// Run the human-in-the-loop session server.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a run directory from its last checkpoint.
    #[arg(long, conflicts_with_all = ["scenario", "seed"])]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Scenario id; repeatable. Defaults to the full matrix.
    #[arg(long)]
    scenario: Vec<String>,
    /// Checkpoint directory; omit for the scripted baseline.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Number of seed groups.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    no_cognition_ckpt: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReplayArgs {
    /// Replay file to verify (and to write with --record).
    file: Option<PathBuf>,
    /// Record a fresh episode first.
    #[arg(long)]
    record: bool,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    scenario: Option<String>,
    /// External planner command; the request JSON is written to its stdin.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    planner: Option<Vec<String>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[command(flatten)]
    common: Common,
}

fn set<T: Serialize>(out: &mut Vec<String>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", serde_json::to_string(v).expect("flag serializes")));
    }
}

/// Subcommand name, shared options and flag-derived overrides. Flags apply
/// after `--set`, so an explicit flag always wins.
fn plan_overrides(cmd: &Command) -> (&'static str, &Common, Vec<String>) {
    let mut o = Vec::new();
    match cmd {
        Command::Train(a) | Command::TrainSingle(a) => {
            set(&mut o, "train.scenario", &a.scenario);
            set(&mut o, "train.seed", &a.seed);
            let name = if matches!(cmd, Command::Train(_)) { "train" } else { "train-single" };
            (name, &a.common, o)
        }
        Command::Eval(a) => {
            if !a.scenario.is_empty() {
                set(&mut o, "eval.scenarios", &Some(&a.scenario));
            }
            set(&mut o, "eval.ckpt", &a.ckpt);
            set(&mut o, "eval.n_seeds", &a.seeds);
            set(&mut o, "eval.episodes_per_seed", &a.episodes);
            ("eval", &a.common, o)
        }
        Command::Ablate(a) => {
            set(&mut o, "ablate.scenario", &a.scenario);
            set(&mut o, "ablate.ckpt", &a.ckpt);
            set(&mut o, "ablate.no_cognition_ckpt", &a.no_cognition_ckpt);
            set(&mut o, "eval.n_seeds", &a.seeds);
            set(&mut o, "eval.episodes_per_seed", &a.episodes);
            ("ablate", &a.common, o)
        }
        Command::Replay(a) => {
            set(&mut o, "replay.file", &a.file);
            if a.record {
                o.push("replay.record=true".into());
            }
            set(&mut o, "replay.scenario", &a.scenario);
            set(&mut o, "replay.ckpt", &a.ckpt);
            set(&mut o, "replay.seed", &a.seed);
            ("replay", &a.common, o)
        }
        Command::Plan(a) => {
            set(&mut o, "plan.scenario", &a.scenario);
            set(&mut o, "plan.planner", &a.planner);
            ("plan", &a.common, o)
        }
        Command::DiagGrad(a) => {
            set(&mut o, "diag_grad.seed", &a.seed);
            ("diag-grad", &a.common, o)
        }
        Command::DiagProp1(a) => {
            set(&mut o, "diag_prop1.seed", &a.seed);
            ("diag-prop1", &a.common, o)
        }
        Command::Serve(a) => {
            set(&mut o, "serve.scenario", &a.scenario);
            set(&mut o, "serve.ckpt", &a.ckpt);
            set(&mut o, "serve.addr", &a.addr);
            ("serve", &a.common, o)
        }
    }
}

fn default_out(cfg: &RunConfig) -> PathBuf {
    let leaf = match cfg.command.as_str() {
        "train" | "train-single" => format!("{}-{}-s{}", cfg.command, cfg.train.scenario, cfg.train.seed),
        "eval" => format!("eval-s{}", cfg.eval.cfg.base_seed),
        "ablate" => format!("ablate-{}-s{}", cfg.ablate.scenario, cfg.eval.cfg.base_seed),
        "replay" => format!("replay-{}-s{}", cfg.replay.scenario, cfg.replay.seed),
        "plan" => format!("plan-{}", cfg.plan.scenario),
        "diag-grad" => format!("diag-grad-s{}", cfg.diag_grad.seed),
        "diag-prop1" => format!("diag-prop1-s{}", cfg.diag_prop1.seed),
        "serve" => format!("serve-{}", cfg.serve.scenario),
        other => other.to_string(),
    };
    out_root().join(leaf)
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn actors_from(ckpt: &Option<PathBuf>) -> Result<[Actor; 2], CliError> {
    match ckpt {
        Some(dir) => Ok(load_actors(dir)?),
        None => Ok([Actor::Scripted, Actor::Scripted]),
    }
}

/// Latest trainer state in a run directory: `final/` if present, else the
/// newest periodic checkpoint.
fn latest_state(run: &Path) -> Result<PathBuf, CliError> {
    let fin = run.join("final");
    if fin.join("state.json").exists() {
        return Ok(fin);
    }
    let mut ckpts: Vec<PathBuf> = fs::read_dir(run.join("ckpt"))
        .map_err(|e| CliError::Domain(format!("no checkpoint in {}: {e}", run.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("state.json").exists())
        .collect();
    ckpts.sort();
    ckpts
        .pop()
        .ok_or_else(|| CliError::Domain(format!("no checkpoint in {}", run.display())))
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let mut trainer = match resume {
        Some(run) => Trainer::resume(&latest_state(run)?)?,
        None => {
            if out.join("metrics.jsonl").exists() {
                return Err(CliError::Domain(format!(
                    "{} already holds a run; use --resume or another --out",
                    out.display()
                )));
            }
            let mut tc = cfg.train.clone();
            if cfg.command == "train-single" {
                tc.scripted_partner = true;
            }
            Trainer::new(tc)?
        }
    };
    let run = RunDir::create(out)?;
    let log = trainer.run(Some(&run), |_, _| STOP.load(Ordering::Relaxed))?;
    let last = log.last();
    let summary = serde_json::json!({
        "updates": last.map(|m| m.update),
        "steps": last.map(|m| m.step),
        "final_sr": last.and_then(|m| m.sr),
        "final_return": last.and_then(|m| m.return_mean),
        "interrupted": STOP.load(Ordering::Relaxed),
        "final_dir": run.final_dir(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    emit(&serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let actors = actors_from(&cfg.eval.ckpt)?;
    let report = run_suite(&cfg.eval.scenarios, &actors, &cfg.eval.cfg)?;
    write_json(&out.join("report.json"), &report)?;
    let table = render_suite(&report);
    fs::write(out.join("report.txt"), &table)?;
    emit(table.trim_end())?;
    Ok(())
}

fn run_ablation(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let full = actors_from(&cfg.ablate.ckpt)?;
    let no_cog = match &cfg.ablate.no_cognition_ckpt {
        Some(d) => Some(load_actors(d)?),
        None => None,
    };
    let report = ablate(&cfg.ablate.scenario, &cfg.ablate.variants, &full, no_cog.as_ref(), &cfg.eval.cfg)?;
    write_json(&out.join("ablation.json"), &report)?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn replay(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let r = &cfg.replay;
    let file = r.file.clone().unwrap_or_else(|| out.join("episode.jsonl"));
    if r.record {
        let mut env = TransportEnv::new(load_scenario(&r.scenario)?, cfg.eval.cfg.env.clone())?;
        let mut w = ReplayWriter::new();
        let m = run_episode(&mut env, &actors_from(&r.ckpt)?, r.seed, ActMode::Mean, Some(&mut w))?;
        w.save(&file)?;
        write_json(&out.join("metrics.json"), &m)?;
    } else if r.file.is_none() {
        return Err(ConfigError::Invalid("replay needs a file or --record".into()).into());
    }
    let check = verify_replay(&Replay::load(&file)?)?;
    write_json(&out.join("check.json"), &check)?;
    emit(&serde_json::to_string_pretty(&check)?)?;
    if check.is_exact() {
        Ok(())
    } else {
        Err(CliError::Domain(format!("replay {} is not bit-exact", file.display())))
    }
}

fn plan(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let p = &cfg.plan;
    let sc = load_scenario(&p.scenario)?;
    let grid = rasterize(&sc, p.cognition.grid_cells);
    let start = sc.start_pose;
    let views = [0, 1].map(|i| {
        let st = sc.stations[i];
        let q = start.apply(st.offset);
        Pose2::new(q.x, q.y, start.heading + st.yaw)
    });
    let external = match &p.planner {
        Some(argv) if !argv.is_empty() => {
            let mut sp = SubprocessPlanner::new(argv[0].clone(), argv[1..].to_vec());
            sp.timeout = Duration::from_secs_f64(p.planner_timeout_s);
            Some(sp)
        }
        _ => None,
    };
    let (seq, source) = plan_with_external(
        &sc,
        &grid,
        start.position(),
        views,
        &p.cognition,
        external.as_ref().map(|s| s as &dyn ExternalPlanner),
    )?;
    write_json(&out.join("anchors.json"), &seq)?;
    write_json(&out.join("source.json"), &source)?;
    if let PlanSource::Fallback { reason } = &source {
        eprintln!("warning: external planner rejected ({reason}); internal plan used");
    }
    emit(&serde_json::to_string_pretty(&seq)?)?;
    Ok(())
}

fn diag_grad(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let report = grad_oracle(&cfg.diag_grad)?;
    write_json(&out.join("report.json"), &report)?;
    emit(&serde_json::to_string_pretty(&report)?)?;
    if report.max_rel_err < GRAD_TOL {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "max relative gradient error {:.3e} exceeds {GRAD_TOL:e}",
            report.max_rel_err
        )))
    }
}

fn diag_prop1(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let report = cfg.diag_prop1.run();
    write_json(&out.join("report.json"), &report)?;
    let summary = serde_json::json!({
        "steps": report.steps.len(),
        "max_joint_drift": report.max_joint_drift,
        "max_marginal_drift": report.max_marginal_drift,
    });
    emit(&serde_json::to_string_pretty(&summary)?)?;
    if report.max_joint_drift <= PROP1_TOL {
        Ok(())
    } else {
        Err(CliError::Domain(format!("joint critic target drifted by {:e}", report.max_joint_drift)))
    }
}

fn serve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = &cfg.serve;
    let [robot, _] = actors_from(&s.ckpt)?;
    let server = Server::bind(
        load_scenario(&s.scenario)?,
        cfg.eval.cfg.env.clone(),
        robot,
        ServerConfig {
            addr: s.addr.clone(),
            session: s.session.clone(),
            log_dir: Some(out.join("logs")),
        },
    )?;
    eprintln!("listening on {}", server.local_addr()?);
    server.serve(&STOP, None)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, flags) = plan_overrides(&cli.command);
    let mut overrides = common.set.clone();
    overrides.extend(flags);
    if let Some(o) = &common.out {
        overrides.push(format!("out={}", serde_json::to_string(o)?));
    }
    let mut cfg = RunConfig::resolve(name, common.config.as_deref(), &overrides)?;
    if common.print_config {
        emit(&serde_json::to_string_pretty(&cfg)?)?;
        return Ok(());
    }
    let resume = match &cli.command {
        Command::Train(a) | Command::TrainSingle(a) => a.resume.clone(),
        _ => None,
    };
    let out = match (&cfg.out, &resume) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.clone(),
        (None, None) => default_out(&cfg),
    };
    cfg.out = Some(out.clone());
    fs::create_dir_all(&out)?;
    if resume.is_none() {
        write_json(&out.join("config.json"), &cfg)?;
    }
    if let Err(e) = ctrlc::set_handler(|| STOP.store(true, Ordering::Relaxed)) {
        log::warn!("signal handler not installed: {e}");
    }
    match cfg.command.as_str() {
        "train" | "train-single" => train(&cfg, &out, resume.as_deref()),
        "eval" => eval(&cfg, &out),
        "ablate" => run_ablation(&cfg, &out),
        "replay" => replay(&cfg, &out),
        "plan" => plan(&cfg, &out),
        "diag-grad" => diag_grad(&cfg, &out),
        "diag-prop1" => diag_prop1(&cfg, &out),
        "serve" => serve(&cfg, &out),
        other => unreachable!("unhandled command {other}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = plan_overrides(&cli.command).1.verbose;
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
