//! `dodge`: train, evaluate and ablate dodgeball avoidance policies.
//!
//! Exit status: 0 on success, 1 on a configuration or usage error
//! (including unreadable input files), 2 on a runtime fault.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dodge_core::ablation::{self, ExperimentGrid};
use dodge_core::arena::ReplayWriter;
use dodge_core::config::RunConfig;
use dodge_core::policy::{self, ActorCritic, CheckpointMeta};
use dodge_core::ppo::{self, CURVE_HEADER};
use dodge_core::robot::{forward_kinematics, update_base_kinematics};
use dodge_core::sensors::{Geometry, Reduction, SignalFn};
use dodge_core::{Error, RobotState, Vec3};

/// Environment variable naming the default output root.
const OUT_ROOT_VAR: &str = "DODGE_OUT_ROOT";

#[derive(Parser)]
#[command(name = "dodge", version, about = "Whole-body ball dodging with distributed proximity sensors")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval(EvalArgs),
    /// Run a seeded experiment grid and aggregate it.
    Ablate(AblateArgs),
    /// Write sensor mount positions and normals (rest pose) as CSV.
    Sensors(SensorsArgs),
    /// Record one episode of a checkpoint as CSV.
    Replay(ReplayArgs),
}

/// Flags that override fields of the run configuration.
#[derive(Args, Default)]
struct Overrides {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<Geometry>,
    #[arg(long)]
    signal: Option<SignalFn>,
    #[arg(long)]
    reduction: Option<Reduction>,
    /// Maximum sensing range (m).
    #[arg(long)]
    range: Option<f64>,
    /// Number of parallel environments.
    #[arg(long)]
    envs: Option<usize>,
    /// Robot model file (TOML).
    #[arg(long)]
    robot: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training iterations (rollout + update).
    #[arg(long)]
    iters: Option<usize>,
    /// Output directory (default: $DODGE_OUT_ROOT/train-s<seed>, else runs/…).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this run configuration instead of the one stored with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid definition (TOML); the full default grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse records already present in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SensorsArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Error tagged with the exit status it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if error.is_config() || matches!(error, Error::Usage(_)) { 1 } else { 2 };
        Failure { code, error }
    }
}

/// Errors raised while reading inputs are configuration errors.
fn input<T>(r: dodge_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|error| Failure { code: 1, error })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().expect("thread pool is built once");
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Sensors(a) => sensors(a),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn default_out(name: &str) -> PathBuf {
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from("runs").join(name),
    }
}

fn resolve(o: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => input(RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.geometry {
        cfg.sensors.geometry = v;
    }
    if let Some(v) = o.signal {
        cfg.sensors.signal = v;
    }
    if let Some(v) = o.reduction {
        cfg.sensors.reduction = v;
    }
    if let Some(v) = o.range {
        cfg.sensors.range = v;
    }
    if let Some(v) = o.envs {
        cfg.ppo.num_envs = v;
    }
    if let Some(v) = &o.robot {
        cfg.robot = Some(v.clone());
    }
    input(cfg.validate())?;
    Ok(cfg)
}

fn echo(title: &str, body: &str) {
    print!("{}", echo_text(title, body));
}

fn echo_text(title: &str, body: &str) -> String {
    let mut s = format!("# {title}\n");
    for line in body.lines() {
        s.push_str(&format!("#   {line}\n"));
    }
    s
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::from(Error::io(path, e)))
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve(&a.overrides)?;
    if let Some(k) = a.iters {
        cfg.ppo.iterations = k;
    }
    let out = a.out.unwrap_or_else(|| default_out(&format!("train-s{}", a.seed)));
    echo(&format!("dodge train --seed {} --out {}", a.seed, out.display()), &cfg.to_toml());
    // build everything that can fail on bad input before starting work
    let (mut env, obs) = input(cfg.vec_env(a.seed))?;
    create_dir(&out)?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Failure::from(Error::io(&cfg_path, e)))?;

    let curve_path = out.join("curve.csv");
    let io = |e| Failure::from(Error::io(&curve_path, e));
    let mut curve = BufWriter::new(File::create(&curve_path).map_err(io)?);
    writeln!(curve, "{CURVE_HEADER}").map_err(io)?;
    curve.flush().map_err(io)?;
    let mut write_err = None;
    let outcome = ppo::train(&mut env, obs, &cfg.ppo, a.seed, |row, _| {
        log::info!(
            "iter {:>4}  ep_len {:>6.1}  reward {:>7.4}  success {:.2}  contact {:.2}  fall {:.2}  kl {:.4}",
            row.iteration,
            row.mean_ep_len,
            row.mean_reward,
            row.success_rate,
            row.contact_rate,
            row.fall_rate,
            row.stats.approx_kl
        );
        if write_err.is_none() {
            if let Err(e) = writeln!(curve, "{}", row.csv()).and_then(|_| curve.flush()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io(e));
    }
    let ckpt = out.join("policy.bin");
    outcome.policy.write_checkpoint(&ckpt, cfg.to_json())?;
    println!("checkpoint: {}", ckpt.display());
    println!("curve: {}", curve_path.display());
    Ok(())
}

/// Load a checkpoint and the configuration it should run under.
fn load_policy(checkpoint: &Path, config: &Option<PathBuf>) -> Result<(ActorCritic, RunConfig), Failure> {
    let policy = input(ActorCritic::read_checkpoint(checkpoint))?;
    let cfg = match config {
        Some(p) => input(RunConfig::load(p))?,
        None => {
            let side = policy::sidecar_path(checkpoint);
            let text = input(std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e)))?;
            let meta: CheckpointMeta = input(
                serde_json::from_str(&text).map_err(|e| Error::Parse { path: side.clone(), message: e.to_string() }),
            )?;
            input(
                serde_json::from_value(meta.config)
                    .map_err(|e| Error::Parse { path: side.clone(), message: format!("run configuration: {e}") }),
            )?
        }
    };
    input(cfg.validate())?;
    Ok((policy, cfg))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (policy, cfg) = load_policy(&a.checkpoint, &a.config)?;
    echo(
        &format!("dodge eval --checkpoint {} --episodes {} --seed {}", a.checkpoint.display(), a.episodes, a.seed),
        &cfg.to_toml(),
    );
    let arena = input(cfg.arena())?;
    let s = ppo::evaluate(&arena, &policy, a.episodes, a.seed)?;
    println!("episodes: {}", s.episodes);
    println!("mean episode length: {:.2} steps ({:.3} s)", s.mean_ep_len, s.mean_ep_len * cfg.env.dt_control);
    println!("success rate: {:.4}", s.success_rate);
    println!("contact rate: {:.4}", s.contact_rate);
    println!("fall rate: {:.4}", s.fall_rate);
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let grid = match &a.grid {
        Some(p) => input(ExperimentGrid::load(p))?,
        None => ExperimentGrid::full_default(),
    };
    input(grid.validate())?;
    let out = a.out.unwrap_or_else(|| default_out("ablation"));
    echo(&format!("dodge ablate --out {}{}", out.display(), if a.resume { " --resume" } else { "" }), &grid.to_toml());
    let total = grid.cells.len() * grid.seeds;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let records = ablation::run_grid(&grid, &out, a.resume, &|r, cached| {
        let k = done.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1;
        let status = match &r.error {
            Some(e) => format!("FAILED: {e}"),
            None => format!("final ep_len {:.1}", r.final_window_metric()),
        };
        log::info!(
            "[{k}/{total}] {} seed {} {}{}",
            r.cell.id(),
            r.seed,
            status,
            if cached { " (resumed)" } else { "" }
        );
    })?;
    let summaries = ablation::export(&grid, &records, &out)?;
    println!("{:<40} {:>10}  retained seeds", "cell", "final");
    for (cell, s) in &summaries {
        println!("{:<40} {:>10.2}  {:?}", cell.id(), s.retained_metric, s.retained);
    }
    println!("summary: {}", out.join("summaries/iqr.csv").display());
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}

fn sensors(a: SensorsArgs) -> Result<(), Failure> {
    let cfg = resolve(&a.overrides)?;
    let arena = input(cfg.arena())?;
    let title = match &a.out {
        Some(p) => format!("dodge sensors --out {}", p.display()),
        None => "dodge sensors".to_string(),
    };
    let banner = echo_text(&title, &cfg.to_toml());
    // keep stdout a clean CSV when it carries the table
    match &a.out {
        Some(_) => print!("{banner}"),
        None => eprint!("{banner}"),
    }
    let model = &arena.model;
    let mut state = RobotState::at_rest(model, model.default_positions());
    update_base_kinematics(&mut state, model);
    let links = forward_kinematics(model, &state);
    let mut poses = Vec::new();
    arena.sensors.world_poses_into(&links, &mut poses);

    let mut text = String::from("sensor_id,link,x,y,z,nx,ny,nz\n");
    for (i, (mount, pose)) in arena.sensors.mounts.iter().zip(&poses).enumerate() {
        let p = pose.position;
        let n = pose.orientation.rotate(Vec3::Z);
        text.push_str(&format!(
            "{i},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            model.links[mount.link].name, p.x, p.y, p.z, n.x, n.y, n.z
        ));
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::from(Error::io(p, e)))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<(), Failure> {
    let (policy, cfg) = load_policy(&a.checkpoint, &a.config)?;
    echo(
        &format!("dodge replay --checkpoint {} --seed {} --out {}", a.checkpoint.display(), a.seed, a.out.display()),
        &cfg.to_toml(),
    );
    let arena = input(cfg.arena())?;
    if policy.spec.actor_dim() != arena.actor_dim() {
        return Err(Error::config("checkpoint does not match the configured sensors").into());
    }
    let io = |e| Failure::from(Error::io(&a.out, e));
    let mut w = ReplayWriter::new(BufWriter::new(File::create(&a.out).map_err(io)?)).map_err(io)?;
    let (mut ep, mut obs) = arena.reset(a.seed);
    w.record(&arena, &ep).map_err(io)?;
    let res = loop {
        let (mean, _) = policy.actor_forward_dense(&obs.actor)?;
        let res = arena.step(&mut ep, &mean)?;
        w.record(&arena, &ep).map_err(io)?;
        if res.done() {
            break res;
        }
        obs = res.observation;
    };
    w.into_inner().flush().map_err(io)?;
    let outcome = if res.info.contact {
        "contact"
    } else if res.info.fall {
        "fall"
    } else {
        "success"
    };
    println!("{} steps, {outcome}; wrote {}", res.episode_steps, a.out.display());
    Ok(())
}
