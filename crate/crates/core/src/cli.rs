//! Command-line front end. `run_cli` returns the process exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ScenarioConfig;
use crate::diffnet::{load_checkpoint, save_checkpoint, Checkpoint, NetShape, PolicyNet};
use crate::error::{Error, Result};
use crate::learn;
use crate::simulator::{self, RunRow, Toggles};

#[derive(Debug, Parser)]
#[command(name = "icbf-swarm", version, about = "Decentralized multi-agent safe control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the barrier and policy networks.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint; the loss curve is appended.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run one episode.
    Run(Common),
    /// Run agents × seeds × toggles.
    Sweep(Common),
    /// Train at m agents, test at each n.
    Generalize(Common),
    /// Time both MPC variants on the same triggered steps.
    BenchMpc(Common),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Scenario TOML; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `episode.filter.beta=20`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Agent count, or a comma list for sweep, generalize and bench-mpc.
    #[arg(long, value_delimiter = ',')]
    pub agents: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds for sweep, generalize and bench-mpc.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub no_deadlock: bool,
    #[arg(long)]
    pub no_filter: bool,
    /// Use the per-term MPC.
    #[arg(long)]
    pub trivial_mpc: bool,
    /// Smooth-min sharpness.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Momentum decay of the deadlock resolver.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub random_policy: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; defaults to the logical core count.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Train,
    Run,
    Sweep,
    Generalize,
    Bench,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Train => "train",
            Kind::Run => "run",
            Kind::Sweep => "sweep",
            Kind::Generalize => "generalize",
            Kind::Bench => "bench-mpc",
        }
    }
}

/// Exit code for an error raised after the config resolved: 2 for
/// configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn list(v: &[usize]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

/// Resolves file, flag and `--set` layers into one validated config.
pub fn resolve_config(common: &Common, kind_name: &str) -> Result<ScenarioConfig> {
    let kind = match kind_name {
        "train" => Kind::Train,
        "run" => Kind::Run,
        "sweep" => Kind::Sweep,
        "generalize" => Kind::Generalize,
        "bench-mpc" => Kind::Bench,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    resolve(common, kind)
}

fn resolve(common: &Common, kind: Kind) -> Result<ScenarioConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut ov: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: String| ov.push((k.to_string(), v));
    if !common.agents.is_empty() {
        match kind {
            Kind::Train | Kind::Run => {
                if common.agents.len() != 1 {
                    return Err(Error::Config("--agents takes one count for this command".into()));
                }
                push("scenario.agents", common.agents[0].to_string());
            }
            Kind::Sweep => push("sweep.agents", list(&common.agents)),
            Kind::Generalize => push("generalize.test_n", list(&common.agents)),
            Kind::Bench => push("bench.agents", list(&common.agents)),
        }
    }
    if let Some(s) = common.seed {
        push("episode.seed", s.to_string());
        if kind == Kind::Train {
            push("train.seed", s.to_string());
        }
    }
    if let Some(s) = common.seeds {
        match kind {
            Kind::Sweep => push("sweep.seeds", s.to_string()),
            Kind::Generalize => push("generalize.seeds", s.to_string()),
            Kind::Bench => push("bench.seeds", s.to_string()),
            _ => return Err(Error::Config("--seeds applies to sweep, generalize and bench-mpc".into())),
        }
    }
    if common.no_deadlock {
        push("episode.toggles.deadlock", "false".into());
    }
    if common.no_filter {
        push("episode.toggles.safety_filter", "false".into());
    }
    if common.trivial_mpc {
        push("episode.toggles.trivial_mpc", "true".into());
    }
    if let Some(b) = common.beta {
        push("episode.filter.beta", format!("{b:?}"));
    }
    if let Some(g) = common.gamma {
        push("episode.deadlock.gamma", format!("{g:?}"));
    }
    if common.random_policy {
        push("policy.random", "true".into());
    }
    if let Some(c) = &common.checkpoint {
        push("policy.checkpoint", toml::Value::String(c.display().to_string()).to_string());
    }
    if let Some(o) = &common.out {
        push("output.dir", toml::Value::String(o.display().to_string()).to_string());
    }
    if let Some(r) = &common.run_id {
        push("output.run_id", toml::Value::String(r.clone()).to_string());
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects PATH=VALUE, got `{s}`")))?;
        ov.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = ScenarioConfig::from_toml_with(&text, &ov)?;
    if cfg.output.run_id.is_none() {
        cfg.output.run_id = Some(format!(
            "{}-{}-n{}-s{}",
            kind.name(),
            cfg.scenario.label(),
            cfg.scenario.agents,
            cfg.episode.seed
        ));
    }
    Ok(cfg)
}

fn run_dir(cfg: &ScenarioConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.join(cfg.output.run_id.as_deref().unwrap_or("run"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_policy(cfg: &ScenarioConfig) -> Result<PolicyNet> {
    let model = &cfg.scenario.model;
    if cfg.policy.random {
        return Ok(simulator::random_policy(model, cfg.policy.seed));
    }
    let path = cfg
        .policy
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no policy: pass --checkpoint PATH or --random-policy".into()))?;
    let ck = load_checkpoint(path)?;
    let want = NetShape::for_model(model);
    let got = ck.policy.shape;
    if (got.n, got.m, got.d) != (want.n, want.m, want.d) || ck.policy.u_max != model.u_max {
        return Err(Error::Config(format!(
            "{}: checkpoint is for n={}, m={}, d={}, u_max={:?}; scenario has n={}, m={}, d={}, u_max={:?}",
            path.display(),
            got.n,
            got.m,
            got.d,
            ck.policy.u_max,
            want.n,
            want.m,
            want.d,
            model.u_max
        )));
    }
    Ok(ck.policy)
}

fn train_cmd(cfg: &ScenarioConfig, resume: Option<&Path>) -> Result<String> {
    let dir = run_dir(cfg)?;
    let ckdir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let template = cfg.scenario.build(cfg.scenario.agents, cfg.train.seed)?;
    let gains = &cfg.episode.gains;
    let curve_path = dir.join("loss.csv");
    let (out, start) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.policy.shape != NetShape::for_model(&template.model) {
                return Err(Error::Config(format!("{}: checkpoint shape does not match the model", p.display())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ (ck.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let out = learn::train_from(&cfg.train, &template, gains, ck.icbf, ck.policy, ck.step, &mut rng)?;
            learn::append_loss_csv(&curve_path, &out.curve)?;
            (out, ck.step)
        }
        None => {
            let out = learn::train(&cfg.train, &template, gains)?;
            learn::write_loss_csv(&curve_path, &out.curve)?;
            (out, 0)
        }
    };
    let step = start + cfg.train.total_steps;
    let ck = Checkpoint {
        icbf: out.icbf,
        policy: out.policy,
        step,
        seed: cfg.train.seed,
    };
    save_checkpoint(&ckdir.join(format!("step-{step}.ckpt")), &ck)?;
    save_checkpoint(&ckdir.join("latest.ckpt"), &ck)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let last = out.curve.last().map_or(f64::NAN, |r| r.term1 + r.term2 + r.term3);
    Ok(format!("trained to step {step}; final loss {last:.6}; wrote {}", dir.display()))
}

fn run_cmd(cfg: &ScenarioConfig) -> Result<String> {
    let policy = load_policy(cfg)?;
    let world = cfg.scenario.build(cfg.scenario.agents, cfg.episode.seed)?;
    let dir = run_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let out = simulator::run_episode(world, &policy, &cfg.episode)?;
    let row = RunRow {
        env: cfg.scenario.label().into(),
        n_agents: cfg.scenario.agents,
        seed: cfg.episode.seed,
        toggles: cfg.episode.toggles,
        metrics: Some(out.metrics.clone()),
        error: None,
    };
    write(&dir.join("metrics.csv"), &simulator::metrics_csv(std::slice::from_ref(&row)))?;
    write(&dir.join("timing.csv"), &simulator::timing_csv(std::slice::from_ref(&row)))?;
    simulator::write_events(&dir.join("events.jsonl"), &out.events)?;
    simulator::write_trajectory(&dir.join("traj.jsonl"), &out.log)?;
    let m = &out.metrics;
    Ok(format!(
        "collision-free {:.1}%  goal {:.1}%  deadlocks {}  input violations {}  triggers {}  faults {}; wrote {}",
        m.collision_avoidance_pct,
        m.goal_reach_pct,
        m.deadlock_count,
        m.input_violation_count,
        m.mpc_trigger_count,
        m.safety_fault_count,
        dir.display()
    ))
}

fn sweep_cmd(cfg: &ScenarioConfig) -> Result<String> {
    let policy = load_policy(cfg)?;
    let dir = run_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let base = cfg.episode.toggles;
    let mut toggles = vec![base];
    if cfg.sweep.ablate_deadlock {
        toggles.push(Toggles { deadlock: !base.deadlock, ..base });
    }
    if cfg.sweep.ablate_filter {
        toggles.push(Toggles {
            safety_filter: !base.safety_filter,
            ..base
        });
    }
    let seeds: Vec<u64> = (0..cfg.sweep.seeds).map(|s| cfg.episode.seed + s).collect();
    let rows = simulator::sweep(&cfg.scenario, &cfg.episode, &cfg.sweep.agents, &seeds, &toggles, &policy);
    write(&dir.join("metrics.csv"), &simulator::metrics_csv(&rows))?;
    write(&dir.join("summary.csv"), &simulator::summary_csv(&rows))?;
    write(&dir.join("timing.csv"), &simulator::timing_csv(&rows))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: cell n={} seed={} failed: {}",
            r.n_agents,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(format!("{} runs ({failed} failed); wrote {}", rows.len(), dir.display()))
}

fn generalize_cmd(cfg: &ScenarioConfig) -> Result<String> {
    let dir = run_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let g = &cfg.generalize;
    let seeds: Vec<u64> = (0..g.seeds).map(|s| cfg.episode.seed + s).collect();
    let policy = if cfg.policy.checkpoint.is_some() || cfg.policy.random {
        load_policy(cfg)?
    } else {
        let template = cfg.scenario.build(g.train_m, cfg.train.seed)?;
        let out = learn::train(&cfg.train, &template, &cfg.episode.gains)?;
        let ckdir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        learn::write_loss_csv(&dir.join("loss.csv"), &out.curve)?;
        save_checkpoint(
            &ckdir.join("latest.ckpt"),
            &Checkpoint {
                icbf: out.icbf,
                policy: out.policy.clone(),
                step: cfg.train.total_steps,
                seed: cfg.train.seed,
            },
        )?;
        out.policy
    };
    let rows = simulator::evaluate_generalization(&cfg.scenario, &cfg.episode, &policy, g.train_m, &g.test_n, &seeds);
    write(&dir.join("generalization.csv"), &simulator::generalization_csv(&rows))?;
    Ok(format!("{} rows; wrote {}", rows.len(), dir.display()))
}

fn bench_cmd(cfg: &ScenarioConfig) -> Result<String> {
    let policy = load_policy(cfg)?;
    let dir = run_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let seeds: Vec<u64> = (0..cfg.bench.seeds).map(|s| cfg.episode.seed + s).collect();
    let rows = simulator::bench_mpc(&cfg.scenario, &cfg.episode, &cfg.bench.agents, &seeds, &policy)?;
    for r in rows.iter().filter(|r| r.mpc_calls == 0) {
        eprintln!("warning: n={} seed={} never triggered the filter; ratio reported as 1.0", r.n_agents, r.seed);
    }
    write(&dir.join("bench.csv"), &simulator::bench_csv(&rows))?;
    Ok(format!("{} rows; wrote {}", rows.len(), dir.display()))
}

fn dispatch(cli: Cli) -> std::result::Result<String, (i32, Error)> {
    let (common, kind, resume) = match cli.command {
        Command::Train { common, resume } => (common, Kind::Train, resume),
        Command::Run(c) => (c, Kind::Run, None),
        Command::Sweep(c) => (c, Kind::Sweep, None),
        Command::Generalize(c) => (c, Kind::Generalize, None),
        Command::BenchMpc(c) => (c, Kind::Bench, None),
    };
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err((2, Error::Config("--jobs must be >= 1".into())));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    // Anything wrong with the config file or flags is a usage error.
    let cfg = resolve(&common, kind).map_err(|e| (2, e))?;
    match kind {
        Kind::Train => train_cmd(&cfg, resume.as_deref()),
        Kind::Run => run_cmd(&cfg),
        Kind::Sweep => sweep_cmd(&cfg),
        Kind::Generalize => generalize_cmd(&cfg),
        Kind::Bench => bench_cmd(&cfg),
    }
    .map_err(|e| (exit_code(&e), e))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}
