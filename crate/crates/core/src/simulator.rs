//! Episode loop, metrics, sweeps and the train-at-m / test-at-n protocol.
//!
//! Each step reads one snapshot of all agents and runs the stages
//! policy → collision prediction → MPC filter → deadlock escape → integrate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deadlock::{self, DeadlockConfig, MomentumState};
use crate::diffnet::PolicyNet;
use crate::dynamics::{ControlInput, DynamicsModel, ModelKind, NominalController, PdGains};
use crate::environment::{self, Guidance, Maze, SpatialIndex, World};
use crate::error::{Error, Result};
use crate::learn::{self, TrainConfig};
use crate::linalg;
use crate::safety::{self, Barriers, FilterConfig, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub safety_filter: bool,
    pub deadlock: bool,
    /// Use the per-term MPC instead of the combined one.
    pub trivial_mpc: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            safety_filter: true,
            deadlock: true,
            trivial_mpc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Route around obstacles with a grid distance field; ignored without obstacles.
    pub enabled: bool,
    pub resolution: f64,
    pub clearance: f64,
    pub lookahead: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            resolution: 0.25,
            clearance: 0.35,
            lookahead: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub filter: FilterConfig,
    pub deadlock: DeadlockConfig,
    pub gains: PdGains,
    pub guidance: GuidanceConfig,
    /// Also time the other MPC variant on every triggered agent-step.
    pub shadow_baseline: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 800,
            seed: 0,
            toggles: Toggles::default(),
            filter: FilterConfig::default(),
            deadlock: DeadlockConfig::default(),
            gains: PdGains::default(),
            guidance: GuidanceConfig::default(),
            shadow_baseline: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.deadlock.validate()?;
        if !(self.guidance.resolution > 0.0) || self.guidance.lookahead < 0.0 {
            return Err(Error::Config("guidance.resolution must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Empty,
    Maze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub env: EnvKind,
    /// Maze file; the bundled maze when absent.
    pub maze_path: Option<PathBuf>,
    pub agents: usize,
    pub model: DynamicsModel,
    pub r: f64,
    pub sensing_radius: f64,
    /// Side length of the empty arena, metres.
    pub extent: f64,
    pub start_spacing: f64,
    pub goal_spacing: f64,
    /// Minimum distance from a goal to any obstacle, metres.
    pub goal_clearance: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            env: EnvKind::Empty,
            maze_path: None,
            agents: 8,
            model: DynamicsModel::default(),
            r: environment::DEFAULT_SAFETY_RADIUS,
            sensing_radius: environment::DEFAULT_SENSING_RADIUS,
            extent: environment::DEFAULT_EXTENT,
            start_spacing: 0.6,
            goal_spacing: 0.6,
            goal_clearance: 0.4,
        }
    }
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self.env {
            EnvKind::Empty => "empty",
            EnvKind::Maze => "maze",
        }
    }

    fn base_world(&self) -> Result<World> {
        self.model.validate()?;
        match self.env {
            EnvKind::Empty => {
                let mut w = World::new(self.model.clone(), self.r, self.sensing_radius)?;
                w.extent = vec![self.extent; self.model.pos_dim()];
                Ok(w)
            }
            EnvKind::Maze => {
                if self.model.pos_dim() != 2 {
                    return Err(Error::Config("maze environments are planar".into()));
                }
                let text = match &self.maze_path {
                    Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                    None => environment::DEFAULT_MAZE.to_string(),
                };
                environment::load_maze(&text, self.model.clone(), self.r, self.sensing_radius)
            }
        }
    }

    /// World with `agents` start/goal pairs drawn from `seed`.
    pub fn build(&self, agents: usize, seed: u64) -> Result<World> {
        let mut w = self.base_world()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clearance = 2.0 * self.r + 0.1;
        let starts = w.sample_free_points(agents, self.start_spacing, clearance, 2.0 * self.r, &mut rng)?;
        let goals = w.sample_free_points(
            agents,
            self.goal_spacing,
            clearance.max(self.goal_clearance),
            2.0 * self.r,
            &mut rng,
        )?;
        for (s, g) in starts.into_iter().zip(goals) {
            let mut state = w.model.rest_state(&s);
            if w.model.kind == ModelKind::PlanarUnicycle {
                state.0[2] = (g[1] - s[1]).atan2(g[0] - s[0]);
            }
            w.add_agent(state, g)?;
        }
        w.validate()?;
        Ok(w)
    }

    pub fn maze(&self) -> Result<Option<Maze>> {
        if self.env != EnvKind::Maze {
            return Ok(None);
        }
        let text = match &self.maze_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => environment::DEFAULT_MAZE.to_string(),
        };
        Maze::parse(&text).map(Some)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// States after the step.
    pub states: Vec<Vec<f64>>,
    /// Controls applied during the step.
    pub controls: Vec<Vec<f64>>,
    pub triggered: Vec<usize>,
    pub faults: Vec<usize>,
    pub resolving: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub r: f64,
    pub goals: Vec<Vec<f64>>,
    pub initial: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Trigger,
    Fault,
    DeadlockOnset,
    DeadlockResolved,
    DeadlockFallback,
    Collision,
    InputViolation,
    GoalReached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub agent: usize,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Outcome metrics. Everything except the timing fields is a function of
/// the trajectory log; see [`metrics_from_log`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub collision_avoidance_pct: f64,
    pub deadlock_count: usize,
    pub input_violation_count: usize,
    pub goal_reach_pct: f64,
    /// Triggered agent-steps.
    pub mpc_trigger_count: usize,
    pub safety_fault_count: usize,
    /// Smallest inter-agent distance seen; infinite with fewer than two agents.
    pub min_separation: f64,
    pub timing: Timing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Controller wall time per agent per step, seconds.
    pub mean_step_time_s: f64,
    /// Controller wall time per agent over the episode, seconds.
    pub mean_episode_time_s: f64,
    pub mpc_calls: usize,
    /// Wall time inside the applied MPC, seconds.
    pub mpc_time_s: f64,
    /// Wall time inside the shadow MPC, seconds (0 unless enabled).
    pub shadow_mpc_time_s: f64,
}

pub struct EpisodeOutput {
    pub metrics: RunMetrics,
    pub log: TrajectoryLog,
    pub events: Vec<Event>,
}

/// Recomputes the outcome metrics from a trajectory log.
pub fn metrics_from_log(world: &World, log: &TrajectoryLog, deadlock: &DeadlockConfig) -> RunMetrics {
    let n = log.initial.len();
    let model = &world.model;
    let mut collided = vec![false; n];
    let mut violated = vec![false; n];
    let mut min_sep = f64::INFINITY;
    let mut check = |states: &[Vec<f64>], collided: &mut [bool]| {
        for i in 0..n {
            let pi = model.position(&states[i]);
            if world.obstacle_clearance(pi) < 2.0 * log.r {
                collided[i] = true;
            }
            for j in i + 1..n {
                let d = linalg::distance(pi, model.position(&states[j]));
                min_sep = min_sep.min(d);
                if d < 2.0 * log.r {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }
    };
    check(&log.initial, &mut collided);
    let mut streak = vec![0usize; n];
    let mut longest = vec![0usize; n];
    let mut triggers = 0;
    let mut faults = 0;
    let mut states = &log.initial;
    for rec in &log.steps {
        for i in 0..n {
            let u = &rec.controls[i];
            if !model.input_admissible(u, 1e-9) {
                violated[i] = true;
            }
            if deadlock::detect(model, u, &states[i], &log.goals[i], deadlock) {
                streak[i] += 1;
                longest[i] = longest[i].max(streak[i]);
            } else {
                streak[i] = 0;
            }
        }
        triggers += rec.triggered.len();
        faults += rec.faults.len();
        check(&rec.states, &mut collided);
        states = &rec.states;
    }
    let at_goal: Vec<bool> = (0..n)
        .map(|i| linalg::distance(model.position(&states[i]), &log.goals[i]) <= deadlock.goal_tolerance)
        .collect();
    let pct = |count: usize| if n == 0 { 100.0 } else { 100.0 * count as f64 / n as f64 };
    RunMetrics {
        steps: log.steps.len(),
        collision_avoidance_pct: pct(collided.iter().filter(|c| !**c).count()),
        deadlock_count: (0..n).filter(|&i| !at_goal[i] && longest[i] >= deadlock.streak).count(),
        input_violation_count: violated.iter().filter(|v| **v).count(),
        goal_reach_pct: pct(at_goal.iter().filter(|g| **g).count()),
        mpc_trigger_count: triggers,
        safety_fault_count: faults,
        min_separation: min_sep,
        timing: Timing::default(),
    }
}

struct Agents<'a> {
    policy: &'a PolicyNet,
    gains: &'a PdGains,
    guidance: Option<Guidance>,
    lookahead: f64,
}

impl Agents<'_> {
    fn goal(&self, world: &World, i: usize) -> Vec<f64> {
        match &self.guidance {
            Some(g) => g.waypoint(i, world.position(i), self.lookahead),
            None => world.goals()[i].clone(),
        }
    }

    /// `(π, k)` for agent `i` at the world's current state.
    fn act(&self, world: &World, index: &SpatialIndex, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let goal = self.goal(world, i);
        let (_, u) = learn::policy_action(world, index, self.policy, self.gains, i, &goal)?;
        let k = NominalController::new(&world.model, self.gains).control(&world.states()[i], &goal);
        Ok((u, k.0))
    }
}

fn check_policy(world: &World, policy: &PolicyNet) -> Result<()> {
    let s = policy.shape;
    let m = &world.model;
    if (s.n, s.m, s.d) != (m.state_dim(), m.control_dim(), m.pos_dim()) {
        return Err(Error::Config(format!(
            "policy expects n={}, m={}, d={} but the model has n={}, m={}, d={}",
            s.n,
            s.m,
            s.d,
            m.state_dim(),
            m.control_dim(),
            m.pos_dim()
        )));
    }
    Ok(())
}

pub fn run_episode(world: World, policy: &PolicyNet, cfg: &EpisodeConfig) -> Result<EpisodeOutput> {
    let order: Vec<usize> = (0..world.num_agents()).collect();
    run_episode_ordered(world, policy, cfg, &order)
}

/// As [`run_episode`], with per-agent stages dispatched in `order`.
/// Results must not depend on it.
pub fn run_episode_ordered(
    mut world: World,
    policy: &PolicyNet,
    cfg: &EpisodeConfig,
    order: &[usize],
) -> Result<EpisodeOutput> {
    cfg.validate()?;
    world.validate()?;
    check_policy(&world, policy)?;
    let n = world.num_agents();
    if order.len() != n || {
        let mut s = order.to_vec();
        s.sort_unstable();
        s != (0..n).collect::<Vec<_>>()
    } {
        return Err(Error::Config("agent order must be a permutation".into()));
    }
    let model = world.model.clone();
    let agents = Agents {
        policy,
        gains: &cfg.gains,
        guidance: if cfg.guidance.enabled {
            Guidance::new(&world, cfg.guidance.clearance, cfg.guidance.resolution)
        } else {
            None
        },
        lookahead: cfg.guidance.lookahead,
    };
    let bar = Barriers::new(&model, &cfg.filter, world.r);
    let toggles = cfg.toggles;
    let mut log = TrajectoryLog {
        r: world.r,
        goals: world.goals().to_vec(),
        initial: world.states().iter().map(|s| s.0.clone()).collect(),
        steps: Vec::with_capacity(cfg.max_steps),
    };
    let mut events = Vec::new();
    let mut u_prev = vec![vec![0.0; model.control_dim()]; n];
    let mut momentum: Vec<MomentumState> = (0..n)
        .map(|_| MomentumState::new(model.control_dim(), &cfg.deadlock))
        .collect();
    let mut busy_time = 0.0f64;
    let mut timing = Timing::default();
    let mut arrived = vec![false; n];

    for step in 0..cfg.max_steps {
        let index = world.build_index();

        // policy
        let t0 = Instant::now();
        let acts: Vec<(usize, Result<(Vec<f64>, Vec<f64>)>)> =
            order.par_iter().map(|&i| (i, agents.act(&world, &index, i))).collect();
        let mut pol = vec![Vec::new(); n];
        let mut nominal = vec![Vec::new(); n];
        for (i, r) in acts {
            let (u, k) = r?;
            pol[i] = u;
            nominal[i] = k;
        }

        // prediction
        let predicted = if toggles.safety_filter {
            safety::predict_collisions(&world, &cfg.filter, |w, idx, i| {
                let (u, _) = agents.act(w, idx, i)?;
                Ok(w.model.project_input(&u))
            })?
        } else {
            vec![false; n]
        };

        // filter
        type Filtered = Option<(safety::FilterResult, f64, f64)>;
        type Mpc = fn(&Barriers, &Scene, &[f64], &[f64]) -> safety::FilterResult;
        let (main, shadow): (Mpc, Mpc) = if toggles.trivial_mpc {
            (safety::mpc_trivial, safety::mpc_icbf)
        } else {
            (safety::mpc_icbf, safety::mpc_trivial)
        };
        let mut filtered: Vec<(usize, Result<Filtered>)> = order
            .par_iter()
            .map(|&i| {
                if !toggles.safety_filter {
                    return (i, Ok(None));
                }
                let run = || -> Result<Filtered> {
                    let scene = Scene::gather(&world, &index, i)?;
                    if !predicted[i] && !bar.alert(&scene) {
                        return Ok(None);
                    }
                    let t = Instant::now();
                    let out = main(&bar, &scene, &u_prev[i], &nominal[i]);
                    let dt_main = t.elapsed().as_secs_f64();
                    let mut dt_shadow = 0.0;
                    if cfg.shadow_baseline {
                        let t = Instant::now();
                        let _ = shadow(&bar, &scene, &u_prev[i], &nominal[i]);
                        dt_shadow = t.elapsed().as_secs_f64();
                    }
                    Ok(Some((out, dt_main, dt_shadow)))
                };
                (i, run())
            })
            .collect();
        filtered.sort_by_key(|(i, _)| *i);
        let mut controls = pol.clone();
        let mut trig_ids = Vec::new();
        let mut fault_ids = Vec::new();
        let mut shadow_time = 0.0;
        for (i, r) in filtered {
            if let Some((out, dt_main, dt_shadow)) = r? {
                trig_ids.push(i);
                timing.mpc_calls += 1;
                timing.mpc_time_s += dt_main;
                shadow_time += dt_shadow;
                events.push(Event {
                    step,
                    agent: i,
                    kind: EventKind::Trigger,
                    detail: None,
                });
                if let Some(reason) = out.fault {
                    fault_ids.push(i);
                    events.push(Event {
                        step,
                        agent: i,
                        kind: EventKind::Fault,
                        detail: Some(reason),
                    });
                }
                controls[i] = out.u;
            }
        }
        timing.shadow_mpc_time_s += shadow_time;
        trig_ids.sort_unstable();
        fault_ids.sort_unstable();
        if toggles.safety_filter {
            for u in controls.iter_mut() {
                *u = model.project_input(u);
            }
        }

        // deadlock
        let mut resolving = Vec::new();
        if toggles.deadlock {
            let detected: Vec<bool> = (0..n)
                .map(|i| deadlock::detect(&model, &controls[i], &world.states()[i], &world.goals()[i], &cfg.deadlock))
                .collect();
            let any = detected.iter().any(|d| *d);
            let active: Vec<bool> = (0..n)
                .map(|i| detected[i] || (cfg.deadlock.global_trigger && any))
                .collect();
            let mut escapes: Vec<(usize, Result<Option<(deadlock::Resolution, MomentumState)>>)> = order
                .par_iter()
                .map(|&i| {
                    if !active[i] {
                        return (i, Ok(None));
                    }
                    let run = || -> Result<Option<(deadlock::Resolution, MomentumState)>> {
                        let x = &world.states()[i];
                        let goal = agents.goal(&world, i);
                        let nb = index.neighbors(i, &world)?;
                        let obs = crate::diffnet::Observation::from_neighbors(&model, x, &nb);
                        let gx = deadlock::grad_cost(&model, policy, &cfg.gains, x, &obs, &goal)?;
                        let gu = deadlock::control_gradient(&model, x, &gx);
                        let scene = Scene::gather(&world, &index, i)?;
                        let (a, b) = safety::constraint_rows(&bar, &scene, &u_prev[i], &controls[i]);
                        let mut ms = momentum[i].clone();
                        let res = deadlock::resolve(&mut ms, &gu, &nominal[i], &a, &b, &controls[i])?;
                        Ok(Some((res, ms)))
                    };
                    (i, run())
                })
                .collect();
            escapes.sort_by_key(|(i, _)| *i);
            for (i, r) in escapes {
                match r? {
                    Some((res, ms)) => {
                        if !momentum[i].is_active() {
                            events.push(Event {
                                step,
                                agent: i,
                                kind: EventKind::DeadlockOnset,
                                detail: None,
                            });
                        }
                        if res.fell_back {
                            events.push(Event {
                                step,
                                agent: i,
                                kind: EventKind::DeadlockFallback,
                                detail: None,
                            });
                        } else {
                            resolving.push(i);
                        }
                        momentum[i] = ms;
                        controls[i] = res.u;
                    }
                    None => {
                        if momentum[i].is_active() {
                            events.push(Event {
                                step,
                                agent: i,
                                kind: EventKind::DeadlockResolved,
                                detail: None,
                            });
                            momentum[i].reset();
                        }
                    }
                }
            }
            resolving.sort_unstable();
        }
        busy_time += t0.elapsed().as_secs_f64() - shadow_time;

        // integrate
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let s = model.step(&world.states()[i], &ControlInput(controls[i].clone()));
            let s = match s {
                Ok(s) if linalg::all_finite(&s) => s,
                _ => return Err(Error::NonFiniteState { agent: i, step }),
            };
            next.push(s);
        }
        world.set_states(next)?;
        for i in 0..n {
            if !model.input_admissible(&controls[i], 1e-9) {
                events.push(Event {
                    step,
                    agent: i,
                    kind: EventKind::InputViolation,
                    detail: None,
                });
            }
            let near = linalg::distance(world.position(i), &world.goals()[i]) <= cfg.deadlock.goal_tolerance;
            if near && !arrived[i] {
                events.push(Event {
                    step,
                    agent: i,
                    kind: EventKind::GoalReached,
                    detail: None,
                });
            }
            arrived[i] = near;
        }
        for (i, j) in contacts(&world) {
            events.push(Event {
                step,
                agent: i,
                kind: EventKind::Collision,
                detail: j.map(|j| format!("agent {j}")).or(Some("obstacle".into())),
            });
        }
        u_prev = controls.clone();
        log.steps.push(StepRecord {
            step,
            states: world.states().iter().map(|s| s.0.clone()).collect(),
            controls,
            triggered: trig_ids,
            faults: fault_ids,
            resolving,
        });
    }

    let mut metrics = metrics_from_log(&world, &log, &cfg.deadlock);
    if n > 0 && cfg.max_steps > 0 {
        timing.mean_step_time_s = busy_time / (n * cfg.max_steps) as f64;
        timing.mean_episode_time_s = busy_time / n as f64;
    }
    metrics.timing = timing;
    Ok(EpisodeOutput { metrics, log, events })
}

/// Contacts closer than `2r`: `(i, Some(j))` for agent pairs, `(i, None)` for obstacles.
fn contacts(world: &World) -> Vec<(usize, Option<usize>)> {
    let mut out = Vec::new();
    let n = world.num_agents();
    for i in 0..n {
        let p = world.position(i);
        for j in i + 1..n {
            if linalg::distance(p, world.position(j)) < 2.0 * world.r {
                out.push((i, Some(j)));
            }
        }
        if world.obstacle_clearance(p) < 2.0 * world.r {
            out.push((i, None));
        }
    }
    out
}

pub fn write_trajectory(path: &Path, log: &TrajectoryLog) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header = serde_json::json!({
        "r": log.r,
        "goals": log.goals,
        "initial": log.initial,
    });
    let io = |e| Error::io(path, e);
    writeln!(f, "{header}").map_err(io)?;
    for rec in &log.steps {
        writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        line,
        column: e.column(),
        message: e.to_string(),
    };
    #[derive(Deserialize)]
    struct Header {
        r: f64,
        goals: Vec<Vec<f64>>,
        initial: Vec<Vec<f64>>,
    }
    let h: Header = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| parse_err(1, e))?;
    let mut steps = Vec::new();
    for (k, l) in lines.enumerate() {
        steps.push(serde_json::from_str(l).map_err(|e| parse_err(k + 2, e))?);
    }
    Ok(TrajectoryLog {
        r: h.r,
        goals: h.goals,
        initial: h.initial,
        steps,
    })
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in events {
        writeln!(f, "{}", serde_json::to_string(e).expect("event serializes")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// One sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub env: String,
    pub n_agents: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

pub const METRIC_COLUMNS: [&str; 8] = [
    "collision_avoidance_pct",
    "deadlock_count",
    "input_violation_count",
    "goal_reach_pct",
    "mpc_trigger_count",
    "safety_fault_count",
    "min_separation",
    "steps",
];

fn metric_values(m: &RunMetrics) -> [f64; 8] {
    [
        m.collision_avoidance_pct,
        m.deadlock_count as f64,
        m.input_violation_count as f64,
        m.goal_reach_pct,
        m.mpc_trigger_count as f64,
        m.safety_fault_count as f64,
        m.min_separation,
        m.steps as f64,
    ]
}

/// Runs every `agents × seeds × toggles` cell; failed cells keep their error.
pub fn sweep(
    scenario: &Scenario,
    base: &EpisodeConfig,
    agents: &[usize],
    seeds: &[u64],
    toggles: &[Toggles],
    policy: &PolicyNet,
) -> Vec<RunRow> {
    let mut cells = Vec::new();
    for &n in agents {
        for t in toggles {
            for &s in seeds {
                cells.push((n, s, *t));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(n, seed, t)| {
            let cfg = EpisodeConfig {
                seed,
                toggles: t,
                ..base.clone()
            };
            let result = scenario
                .build(n, seed)
                .and_then(|w| run_episode(w, policy, &cfg));
            let (metrics, error) = match result {
                Ok(out) => (Some(out.metrics), None),
                Err(e) => (None, Some(e.to_string())),
            };
            RunRow {
                env: scenario.label().into(),
                n_agents: n,
                seed,
                toggles: t,
                metrics,
                error,
            }
        })
        .collect()
}

fn toggle_cols(t: &Toggles) -> String {
    format!("{},{},{}", t.safety_filter as u8, t.deadlock as u8, t.trivial_mpc as u8)
}

pub fn metrics_csv(rows: &[RunRow]) -> String {
    let mut out = format!(
        "env,n_agents,seed,safety_filter,deadlock,trivial_mpc,{},error\n",
        METRIC_COLUMNS.join(",")
    );
    for r in rows {
        let vals = match &r.metrics {
            Some(m) => metric_values(m).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => vec![""; METRIC_COLUMNS.len()].join(","),
        };
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.env,
            r.n_agents,
            r.seed,
            toggle_cols(&r.toggles),
            vals,
            err
        ));
    }
    out
}

pub fn timing_csv(rows: &[RunRow]) -> String {
    let mut out = String::from(
        "env,n_agents,seed,safety_filter,deadlock,trivial_mpc,mean_step_time_s,mean_episode_time_s,mpc_calls,mpc_time_s,shadow_mpc_time_s\n",
    );
    for r in rows {
        if let Some(m) = &r.metrics {
            let t = &m.timing;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.env,
                r.n_agents,
                r.seed,
                toggle_cols(&r.toggles),
                t.mean_step_time_s,
                t.mean_episode_time_s,
                t.mpc_calls,
                t.mpc_time_s,
                t.shadow_mpc_time_s
            ));
        }
    }
    out
}

/// Mean and population standard deviation per metric for each
/// `(env, N, toggles)` group, in first-appearance order.
pub fn summary_csv(rows: &[RunRow]) -> String {
    let mut groups: Vec<((String, usize, Toggles), Vec<&RunRow>)> = Vec::new();
    for r in rows {
        let key = (r.env.clone(), r.n_agents, r.toggles);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut header = String::from("env,n_agents,safety_filter,deadlock,trivial_mpc,runs,failed");
    for c in METRIC_COLUMNS {
        header.push_str(&format!(",{c}_mean,{c}_std"));
    }
    let mut out = header + "\n";
    for ((env, n, t), members) in groups {
        let ok: Vec<[f64; 8]> = members.iter().filter_map(|r| r.metrics.as_ref()).map(metric_values).collect();
        let mut line = format!("{env},{n},{},{},{}", toggle_cols(&t), members.len(), members.len() - ok.len());
        for c in 0..METRIC_COLUMNS.len() {
            let vals: Vec<f64> = ok.iter().map(|v| v[c]).collect();
            let (mean, std) = mean_std(&vals);
            line.push_str(&format!(",{mean},{std}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneralizationRow {
    pub train_m: usize,
    pub test_n: usize,
    pub seeds: usize,
    pub mpc_triggers_mean: f64,
    pub deadlocks_mean: f64,
    pub collision_avoidance_pct_mean: f64,
    pub goal_reach_pct_mean: f64,
    pub failed: usize,
}

/// Trains with `train_m` agents, then evaluates at each `n`.
pub fn generalization_protocol(
    scenario: &Scenario,
    train: &TrainConfig,
    episode: &EpisodeConfig,
    train_m: usize,
    test_ns: &[usize],
    seeds: &[u64],
) -> Result<(PolicyNet, Vec<GeneralizationRow>)> {
    let template = scenario.build(train_m, train.seed)?;
    let out = learn::train(train, &template, &episode.gains)?;
    let rows = evaluate_generalization(scenario, episode, &out.policy, train_m, test_ns, seeds);
    Ok((out.policy, rows))
}

pub fn evaluate_generalization(
    scenario: &Scenario,
    episode: &EpisodeConfig,
    policy: &PolicyNet,
    train_m: usize,
    test_ns: &[usize],
    seeds: &[u64],
) -> Vec<GeneralizationRow> {
    let runs = sweep(scenario, episode, test_ns, seeds, &[episode.toggles], policy);
    test_ns
        .iter()
        .map(|&n| {
            let ms: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| r.n_agents == n)
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let mean = |f: &dyn Fn(&RunMetrics) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>()).0;
            GeneralizationRow {
                train_m,
                test_n: n,
                seeds: seeds.len(),
                mpc_triggers_mean: mean(&|m| m.mpc_trigger_count as f64),
                deadlocks_mean: mean(&|m| m.deadlock_count as f64),
                collision_avoidance_pct_mean: mean(&|m| m.collision_avoidance_pct),
                goal_reach_pct_mean: mean(&|m| m.goal_reach_pct),
                failed: seeds.len() - ms.len(),
            }
        })
        .collect()
}

pub fn generalization_csv(rows: &[GeneralizationRow]) -> String {
    let mut out = String::from(
        "train_m,test_n,seeds,mpc_triggers_mean,deadlocks_mean,collision_avoidance_pct_mean,goal_reach_pct_mean,failed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.train_m,
            r.test_n,
            r.seeds,
            r.mpc_triggers_mean,
            r.deadlocks_mean,
            r.collision_avoidance_pct_mean,
            r.goal_reach_pct_mean,
            r.failed
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub env: String,
    pub n_agents: usize,
    pub seed: u64,
    pub mpc_calls: usize,
    /// Mean seconds per call of the combined filter.
    pub icbf_time_s: f64,
    /// Mean seconds per call of the per-term filter on the same inputs.
    pub trivial_time_s: f64,
    pub ratio: f64,
}

/// Times both MPC variants on identical triggered agent-steps: the episode
/// applies the combined filter and evaluates the per-term one alongside.
pub fn bench_mpc(
    scenario: &Scenario,
    base: &EpisodeConfig,
    agents: &[usize],
    seeds: &[u64],
    policy: &PolicyNet,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in agents {
        for &seed in seeds {
            let cfg = EpisodeConfig {
                seed,
                shadow_baseline: true,
                toggles: Toggles {
                    safety_filter: true,
                    trivial_mpc: false,
                    ..base.toggles
                },
                ..base.clone()
            };
            let out = run_episode(scenario.build(n, seed)?, policy, &cfg)?;
            let t = &out.metrics.timing;
            let calls = t.mpc_calls;
            let (icbf, trivial, ratio) = if calls == 0 {
                (0.0, 0.0, 1.0)
            } else {
                let a = t.mpc_time_s / calls as f64;
                let b = t.shadow_mpc_time_s / calls as f64;
                (a, b, b / a)
            };
            rows.push(BenchRow {
                env: scenario.label().into(),
                n_agents: n,
                seed,
                mpc_calls: calls,
                icbf_time_s: icbf,
                trivial_time_s: trivial,
                ratio,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("env,n_agents,seed,mpc_calls,icbf_time_s,trivial_time_s,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.env, r.n_agents, r.seed, r.mpc_calls, r.icbf_time_s, r.trivial_time_s, r.ratio
        ));
    }
    out
}

/// Untrained policy of the right shape for `model`.
pub fn random_policy(model: &DynamicsModel, seed: u64) -> PolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PolicyNet::new(crate::diffnet::NetShape::for_model(model), model.u_max.clone(), &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_on(offset: f64) -> World {
        let model = DynamicsModel::default();
        let mut w = World::new(model.clone(), 0.15, 1.0).unwrap();
        w.add_agent(model.rest_state(&[3.0, 5.0]), vec![7.0, 5.0 + offset]).unwrap();
        w.add_agent(model.rest_state(&[7.0, 5.0 + offset]), vec![3.0, 5.0]).unwrap();
        w
    }

    fn cfg(steps: usize, filter: bool) -> EpisodeConfig {
        EpisodeConfig {
            max_steps: steps,
            toggles: Toggles {
                safety_filter: filter,
                ..Toggles::default()
            },
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn zero_steps_reports_initial_state() {
        let w = head_on(0.0);
        let p = random_policy(&w.model, 1);
        let out = run_episode(w, &p, &cfg(0, true)).unwrap();
        assert_eq!(out.metrics.steps, 0);
        assert!(out.log.steps.is_empty());
        assert_eq!(out.metrics.collision_avoidance_pct, 100.0);
        assert_eq!(out.metrics.goal_reach_pct, 0.0);
        assert!((out.metrics.min_separation - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unfiltered_head_on_collides() {
        let w = head_on(0.02);
        let p = random_policy(&w.model, 1);
        let out = run_episode(w, &p, &cfg(300, false)).unwrap();
        assert!(out.metrics.collision_avoidance_pct < 100.0);
        assert_eq!(out.metrics.mpc_trigger_count, 0);
        assert!(out.events.iter().any(|e| e.kind == EventKind::Collision));
    }

    #[test]
    fn filtered_head_on_is_safe() {
        let w = head_on(0.02);
        let p = random_policy(&w.model, 1);
        let out = run_episode(w, &p, &cfg(600, true)).unwrap();
        assert_eq!(out.metrics.collision_avoidance_pct, 100.0);
        assert!(out.metrics.min_separation >= 0.3);
        assert!(out.metrics.mpc_trigger_count > 0);
        assert_eq!(out.metrics.input_violation_count, 0);
    }

    #[test]
    fn runs_are_deterministic_and_order_free() {
        let sc = Scenario {
            agents: 6,
            extent: 4.0,
            ..Scenario::default()
        };
        let w = sc.build(6, 3).unwrap();
        let p = random_policy(&w.model, 2);
        let c = cfg(120, true);
        let a = run_episode(w.clone(), &p, &c).unwrap();
        let b = run_episode(w.clone(), &p, &c).unwrap();
        let rev: Vec<usize> = (0..6).rev().collect();
        let r = run_episode_ordered(w, &p, &c, &rev).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log, r.log);
        assert_eq!(a.events, r.events);
    }

    #[test]
    fn bad_order_rejected() {
        let w = head_on(0.0);
        let p = random_policy(&w.model, 1);
        assert!(run_episode_ordered(w, &p, &cfg(1, true), &[0, 0]).is_err());
    }

    #[test]
    fn metrics_replay_from_written_log() {
        let w = head_on(0.02);
        let p = random_policy(&w.model, 1);
        let out = run_episode(w.clone(), &p, &cfg(80, true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        write_trajectory(&path, &out.log).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back, out.log);
        let mut m = metrics_from_log(&w, &back, &DeadlockConfig::default());
        m.timing = out.metrics.timing.clone();
        assert_eq!(m, out.metrics);
    }

    #[test]
    fn mismatched_policy_rejected() {
        let w = head_on(0.0);
        let uni = DynamicsModel::new(ModelKind::PlanarUnicycle, 0.05, vec![1.0, 1.0]).unwrap();
        let p = random_policy(&uni, 1);
        assert!(matches!(run_episode(w, &p, &cfg(1, true)), Err(Error::Config(_))));
    }

    #[test]
    fn summary_groups_and_averages() {
        let m = |c: f64| RunMetrics {
            collision_avoidance_pct: c,
            ..RunMetrics::default()
        };
        let row = |seed, c| RunRow {
            env: "empty".into(),
            n_agents: 4,
            seed,
            toggles: Toggles::default(),
            metrics: Some(m(c)),
            error: None,
        };
        let mut failed = row(2, 0.0);
        failed.metrics = None;
        failed.error = Some("x".into());
        let csv = summary_csv(&[row(0, 100.0), row(1, 50.0), failed]);
        let line = csv.lines().nth(1).unwrap();
        assert!(line.starts_with("empty,4,1,1,0,3,1,75,25,"), "{line}");
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn sweep_records_per_cell_errors() {
        let sc = Scenario {
            extent: 3.0,
            ..Scenario::default()
        };
        let p = random_policy(&sc.model, 0);
        let rows = sweep(&sc, &cfg(5, true), &[2, 400], &[0], &[Toggles::default()], &p);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].metrics.is_some());
        assert!(rows[1].error.is_some());
        let csv = metrics_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }
}
