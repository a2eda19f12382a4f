//! C ABI for the icbf-swarm safety filter, policies and episode runner.
//!
//! Every function returns an [`IcbfStatus`]. On failure the message is
//! kept per thread and can be read with [`icbf_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use icbf_swarm::config::ScenarioConfig;
use icbf_swarm::diffnet::{self, Observation, PolicyNet};
use icbf_swarm::dynamics::{DynamicsModel, ModelKind, NominalController, PdGains};
use icbf_swarm::safety::{self, Barriers, FilterConfig, HalfPlane, Scene};
use icbf_swarm::simulator;
use icbf_swarm::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcbfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Dimension = 4,
    Io = 5,
    Numerical = 6,
    Checkpoint = 7,
    Panic = 8,
    Other = 9,
}

/// Dynamics model selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcbfModelKind {
    DoubleIntegrator2d = 0,
    DoubleIntegrator3d = 1,
    PlanarUnicycle = 2,
}

/// Episode summary returned by [`icbf_run_episode`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IcbfMetrics {
    pub steps: usize,
    pub collision_avoidance_pct: f64,
    pub deadlock_count: usize,
    pub input_violation_count: usize,
    pub goal_reach_pct: f64,
    pub mpc_trigger_count: usize,
    pub safety_fault_count: usize,
    pub min_separation: f64,
}

/// Single-agent safety filter.
pub struct IcbfFilter {
    model: DynamicsModel,
    cfg: FilterConfig,
    r: f64,
}

/// Trained or random policy network.
pub struct IcbfPolicy {
    net: PolicyNet,
    gains: PdGains,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> IcbfStatus {
    match e {
        Error::Config(_) => IcbfStatus::InvalidArgument,
        Error::Parse { .. } => IcbfStatus::Parse,
        Error::Dimension { .. } => IcbfStatus::Dimension,
        Error::Io { .. } => IcbfStatus::Io,
        Error::NumericalFailure(_) | Error::NonFiniteState { .. } => IcbfStatus::Numerical,
        Error::Checkpoint(_) => IcbfStatus::Checkpoint,
        _ => IcbfStatus::Other,
    }
}

struct Fail(IcbfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IcbfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(IcbfStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording its error and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IcbfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IcbfStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IcbfStatus::Panic
        }
    }
}

unsafe fn read<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn write<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Length in bytes of the last error message on this thread, without the NUL.
#[no_mangle]
pub extern "C" fn icbf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the number of bytes written without the NUL.
#[no_mangle]
pub unsafe extern "C" fn icbf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icbf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `−log Σ e^{−β vₖ}` over `len` values.
#[no_mangle]
pub unsafe extern "C" fn icbf_combined_barrier(
    values: *const f64,
    len: usize,
    beta: f64,
    out: *mut f64,
) -> IcbfStatus {
    guard(|| {
        if len == 0 {
            return Err(invalid("at least one barrier value is required"));
        }
        if !(beta > 0.0) {
            return Err(invalid(format!("beta must be > 0, got {beta}")));
        }
        let v = read(values, len, "values")?;
        write(out, 1, "out")?[0] = safety::combined_barrier(v, beta);
        Ok(())
    })
}

/// Creates a filter with default settings for the given model.
/// `kind` is an [`IcbfModelKind`] value; `u_max` holds one bound per
/// control axis.
#[no_mangle]
pub unsafe extern "C" fn icbf_filter_new(
    kind: u32,
    dt: f64,
    u_max: *const f64,
    m: usize,
    r: f64,
    out: *mut *mut IcbfFilter,
) -> IcbfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match kind {
            k if k == IcbfModelKind::DoubleIntegrator2d as u32 => ModelKind::DoubleIntegrator2D,
            k if k == IcbfModelKind::DoubleIntegrator3d as u32 => ModelKind::DoubleIntegrator3D,
            k if k == IcbfModelKind::PlanarUnicycle as u32 => ModelKind::PlanarUnicycle,
            k => return Err(invalid(format!("unknown model kind {k}"))),
        };
        let model = DynamicsModel::new(kind, dt, read(u_max, m, "u_max")?.to_vec())?;
        if !(r > 0.0) {
            return Err(invalid(format!("r must be > 0, got {r}")));
        }
        *out = Box::into_raw(Box::new(IcbfFilter {
            model,
            cfg: FilterConfig::default(),
            r,
        }));
        Ok(())
    })
}

/// Creates a filter from a scenario TOML document (model, `r` and
/// `[episode.filter]` are used).
#[no_mangle]
pub unsafe extern "C" fn icbf_filter_from_toml(toml: *const c_char, out: *mut *mut IcbfFilter) -> IcbfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ScenarioConfig::from_toml(read_str(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(IcbfFilter {
            model: cfg.scenario.model,
            cfg: cfg.episode.filter,
            r: cfg.scenario.r,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn icbf_filter_free(filter: *mut IcbfFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// Sets the log-sum-exp sharpness and class-K gain.
#[no_mangle]
pub unsafe extern "C" fn icbf_filter_set_gains(filter: *mut IcbfFilter, beta: f64, lambda: f64) -> IcbfStatus {
    guard(|| {
        let f = filter.as_mut().ok_or_else(|| null("filter"))?;
        let cfg = FilterConfig {
            beta,
            lambda,
            ..f.cfg.clone()
        };
        cfg.validate()?;
        f.cfg = cfg;
        Ok(())
    })
}

/// State and control dimensions of the filter's model.
#[no_mangle]
pub unsafe extern "C" fn icbf_filter_dims(filter: *const IcbfFilter, n: *mut usize, m: *mut usize) -> IcbfStatus {
    guard(|| {
        let f = filter.as_ref().ok_or_else(|| null("filter"))?;
        if n.is_null() || m.is_null() {
            return Err(null("n or m"));
        }
        *n = f.model.state_dim();
        *m = f.model.control_dim();
        Ok(())
    })
}

/// Filters `target` for one agent.
///
/// `x` has `n` entries; `neighbors` holds `k` neighbor states row-major
/// (`k·n`); `wall_points` and `wall_normals` hold `w` obstacle half-planes
/// (`w·d` each, normals pointing away from the obstacle). `u_prev`,
/// `target` and `out_u` have `m` entries. `fault` is set to 1 when the
/// ICBF condition could not be met and the fallback control was used.
#[no_mangle]
pub unsafe extern "C" fn icbf_filter_apply(
    filter: *const IcbfFilter,
    x: *const f64,
    neighbors: *const f64,
    k: usize,
    wall_points: *const f64,
    wall_normals: *const f64,
    w: usize,
    u_prev: *const f64,
    target: *const f64,
    out_u: *mut f64,
    fault: *mut u8,
) -> IcbfStatus {
    guard(|| {
        let f = filter.as_ref().ok_or_else(|| null("filter"))?;
        let (n, m, d) = (f.model.state_dim(), f.model.control_dim(), f.model.pos_dim());
        let x = read(x, n, "x")?;
        let scene = Scene {
            x: x.to_vec(),
            neighbors: rows(read(neighbors, k * n, "neighbors")?, n),
            walls: rows(read(wall_points, w * d, "wall_points")?, d)
                .into_iter()
                .zip(rows(read(wall_normals, w * d, "wall_normals")?, d))
                .map(|(point, normal)| HalfPlane { point, normal })
                .collect(),
        };
        if !safety_inputs_finite(&scene) {
            return Err(invalid("states and walls must be finite"));
        }
        let bar = Barriers::new(&f.model, &f.cfg, f.r);
        let res = safety::mpc_icbf(&bar, &scene, read(u_prev, m, "u_prev")?, read(target, m, "target")?);
        write(out_u, m, "out_u")?.copy_from_slice(&res.u);
        if !fault.is_null() {
            *fault = res.fault.is_some() as u8;
        }
        Ok(())
    })
}

fn safety_inputs_finite(scene: &Scene) -> bool {
    let fin = |v: &[f64]| v.iter().all(|x| x.is_finite());
    fin(&scene.x)
        && scene.neighbors.iter().all(|v| fin(v))
        && scene.walls.iter().all(|h| fin(&h.point) && fin(&h.normal))
}

/// Loads the policy from a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn icbf_policy_load(path: *const c_char, out: *mut *mut IcbfPolicy) -> IcbfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = diffnet::load_checkpoint(Path::new(read_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(IcbfPolicy {
            net: ckpt.policy,
            gains: PdGains::default(),
        }));
        Ok(())
    })
}

/// Untrained policy for the filter's model, initialized from `seed`.
#[no_mangle]
pub unsafe extern "C" fn icbf_policy_random(
    filter: *const IcbfFilter,
    seed: u64,
    out: *mut *mut IcbfPolicy,
) -> IcbfStatus {
    guard(|| {
        let f = filter.as_ref().ok_or_else(|| null("filter"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(IcbfPolicy {
            net: simulator::random_policy(&f.model, seed),
            gains: PdGains::default(),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn icbf_policy_free(policy: *mut IcbfPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Policy control for one agent, in the layout of [`icbf_filter_apply`].
/// `goal` has `d` entries. The filter supplies the model.
#[no_mangle]
pub unsafe extern "C" fn icbf_policy_act(
    policy: *const IcbfPolicy,
    filter: *const IcbfFilter,
    x: *const f64,
    neighbors: *const f64,
    k: usize,
    goal: *const f64,
    out_u: *mut f64,
) -> IcbfStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let f = filter.as_ref().ok_or_else(|| null("filter"))?;
        let model = &f.model;
        let (n, m, d) = (model.state_dim(), model.control_dim(), model.pos_dim());
        let s = p.net.shape;
        if (s.n, s.m, s.d) != (n, m, d) {
            return Err(Fail(
                IcbfStatus::Dimension,
                format!("policy expects n={}, m={}, d={}; model has n={n}, m={m}, d={d}", s.n, s.m, s.d),
            ));
        }
        let x = read(x, n, "x")?;
        let goal = read(goal, d, "goal")?;
        let rel: Vec<Vec<f64>> = rows(read(neighbors, k * n, "neighbors")?, n)
            .into_iter()
            .map(|q| q.iter().zip(x).map(|(a, b)| a - b).collect())
            .collect();
        let obs = Observation::from_rows(n, &rel)?;
        let goal_rel: Vec<f64> = goal.iter().zip(model.position(x)).map(|(g, p)| g - p).collect();
        let nominal = NominalController::new(model, &p.gains).control(x, goal);
        let u = p.net.act(x, &obs, &goal_rel, &nominal.0)?;
        write(out_u, m, "out_u")?.copy_from_slice(&u);
        Ok(())
    })
}

/// Runs one episode described by a scenario TOML document.
/// `policy` may be null, in which case `[policy]` seeds a random policy.
#[no_mangle]
pub unsafe extern "C" fn icbf_run_episode(
    toml: *const c_char,
    policy: *const IcbfPolicy,
    out: *mut IcbfMetrics,
) -> IcbfStatus {
    guard(|| {
        let cfg = ScenarioConfig::from_toml(read_str(toml, "toml")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let world = cfg.scenario.build(cfg.scenario.agents, cfg.episode.seed)?;
        let random;
        let net = match policy.as_ref() {
            Some(p) => &p.net,
            None => {
                random = simulator::random_policy(&cfg.scenario.model, cfg.policy.seed);
                &random
            }
        };
        let m = simulator::run_episode(world, net, &cfg.episode)?.metrics;
        *out = IcbfMetrics {
            steps: m.steps,
            collision_avoidance_pct: m.collision_avoidance_pct,
            deadlock_count: m.deadlock_count,
            input_violation_count: m.input_violation_count,
            goal_reach_pct: m.goal_reach_pct,
            mpc_trigger_count: m.mpc_trigger_count,
            safety_fault_count: m.safety_fault_count,
            min_separation: m.min_separation,
        };
        Ok(())
    })
}
