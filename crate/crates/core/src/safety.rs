//! Collision prediction, barrier terms and the MPC safety filters.
//!
//! Two filters share one sequential cutting-plane driver:
//! - [`mpc_icbf`] aggregates every barrier into the log-sum-exp barrier
//!   `h_c = −log Σ e^{−βhₖ}` and imposes a single discrete ICBF condition.
//! - [`mpc_trivial`] imposes one condition per state barrier plus one
//!   input-barrier row per neighbor; it is the timing baseline.
//!
//! State barriers for double integrators use the braking-distance form
//! `h = g(‖Δp‖ − D) + d/dt‖Δp‖`, where `g(s) = √(2as)` is the speed from
//! which a deceleration `a` stops within `s`. One Euler step leaves the
//! positions independent of the control, so each next-step barrier is
//! affine in `u`.

use serde::{Deserialize, Serialize};

use crate::diffnet::{IcbfNet, Observation, Wrt};
use crate::dynamics::DynamicsModel;
use crate::environment::{Obstacle, SpatialIndex, World};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::qp::{self, QpProblem, QpStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Log-sum-exp sharpness.
    pub beta: f64,
    /// Class-K gain, `α(h) = λh`.
    pub lambda: f64,
    /// Extra clearance added to `2r` inside the barriers, metres.
    pub barrier_margin: f64,
    /// Fraction of the actuation bound budgeted for braking.
    pub brake_fraction: f64,
    /// Smoothing speed for `g` near contact, m/s.
    pub brake_smoothing: f64,
    /// Prediction window, steps.
    pub t_pred: usize,
    /// Trigger distance is `2r·(1 + trigger_margin)`.
    pub trigger_margin: f64,
    /// Also trigger when a state barrier at the current state drops below this.
    pub barrier_trigger: f64,
    /// MPC horizon; only the one-step form is implemented.
    pub horizon: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            beta: 50.0,
            lambda: 1.0,
            barrier_margin: 0.03,
            brake_fraction: 0.8,
            brake_smoothing: 0.05,
            t_pred: 10,
            trigger_margin: 0.1,
            barrier_trigger: 0.3,
            horizon: 1,
            max_iterations: 30,
            tolerance: 1e-7,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0) {
            return bad(format!("filter.beta must be > 0, got {}", self.beta));
        }
        if !(self.lambda > 0.0) {
            return bad(format!("filter.lambda must be > 0, got {}", self.lambda));
        }
        if self.horizon != 1 {
            return bad(format!("filter.horizon = {} is not supported; only 1", self.horizon));
        }
        if self.t_pred == 0 {
            return bad("filter.t_pred must be >= 1".into());
        }
        if !(self.brake_fraction > 0.0 && self.brake_fraction < 1.0) {
            return bad("filter.brake_fraction must lie in (0, 1)".into());
        }
        if !(self.brake_smoothing > 0.0)
            || self.barrier_margin < 0.0
            || self.trigger_margin < 0.0
            || !(self.barrier_trigger >= 0.0)
        {
            return bad("filter margins must be >= 0 and brake_smoothing > 0".into());
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return bad("filter.max_iterations and filter.tolerance must be positive".into());
        }
        Ok(())
    }
}

/// `−log Σ e^{−βhₖ}` via the max-shift.
pub fn combined_barrier(values: &[f64], beta: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|h| (-beta * (h - m)).exp()).sum();
    beta * m - s.ln()
}

/// Softmin weights `wₖ`, so that `∂h_c/∂hₖ = β wₖ`.
pub fn softmin_weights(values: &[f64], beta: f64) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = values.iter().map(|h| (-beta * (h - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Component barriers of one agent: state terms (neighbors, obstacles) and input terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BarrierTerms {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

impl BarrierTerms {
    pub fn all(&self) -> Vec<f64> {
        let mut v = self.state.clone();
        v.extend_from_slice(&self.input);
        v
    }

    pub fn combined(&self, beta: f64) -> f64 {
        combined_barrier(&self.all(), beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Membership {
    pub in_sx: bool,
    pub in_su: bool,
    pub in_sc: bool,
}

pub fn membership(terms: &BarrierTerms, beta: f64) -> Membership {
    Membership {
        in_sx: terms.state.iter().all(|h| *h >= 0.0),
        in_su: terms.input.iter().all(|h| *h >= 0.0),
        in_sc: terms.combined(beta) >= 0.0,
    }
}

/// Supporting half-plane of an obstacle at the point nearest the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfPlane {
    pub point: Vec<f64>,
    /// Unit normal pointing from the obstacle towards the agent.
    pub normal: Vec<f64>,
}

impl HalfPlane {
    pub fn facing(obstacle: &Obstacle, p: &[f64]) -> Self {
        let point = obstacle.nearest_point(p);
        let diff = linalg::sub(p, &point);
        let len = linalg::norm(&diff);
        let normal = if len > 1e-12 {
            linalg::scale(&diff, 1.0 / len)
        } else {
            // Inside the obstacle: push out through the nearest face.
            let mut n = vec![0.0; p.len()];
            match obstacle {
                Obstacle::Disk { center, .. } => {
                    let d = linalg::sub(p, center);
                    let l = linalg::norm(&d);
                    if l > 1e-12 {
                        n = linalg::scale(&d, 1.0 / l);
                    } else {
                        n[0] = 1.0;
                    }
                }
                Obstacle::Block { min, max } => {
                    let mut best = (f64::INFINITY, 0, 1.0);
                    for k in 0..p.len() {
                        if p[k] - min[k] < best.0 {
                            best = (p[k] - min[k], k, -1.0);
                        }
                        if max[k] - p[k] < best.0 {
                            best = (max[k] - p[k], k, 1.0);
                        }
                    }
                    n[best.1] = best.2;
                }
            }
            n
        };
        Self { point, normal }
    }
}

/// What one agent knows when filtering: its state, neighbor states within
/// `R` and obstacle half-planes within `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub x: Vec<f64>,
    pub neighbors: Vec<Vec<f64>>,
    pub walls: Vec<HalfPlane>,
}

impl Scene {
    pub fn gather(world: &World, index: &SpatialIndex, i: usize) -> Result<Scene> {
        let nb = index.neighbors(i, world)?;
        let x = world.states()[i].0.clone();
        let p = world.position(i);
        Ok(Scene {
            neighbors: nb.agents.iter().map(|a| world.states()[a.id].0.clone()).collect(),
            walls: nb
                .obstacles
                .iter()
                .map(|o| HalfPlane::facing(&world.obstacles[o.obstacle], p))
                .collect(),
            x,
        })
    }
}

/// `g(s)`: smoothed braking speed; linear below contact so it stays C¹.
fn brake_speed(s: f64, a: f64, eps: f64) -> (f64, f64) {
    if s >= 0.0 {
        let root = (2.0 * a * s + eps * eps).sqrt();
        (root - eps, a / root)
    } else {
        (a / eps * s, a / eps)
    }
}

/// Barrier definitions for one model, radius and filter configuration.
#[derive(Clone, Debug)]
pub struct Barriers<'a> {
    pub model: &'a DynamicsModel,
    pub cfg: &'a FilterConfig,
    /// Keep-out distance `D = 2r + margin`.
    pub clearance: f64,
}

impl<'a> Barriers<'a> {
    pub fn new(model: &'a DynamicsModel, cfg: &'a FilterConfig, r: f64) -> Self {
        Self {
            model,
            cfg,
            clearance: 2.0 * r + cfg.barrier_margin,
        }
    }

    fn accel_bound(&self) -> f64 {
        self.model.u_max.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pair barrier `H(xⁱ, xʲ)` and `∂H/∂xⁱ`.
    pub fn pair(&self, xi: &[f64], xj: &[f64]) -> (f64, Vec<f64>) {
        let m = self.model;
        let d = m.pos_dim();
        let dp = linalg::sub(m.position(xj), m.position(xi));
        let dist = linalg::norm(&dp).max(1e-9);
        let mut grad = vec![0.0; m.state_dim()];
        match m.velocity(xi) {
            Some(vi) => {
                let vj = m.velocity(xj).expect("same model");
                let dv = linalg::sub(vj, vi);
                let rate = linalg::dot(&dp, &dv) / dist;
                let a = self.cfg.brake_fraction * self.accel_bound();
                let (g, dg) = brake_speed(dist - self.clearance, a, self.cfg.brake_smoothing);
                for k in 0..d {
                    let n = dp[k] / dist;
                    // ∂/∂pᵢ of g(‖Δp‖) and of Δp·Δv/‖Δp‖
                    grad[k] = -(dg * n + (dv[k] - rate * n) / dist);
                    grad[d + k] = -n;
                }
                (g + rate, grad)
            }
            None => {
                for k in 0..d {
                    grad[k] = -dp[k] / dist;
                }
                (dist - self.clearance, grad)
            }
        }
    }

    /// Half-plane barrier for an obstacle and `∂H/∂x`.
    pub fn wall(&self, x: &[f64], hp: &HalfPlane) -> (f64, Vec<f64>) {
        let m = self.model;
        let d = m.pos_dim();
        let s = linalg::dot(&hp.normal, &linalg::sub(m.position(x), &hp.point));
        let mut grad = vec![0.0; m.state_dim()];
        match m.velocity(x) {
            Some(v) => {
                let a = self.cfg.brake_fraction * self.accel_bound();
                let (g, dg) = brake_speed(s - self.clearance, a, self.cfg.brake_smoothing);
                for k in 0..d {
                    grad[k] = dg * hp.normal[k];
                    grad[d + k] = hp.normal[k];
                }
                (g + linalg::dot(&hp.normal, v), grad)
            }
            None => {
                grad[..d].copy_from_slice(&hp.normal);
                (s - self.clearance, grad)
            }
        }
    }

    /// `1 − ‖u ⊘ u_max‖²` and its gradient.
    pub fn input(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let um = &self.model.u_max;
        let v = 1.0 - u.iter().zip(um).map(|(a, b)| (a / b).powi(2)).sum::<f64>();
        (v, u.iter().zip(um).map(|(a, b)| -2.0 * a / (b * b)).collect())
    }

    /// Terms at the current state and previous control.
    pub fn current(&self, scene: &Scene, u_prev: &[f64]) -> BarrierTerms {
        let mut state: Vec<f64> = scene.neighbors.iter().map(|xj| self.pair(&scene.x, xj).0).collect();
        state.extend(scene.walls.iter().map(|w| self.wall(&scene.x, w).0));
        BarrierTerms {
            state,
            input: vec![self.input(u_prev).0],
        }
    }

    /// Whether any state barrier is below `barrier_trigger` right now.
    pub fn alert(&self, scene: &Scene) -> bool {
        let t = self.cfg.barrier_trigger;
        scene.neighbors.iter().any(|xj| self.pair(&scene.x, xj).0 < t)
            || scene.walls.iter().any(|w| self.wall(&scene.x, w).0 < t)
    }

    /// Next-step state terms as functions of the agent's control: values
    /// and `∇ᵤ`. Neighbors are assumed to coast for the step, so the agent
    /// takes the whole change of each pair barrier on itself.
    pub fn next_state_terms(&self, scene: &Scene, u: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let m = self.model;
        let zero = vec![0.0; m.control_dim()];
        let mut xi = vec![0.0; m.state_dim()];
        m.step_into(&scene.x, u, &mut xi);
        let jac = m.step_input_jacobian(&scene.x);
        let mut values = Vec::with_capacity(scene.neighbors.len() + scene.walls.len());
        let mut grads = Vec::with_capacity(values.capacity());
        let mut xj = vec![0.0; m.state_dim()];
        for nbr in &scene.neighbors {
            m.step_into(nbr, &zero, &mut xj);
            let (h, g) = self.pair(&xi, &xj);
            values.push(h);
            grads.push(jac.tmatvec(&g));
        }
        for w in &scene.walls {
            let (h, g) = self.wall(&xi, w);
            values.push(h);
            grads.push(jac.tmatvec(&g));
        }
        (values, grads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u: Vec<f64>,
    /// Cutting-plane iterations used.
    pub iterations: usize,
    /// Set when the filter fell back to [`safest_control`].
    pub fault: Option<String>,
}

/// Control that stops a double integrator as fast as the input set allows.
pub fn emergency_brake(model: &DynamicsModel, x: &[f64]) -> Vec<f64> {
    match model.velocity(x) {
        Some(v) => model.project_input(&linalg::scale(v, -1.0 / model.dt)),
        None => vec![0.0; model.control_dim()],
    }
}

/// A smooth constraint `c(u) ≥ rhs` linearized on demand.
struct Constraint {
    value: f64,
    grad: Vec<f64>,
    rhs: f64,
}

/// Projects `target` onto `{u : cₖ(u) ≥ rhsₖ} ∩ box` by accumulating tangent cuts.
fn cutting_planes(
    target: &[f64],
    u_max: &[f64],
    cfg: &FilterConfig,
    closed_form: bool,
    mut eval: impl FnMut(&[f64]) -> Vec<Constraint>,
) -> std::result::Result<(Vec<f64>, usize), String> {
    let m = target.len();
    let lo: Vec<f64> = u_max.iter().map(|x| -x).collect();
    let mut z: Vec<f64> = target.iter().zip(u_max).map(|(t, b)| t.clamp(-b, *b)).collect();
    let mut problem = QpProblem::new(target.to_vec()).with_bounds(lo, u_max.to_vec());
    for it in 0..cfg.max_iterations {
        let cons = eval(&z);
        let violated = cons
            .iter()
            .any(|c| c.value < c.rhs - cfg.tolerance * (1.0 + c.rhs.abs()));
        if !violated {
            return Ok((z, it));
        }
        for c in &cons {
            // c(z) + g·(u − z) ≥ rhs  ⇔  −g·u ≤ c(z) − g·z − rhs
            let neg: Vec<f64> = c.grad.iter().map(|g| -g).collect();
            problem.push_row(&neg, c.value - linalg::dot(&c.grad, &z) - c.rhs);
        }
        if closed_form && problem.a.rows == 1 {
            // Single half-space: min-norm correction, accepted when it stays in the box.
            let p: Vec<f64> = problem.a.row(0).iter().map(|g| -g).collect();
            let q = -problem.b[0] - linalg::dot(&p, target);
            if let Ok(v) = qp::min_norm_halfspace(&p, q) {
                let cand = linalg::add(target, &v);
                if cand.iter().zip(u_max).all(|(c, b)| c.abs() <= *b) {
                    z = cand;
                    continue;
                }
            }
        }
        let sol = qp::solve(&problem).map_err(|e| e.to_string())?;
        if sol.status == QpStatus::Infeasible {
            return Err(format!("QP infeasible after {} cuts", problem.a.rows));
        }
        debug_assert!(sol.z.len() == m);
        z = sol.z;
    }
    let cons = eval(&z);
    if cons
        .iter()
        .all(|c| c.value >= c.rhs - cfg.tolerance * (1.0 + c.rhs.abs()))
    {
        return Ok((z, cfg.max_iterations));
    }
    Err(format!("no feasible point after {} iterations", cfg.max_iterations))
}

/// Admissible control maximizing the next-step combined state barrier,
/// found by projected ascent from the brake and from `target`. Used when
/// the ICBF condition cannot be met; reduces to [`emergency_brake`] when
/// nothing is in range.
pub fn safest_control(bar: &Barriers, scene: &Scene, target: &[f64]) -> Vec<f64> {
    let model = bar.model;
    let brake = emergency_brake(model, &scene.x);
    if scene.neighbors.is_empty() && scene.walls.is_empty() {
        return brake;
    }
    let beta = bar.cfg.beta;
    let score = |u: &[f64]| {
        let (values, grads) = bar.next_state_terms(scene, u);
        let w = softmin_weights(&values, beta);
        let mut grad = vec![0.0; u.len()];
        for (wk, gk) in w.iter().zip(&grads) {
            linalg::axpy(*wk, gk, &mut grad);
        }
        (combined_barrier(&values, beta), grad)
    };
    let scale = model.u_max.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in [brake, model.project_input(target)] {
        let (mut f, mut g) = score(&start);
        let mut u = start;
        let mut step = 0.5 * scale;
        for _ in 0..60 {
            let gn = linalg::norm(&g);
            if gn < 1e-12 || step < 1e-6 * scale {
                break;
            }
            let cand = model.project_input(&linalg::add(&u, &linalg::scale(&g, step / gn)));
            let (fc, gc) = score(&cand);
            if fc > f {
                (u, f, g) = (cand, fc, gc);
                step *= 1.5;
            } else {
                step *= 0.5;
            }
        }
        if best.as_ref().map_or(true, |b| f > b.0) {
            best = Some((f, u));
        }
    }
    best.expect("two starts").1
}

fn fallback(bar: &Barriers, scene: &Scene, target: &[f64], reason: String) -> FilterResult {
    FilterResult {
        u: safest_control(bar, scene, target),
        iterations: bar.cfg.max_iterations,
        fault: Some(reason),
    }
}

/// Single-constraint MPC-ICBF:
/// `min ‖u − target‖²  s.t.  h_c(x⁺(u), u) ≥ (1 − λ dt) h_c(x, u_prev),  |u| ≤ u_max`.
pub fn mpc_icbf(bar: &Barriers, scene: &Scene, u_prev: &[f64], target: &[f64]) -> FilterResult {
    let cfg = bar.cfg;
    let model = bar.model;
    let beta = cfg.beta;
    let rhs = (1.0 - cfg.lambda * model.dt) * bar.current(scene, u_prev).combined(beta);
    let eval = |u: &[f64]| {
        let (mut values, mut grads) = bar.next_state_terms(scene, u);
        let (hu, gu) = bar.input(u);
        values.push(hu);
        grads.push(gu);
        let w = softmin_weights(&values, beta);
        let mut grad = vec![0.0; u.len()];
        for (wk, gk) in w.iter().zip(&grads) {
            linalg::axpy(beta * wk, gk, &mut grad);
        }
        vec![Constraint {
            value: combined_barrier(&values, beta),
            grad,
            rhs,
        }]
    };
    match cutting_planes(target, &model.u_max, cfg, true, eval) {
        Ok((u, iterations)) => FilterResult {
            u,
            iterations,
            fault: None,
        },
        Err(reason) => fallback(bar, scene, target, reason),
    }
}

/// One condition per state barrier plus one input row per neighbor.
pub fn mpc_trivial(bar: &Barriers, scene: &Scene, u_prev: &[f64], target: &[f64]) -> FilterResult {
    let cfg = bar.cfg;
    let model = bar.model;
    let decay = 1.0 - cfg.lambda * model.dt;
    let now = bar.current(scene, u_prev);
    let copies = scene.neighbors.len().max(1);
    let eval = |u: &[f64]| {
        let (values, grads) = bar.next_state_terms(scene, u);
        let mut cons: Vec<Constraint> = values
            .into_iter()
            .zip(grads)
            .zip(&now.state)
            .map(|((value, grad), h)| Constraint {
                value,
                grad,
                rhs: decay * h,
            })
            .collect();
        let (hu, gu) = bar.input(u);
        for _ in 0..copies {
            cons.push(Constraint {
                value: hu,
                grad: gu.clone(),
                rhs: decay * now.input[0],
            });
        }
        cons
    };
    match cutting_planes(target, &model.u_max, cfg, false, eval) {
        Ok((u, iterations)) => FilterResult {
            u,
            iterations,
            fault: None,
        },
        Err(reason) => fallback(bar, scene, target, reason),
    }
}

/// Per-term ICBF rows `A u ≤ b` linearized at `z`, each with its own decay,
/// plus an inner polygon of the input set so every feasible `u` is admissible.
pub fn constraint_rows(bar: &Barriers, scene: &Scene, u_prev: &[f64], z: &[f64]) -> (Mat, Vec<f64>) {
    let model = bar.model;
    let m = model.control_dim();
    let decay = 1.0 - bar.cfg.lambda * model.dt;
    let now = bar.current(scene, u_prev);
    let (values, grads) = bar.next_state_terms(scene, z);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut b = Vec::new();
    for ((v, g), h) in values.iter().zip(&grads).zip(&now.state) {
        // v + g·(u − z) ≥ decay·h
        rows.push(g.iter().map(|x| -x).collect());
        b.push(v - linalg::dot(g, z) - decay * h);
    }
    let um = &model.u_max;
    if m == 2 {
        let sides = 8;
        let apothem = (std::f64::consts::PI / sides as f64).cos();
        for k in 0..sides {
            let a = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
            rows.push(vec![a.cos() / um[0], a.sin() / um[1]]);
            b.push(apothem);
        }
    } else {
        let s = 1.0 / (m as f64).sqrt();
        for k in 0..m {
            for sign in [1.0, -1.0] {
                let mut row = vec![0.0; m];
                row[k] = sign / um[k];
                rows.push(row);
                b.push(s);
            }
        }
    }
    (Mat::from_rows(&rows), b)
}

/// Rolls every agent forward under `policy` for `t_pred` steps and flags
/// each agent that comes within `2r·(1 + trigger_margin)` of another agent
/// or an obstacle. The current state counts as step 0.
pub fn predict_collisions(
    world: &World,
    cfg: &FilterConfig,
    mut policy: impl FnMut(&World, &SpatialIndex, usize) -> Result<Vec<f64>>,
) -> Result<Vec<bool>> {
    let n = world.num_agents();
    let threshold = 2.0 * world.r * (1.0 + cfg.trigger_margin);
    let mut flags = vec![false; n];
    if n == 0 {
        return Ok(flags);
    }
    // Agents that cannot reach anything within the window are skipped.
    let horizon = cfg.t_pred as f64 * world.model.dt;
    let accel = linalg::norm(&world.model.u_max);
    let reach: Vec<f64> = (0..n)
        .map(|i| {
            let speed = world.model.velocity(&world.states()[i]).map_or_else(
                || linalg::norm(&world.model.u_max),
                linalg::norm,
            );
            let a = if world.model.velocity(&world.states()[i]).is_some() { accel } else { 0.0 };
            speed * horizon + 0.5 * a * horizon * horizon
        })
        .collect();
    let max_reach = reach.iter().copied().fold(0.0, f64::max);
    let index = world.build_index();
    let mut candidate = false;
    for i in 0..n {
        let p = world.position(i);
        if world.obstacle_clearance(p) < threshold + reach[i] {
            candidate = true;
            break;
        }
        let near = index
            .query_agents(p, Some(i))
            .iter()
            .any(|&(j, d)| d < threshold + reach[i] + reach[j]);
        if near || threshold + 2.0 * max_reach > world.sensing_radius {
            candidate = true;
            break;
        }
    }
    if !candidate {
        return Ok(flags);
    }

    let mut sim = world.clone();
    let mut index = index;
    check_contacts(&sim, &index, threshold, &mut flags);
    for _ in 0..cfg.t_pred {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let u = policy(&sim, &index, i)?;
            next.push(sim.model.step(&sim.states()[i], &u.into())?);
        }
        sim.set_states(next)?;
        index = sim.build_index();
        check_contacts(&sim, &index, threshold, &mut flags);
    }
    Ok(flags)
}

fn check_contacts(world: &World, index: &SpatialIndex, threshold: f64, flags: &mut [bool]) {
    for i in 0..world.num_agents() {
        let p = world.position(i);
        for (j, d) in index.query_agents(p, Some(i)) {
            if d < threshold {
                flags[i] = true;
                flags[j] = true;
            }
        }
        if world.obstacle_clearance(p) < threshold {
            flags[i] = true;
        }
    }
}

/// Whether agent `id` is predicted to come into contact within the window.
pub fn predict_collision(
    world: &World,
    cfg: &FilterConfig,
    id: usize,
    policy: impl FnMut(&World, &SpatialIndex, usize) -> Result<Vec<f64>>,
) -> Result<bool> {
    Ok(predict_collisions(world, cfg, policy)?[id])
}

/// Min-norm ICBF filter on the control rate:
/// `v⋆ = argmin ‖v‖² s.t. pᵀv ≥ q` with `p = ∇ᵤh`,
/// `q = −(∇ₓh·f(x,u) + ∇ᵤh·φ + λh)`.
pub fn min_norm_filter(
    model: &DynamicsModel,
    icbf: &IcbfNet,
    x: &[f64],
    obs: &Observation,
    u: &[f64],
    phi: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    let trace = icbf.trace(x, obs, u)?;
    let h = trace.value();
    let gx = trace.grad_inputs(Wrt::X)?;
    let gu = trace.grad_inputs(Wrt::U)?;
    let f = model.f(x, u);
    let q = -(linalg::dot(&gx, &f) + linalg::dot(&gu, phi) + lambda * h);
    qp::min_norm_halfspace(&gu, q)
}
