//! Agent motion models `ẋ = f(x, u)`, the PD nominal controller `k(x)`,
//! its integral extension `φ = ∇ₓk · f`, and explicit Euler stepping.
//!
//! State layouts:
//! - double integrators: `[position (d), velocity (d)]`, control = acceleration (d)
//! - planar unicycle: `[px, py, heading]`, control = `[speed, turn rate]`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vec<f64>);

impl std::ops::Deref for AgentState {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for ControlInput {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for AgentState {
    fn from(v: Vec<f64>) -> Self {
        AgentState(v)
    }
}

impl From<Vec<f64>> for ControlInput {
    fn from(v: Vec<f64>) -> Self {
        ControlInput(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "double_integrator_2d")]
    DoubleIntegrator2D,
    #[serde(rename = "double_integrator_3d")]
    DoubleIntegrator3D,
    #[serde(rename = "planar_unicycle")]
    PlanarUnicycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    /// Integration step in seconds, `(0, 0.1]`.
    pub dt: f64,
    /// Per-axis actuation scale; the admissible set is `‖u ⊘ u_max‖₂ ≤ 1`.
    pub u_max: Vec<f64>,
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self {
            kind: ModelKind::DoubleIntegrator2D,
            dt: 0.05,
            u_max: vec![1.0, 1.0],
        }
    }
}

impl DynamicsModel {
    pub fn new(kind: ModelKind, dt: f64, u_max: Vec<f64>) -> Result<Self> {
        let model = Self { kind, dt, u_max };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::Config(format!("dt must lie in (0, 0.1], got {}", self.dt)));
        }
        if self.u_max.len() != self.control_dim() {
            return Err(Error::dim("u_max", self.control_dim(), self.u_max.len()));
        }
        if self.u_max.iter().any(|u| !(*u > 0.0) || !u.is_finite()) {
            return Err(Error::Config("u_max components must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::DoubleIntegrator2D => 4,
            ModelKind::DoubleIntegrator3D => 6,
            ModelKind::PlanarUnicycle => 3,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self.kind {
            ModelKind::DoubleIntegrator2D | ModelKind::PlanarUnicycle => 2,
            ModelKind::DoubleIntegrator3D => 3,
        }
    }

    pub fn pos_dim(&self) -> usize {
        match self.kind {
            ModelKind::DoubleIntegrator2D | ModelKind::PlanarUnicycle => 2,
            ModelKind::DoubleIntegrator3D => 3,
        }
    }

    pub fn position<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.pos_dim()]
    }

    /// Velocity components for second-order models; the unicycle's
    /// position rate depends directly on its control.
    pub fn velocity<'a>(&self, x: &'a [f64]) -> Option<&'a [f64]> {
        match self.kind {
            ModelKind::PlanarUnicycle => None,
            _ => {
                let d = self.pos_dim();
                Some(&x[d..2 * d])
            }
        }
    }

    /// Builds a state at rest at `pos`.
    pub fn rest_state(&self, pos: &[f64]) -> AgentState {
        let mut x = vec![0.0; self.state_dim()];
        x[..self.pos_dim()].copy_from_slice(pos);
        AgentState(x)
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::dim("state", self.state_dim(), x.len()));
        }
        if u.len() != self.control_dim() {
            return Err(Error::dim("control", self.control_dim(), u.len()));
        }
        Ok(())
    }

    /// `f(x, u)`.
    pub fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.f_into(x, u, &mut out);
        out
    }

    pub(crate) fn f_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self.kind {
            ModelKind::PlanarUnicycle => {
                let (s, c) = x[2].sin_cos();
                out[0] = u[0] * c;
                out[1] = u[0] * s;
                out[2] = u[1];
            }
            _ => {
                let d = self.pos_dim();
                out[..d].copy_from_slice(&x[d..2 * d]);
                out[d..2 * d].copy_from_slice(u);
            }
        }
    }

    /// Control-independent part of `f`: every model here is affine in `u`,
    /// `f(x, u) = drift(x) + B(x) u`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.f(x, &vec![0.0; self.control_dim()])
    }

    /// Input matrix `B(x) = ∂f/∂u`, `n × m`.
    pub fn input_matrix(&self, x: &[f64]) -> Mat {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut b = Mat::zeros(n, m);
        match self.kind {
            ModelKind::PlanarUnicycle => {
                let (s, c) = x[2].sin_cos();
                b[(0, 0)] = c;
                b[(1, 0)] = s;
                b[(2, 1)] = 1.0;
            }
            _ => {
                let d = self.pos_dim();
                for i in 0..d {
                    b[(d + i, i)] = 1.0;
                }
            }
        }
        b
    }

    /// Explicit Euler step `x + dt·f(x, u)`. No clamping of `u`.
    pub fn step(&self, state: &AgentState, u: &ControlInput) -> Result<AgentState> {
        self.check_dims(state, u)?;
        if !linalg::all_finite(u) {
            return Err(Error::Config("control input is not finite".into()));
        }
        let mut next = vec![0.0; self.state_dim()];
        self.step_into(state, u, &mut next);
        Ok(AgentState(next))
    }

    pub(crate) fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.f_into(x, u, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + self.dt * *o;
        }
    }

    /// `∂x⁺/∂u = dt·B(x)` for the Euler step; exact because `f` is affine in `u`.
    pub fn step_input_jacobian(&self, x: &[f64]) -> Mat {
        self.input_matrix(x).scaled(self.dt)
    }

    /// Whether `u` lies in the admissible set `‖u ⊘ u_max‖₂ ≤ 1` (with `tol` slack).
    pub fn input_admissible(&self, u: &[f64], tol: f64) -> bool {
        self.input_ratio(u) <= 1.0 + tol
    }

    /// `‖u ⊘ u_max‖₂`.
    pub fn input_ratio(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.u_max)
            .map(|(ui, mi)| (ui / mi) * (ui / mi))
            .sum::<f64>()
            .sqrt()
    }

    /// Radial projection onto the admissible input set.
    pub fn project_input(&self, u: &[f64]) -> Vec<f64> {
        let ratio = self.input_ratio(u);
        if ratio <= 1.0 {
            u.to_vec()
        } else {
            u.iter().map(|x| x / ratio).collect()
        }
    }
}

/// PD nominal controller gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    /// Position errors longer than this are rescaled to this length, which
    /// caps the cruise speed at `kp·max_goal_error/kd` for double integrators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_goal_error: Option<f64>,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp: 1.0,
            kd: 2.0,
            max_goal_error: Some(1.0),
        }
    }
}

/// Saturated goal error and its Jacobian w.r.t. the goal error itself.
fn saturated_error(err: &[f64], limit: Option<f64>) -> (Vec<f64>, Mat) {
    let d = err.len();
    let len = linalg::norm(err);
    match limit {
        Some(s) if len > s => {
            let hat: Vec<f64> = err.iter().map(|e| e / len).collect();
            let mut jac = Mat::identity(d);
            for i in 0..d {
                for j in 0..d {
                    jac[(i, j)] = (s / len) * (jac[(i, j)] - hat[i] * hat[j]);
                }
            }
            (hat.iter().map(|h| h * s).collect(), jac)
        }
        _ => (err.to_vec(), Mat::identity(d)),
    }
}

#[derive(Clone, Debug)]
pub struct NominalController<'a> {
    pub model: &'a DynamicsModel,
    pub gains: &'a PdGains,
}

impl<'a> NominalController<'a> {
    pub fn new(model: &'a DynamicsModel, gains: &'a PdGains) -> Self {
        Self { model, gains }
    }

    /// `k(x)`: PD law `kp·(goal − pos) − kd·vel` for double integrators.
    /// For the unicycle, `kp` scales forward speed by the along-heading
    /// error and `kd` scales turn rate by the cross-heading error.
    pub fn control(&self, x: &[f64], goal: &[f64]) -> ControlInput {
        let pos = self.model.position(x);
        let err = linalg::sub(goal, pos);
        let (es, _) = saturated_error(&err, self.gains.max_goal_error);
        let u = match self.model.kind {
            ModelKind::PlanarUnicycle => {
                let (s, c) = x[2].sin_cos();
                vec![
                    self.gains.kp * (es[0] * c + es[1] * s),
                    self.gains.kd * (-es[0] * s + es[1] * c),
                ]
            }
            _ => {
                let vel = self.model.velocity(x).expect("second-order model");
                es.iter()
                    .zip(vel)
                    .map(|(e, v)| self.gains.kp * e - self.gains.kd * v)
                    .collect()
            }
        };
        ControlInput(u)
    }

    /// `∂k/∂x`, `m × n`.
    pub fn jacobian(&self, x: &[f64], goal: &[f64]) -> Mat {
        let m = self.model;
        let d = m.pos_dim();
        let pos = m.position(x);
        let err = linalg::sub(goal, pos);
        let (es, jsat) = saturated_error(&err, self.gains.max_goal_error);
        let mut jac = Mat::zeros(m.control_dim(), m.state_dim());
        match m.kind {
            ModelKind::PlanarUnicycle => {
                let (s, c) = x[2].sin_cos();
                let head = [c, s];
                let perp = [-s, c];
                // ∂es/∂pos = −jsat (symmetric)
                for j in 0..d {
                    let dh: f64 = (0..d).map(|i| jsat[(i, j)] * head[i]).sum();
                    let dp: f64 = (0..d).map(|i| jsat[(i, j)] * perp[i]).sum();
                    jac[(0, j)] = -self.gains.kp * dh;
                    jac[(1, j)] = -self.gains.kd * dp;
                }
                jac[(0, 2)] = self.gains.kp * linalg::dot(&es, &perp);
                jac[(1, 2)] = -self.gains.kd * linalg::dot(&es, &head);
            }
            _ => {
                for i in 0..d {
                    for j in 0..d {
                        jac[(i, j)] = -self.gains.kp * jsat[(i, j)];
                    }
                    jac[(i, d + i)] = -self.gains.kd;
                }
            }
        }
        jac
    }

    /// Integral controller `φ(x, u) = ∇ₓk(x) · f(x, u)`.
    pub fn integral_phi(&self, x: &[f64], u: &[f64], goal: &[f64]) -> Vec<f64> {
        self.jacobian(x, goal).matvec(&self.model.f(x, u))
    }

    /// `φ` is affine in `u`: returns `(c, D)` with `φ = c + D u`.
    pub fn phi_affine(&self, x: &[f64], goal: &[f64]) -> (Vec<f64>, Mat) {
        let kx = self.jacobian(x, goal);
        let c = kx.matvec(&self.model.drift(x));
        let d = kx.matmul(&self.model.input_matrix(x));
        (c, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn di2(dt: f64) -> DynamicsModel {
        DynamicsModel::new(ModelKind::DoubleIntegrator2D, dt, vec![1.0, 1.0]).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zero_input_fixed_point() {
        let m = di2(0.05);
        let x = m.step(&AgentState(vec![0.0; 4]), &ControlInput(vec![0.0, 0.0])).unwrap();
        assert_eq!(x.0, vec![0.0; 4]);
    }

    #[test]
    fn constant_velocity_drift() {
        let m = di2(0.1);
        let x = m
            .step(&AgentState(vec![0.0, 0.0, 1.0, 0.0]), &ControlInput(vec![0.0, 0.0]))
            .unwrap();
        assert_close(&x, &[0.1, 0.0, 1.0, 0.0], 1e-15);
    }

    #[test]
    fn acceleration_enters_velocity_only() {
        let m = di2(0.1);
        let x = m.step(&AgentState(vec![0.0; 4]), &ControlInput(vec![2.0, 0.0])).unwrap();
        assert_close(&x, &[0.0, 0.0, 0.2, 0.0], 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = di2(0.05);
        let err = m.step(&AgentState(vec![0.0; 4]), &ControlInput(vec![0.0; 3]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = m.step(&AgentState(vec![0.0; 6]), &ControlInput(vec![0.0; 2]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn model_validation() {
        assert!(DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.2, vec![1.0, 1.0]).is_err());
        assert!(DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![1.0, 0.0]).is_err());
        assert!(DynamicsModel::new(ModelKind::DoubleIntegrator3D, 0.05, vec![1.0; 3]).is_ok());
    }

    #[test]
    fn nominal_examples() {
        let m = di2(0.05);
        let g = PdGains { kp: 1.0, kd: 2.0, max_goal_error: None };
        let k = NominalController::new(&m, &g);
        assert_close(&k.control(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0]), &[0.0, 0.0], 0.0);
        assert_close(&k.control(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0]), &[-2.0, 0.0], 1e-15);
        let g = PdGains { kp: 1.0, kd: 0.0, max_goal_error: None };
        let k = NominalController::new(&m, &g);
        assert_close(&k.control(&[0.0, 0.0, 0.0, 0.0], &[1.0, 0.0]), &[1.0, 0.0], 1e-15);
    }

    #[test]
    fn saturation_caps_error_length() {
        let m = di2(0.05);
        let g = PdGains { kp: 1.0, kd: 2.0, max_goal_error: Some(1.0) };
        let k = NominalController::new(&m, &g);
        let u = k.control(&[0.0, 0.0, 0.0, 0.0], &[3.0, 4.0]);
        assert_close(&u, &[0.6, 0.8], 1e-15);
    }

    #[test]
    fn integral_phi_examples() {
        let m = di2(0.05);
        let g = PdGains { kp: 1.0, kd: 0.0, max_goal_error: None };
        let k = NominalController::new(&m, &g);
        assert_close(&k.integral_phi(&[0.3, -0.2, 0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]), &[0.0, 0.0], 0.0);
        assert_close(&k.integral_phi(&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0], &[0.5, 0.0]), &[-1.0, 0.0], 1e-15);
        let g = PdGains { kp: 0.0, kd: 1.0, max_goal_error: None };
        let k = NominalController::new(&m, &g);
        assert_close(&k.integral_phi(&[0.0, 0.0, 0.0, 0.0], &[3.0, 0.0], &[0.5, 0.0]), &[-3.0, 0.0], 1e-15);
    }

    /// Central difference of `k` along the flow `x ± ε f(x, u)`.
    fn fd_phi(k: &NominalController, x: &[f64], u: &[f64], goal: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        let f = k.model.f(x, u);
        let xp: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + eps * b).collect();
        let xm: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a - eps * b).collect();
        let kp = k.control(&xp, goal);
        let km = k.control(&xm, goal);
        kp.iter().zip(km.iter()).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = linalg::norm(&linalg::sub(a, b));
        num / (1.0 + linalg::norm(b))
    }

    #[test]
    fn integral_phi_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let models = [
            DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![1.0; 2]).unwrap(),
            DynamicsModel::new(ModelKind::DoubleIntegrator3D, 0.05, vec![1.0; 3]).unwrap(),
            DynamicsModel::new(ModelKind::PlanarUnicycle, 0.05, vec![0.2, 0.21]).unwrap(),
        ];
        let gains = PdGains { kp: 1.3, kd: 0.7, max_goal_error: Some(1.0) };
        for m in &models {
            let k = NominalController::new(m, &gains);
            for _ in 0..200 {
                let x: Vec<f64> = (0..m.state_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let u: Vec<f64> = (0..m.control_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let goal: Vec<f64> = (0..m.pos_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let err = linalg::distance(&goal, m.position(&x));
                if (err - 1.0).abs() < 1e-3 {
                    continue; // saturation kink
                }
                let phi = k.integral_phi(&x, &u, &goal);
                let fd = fd_phi(&k, &x, &u, &goal);
                assert!(rel_err(&phi, &fd) < 1e-6, "{phi:?} vs {fd:?}");
                let (c, d) = k.phi_affine(&x, &goal);
                let affine = linalg::add(&c, &d.matvec(&u));
                assert!(rel_err(&affine, &phi) < 1e-12);
            }
        }
    }

    #[test]
    fn input_projection_is_radial() {
        let m = DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![0.5, 0.5]).unwrap();
        let u = m.project_input(&[1.0, 0.0]);
        assert_close(&u, &[0.5, 0.0], 1e-15);
        assert!(m.input_admissible(&u, 1e-12));
        assert!(!m.input_admissible(&[0.4, 0.4], 0.0));
        assert_eq!(m.project_input(&[0.1, 0.2]), vec![0.1, 0.2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn euler_step_is_linear_in_control(
                x in proptest::collection::vec(-5.0..5.0f64, 4),
                u1 in proptest::collection::vec(-3.0..3.0f64, 2),
                u2 in proptest::collection::vec(-3.0..3.0f64, 2),
                a in -2.0..2.0f64,
                b in -2.0..2.0f64,
            ) {
                let m = DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![1.0; 2]).unwrap();
                let x = AgentState(x);
                let step = |u: Vec<f64>| m.step(&x, &ControlInput(u)).unwrap();
                let base = step(vec![0.0, 0.0]);
                let mix = step(vec![a * u1[0] + b * u2[0], a * u1[1] + b * u2[1]]);
                let s1 = step(u1.clone());
                let s2 = step(u2.clone());
                for i in 2..4 {
                    let lhs = mix[i] - base[i];
                    let rhs = a * (s1[i] - base[i]) + b * (s2[i] - base[i]);
                    prop_assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }
}
