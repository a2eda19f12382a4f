//! Deadlock detection and momentum-based escape.
//!
//! A deadlocked agent replaces its control with `u_prev − w`, where
//! `w ← γw + η·∇c` accumulates the gradient of `c(x) = ‖π(x) − k(x)‖²`,
//! then projects the result back onto the per-neighbor safety rows.

use serde::{Deserialize, Serialize};

use crate::diffnet::{Observation, PolicyNet, Tape, Tensor};
use crate::dynamics::{DynamicsModel, ModelKind, NominalController, PdGains};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::qp::{self, QpProblem, QpStatus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeadlockConfig {
    /// Control-norm threshold `ε`.
    pub epsilon: f64,
    /// Momentum decay `γ`. 0.8 is the other commonly quoted value.
    pub gamma: f64,
    /// Step size `η`.
    pub eta: f64,
    /// Agents this close to their goal are arrived, not deadlocked.
    pub goal_tolerance: f64,
    /// Resolve every agent once any agent is detected.
    pub global_trigger: bool,
    /// Consecutive low-control steps that count as a deadlock in metrics.
    pub streak: usize,
}

impl Default for DeadlockConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            gamma: 0.99,
            eta: 0.01,
            goal_tolerance: 0.1,
            global_trigger: false,
            streak: 20,
        }
    }
}

impl DeadlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("deadlock.epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.eta < 0.0 {
            return Err(Error::Config("deadlock.gamma must lie in [0, 1) and eta >= 0".into()));
        }
        if self.goal_tolerance < 0.0 || self.streak == 0 {
            return Err(Error::Config("deadlock.goal_tolerance >= 0 and deadlock.streak >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub w: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    /// Last resolved control; `None` until the first trigger.
    pub u_prev: Option<Vec<f64>>,
}

impl MomentumState {
    pub fn new(m: usize, cfg: &DeadlockConfig) -> Self {
        Self {
            w: vec![0.0; m],
            gamma: cfg.gamma,
            eta: cfg.eta,
            u_prev: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.u_prev.is_some()
    }

    pub fn reset(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.u_prev = None;
    }

    /// `w ← γw + η g`.
    pub fn update(&mut self, g: &[f64]) {
        for (w, gi) in self.w.iter_mut().zip(g) {
            *w = self.gamma * *w + self.eta * gi;
        }
    }
}

pub fn detect(model: &DynamicsModel, u: &[f64], x: &[f64], goal: &[f64], cfg: &DeadlockConfig) -> bool {
    linalg::norm(u) <= cfg.epsilon && linalg::distance(model.position(x), goal) > cfg.goal_tolerance
}

/// `∇ₓ‖π(x) − k(x)‖²` with neighbor positions held fixed.
pub fn grad_cost(
    model: &DynamicsModel,
    policy: &PolicyNet,
    gains: &PdGains,
    x: &[f64],
    obs: &Observation,
    goal: &[f64],
) -> Result<Vec<f64>> {
    let (n, m, d) = (model.state_dim(), model.control_dim(), model.pos_dim());
    if x.len() != n {
        return Err(Error::dim("deadlock state", n, x.len()));
    }
    let nominal = NominalController::new(model, gains);
    let k0 = nominal.control(x, goal);
    let jac = nominal.jacobian(x, goal);
    let mut tape = Tape::new();
    let vars = policy.register(&mut tape);
    let xv = tape.leaf(Tensor::row_vector(x));

    // k(x) as the affine map k0 + J(x − x0): exact value and gradient at x0.
    let offset: Vec<f64> = linalg::sub(&k0, &jac.matvec(x));
    let kv = tape.row_affine(xv, &Tensor::row_vector(&offset), vec![to_tensor(&jac)]);
    // goal − P x
    let mut neg_p = Mat::zeros(d, n);
    for i in 0..d {
        neg_p[(i, i)] = -1.0;
    }
    let gv = tape.row_affine(xv, &Tensor::row_vector(goal), vec![to_tensor(&neg_p)]);
    let k = obs.len();
    let absolute: Vec<f64> = (0..k)
        .flat_map(|j| obs.column(j).iter().zip(x).map(|(r, xi)| r + xi).collect::<Vec<_>>())
        .collect();
    let abs_v = tape.leaf(Tensor::from_vec(k, n, absolute)?);
    let own = tape.gather_rows(xv, &vec![0; k]);
    let ov = tape.sub(abs_v, own);
    let pi = policy.build(&mut tape, &vars, xv, ov, &[0, k], gv, kv);
    let diff = tape.sub(pi, kv);
    let sq = tape.mul(diff, diff);
    let c = tape.sum(sq);
    let grads = tape.backward(c)?;
    let g = grads.wrt(&tape, xv).data;
    debug_assert_eq!(tape.value(pi).cols, m);
    Ok(g)
}

fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_vec(m.rows, m.cols, m.data.clone()).expect("matrix shape")
}

/// Maps a state-space gradient into control space: position components
/// for double integrators, the input matrix for the unicycle.
pub fn control_gradient(model: &DynamicsModel, x: &[f64], gx: &[f64]) -> Vec<f64> {
    match model.kind {
        ModelKind::PlanarUnicycle => model.input_matrix(x).tmatvec(gx),
        _ => gx[..model.pos_dim()].to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub u: Vec<f64>,
    /// The projection was infeasible and `u` is the fallback control.
    pub fell_back: bool,
    /// `‖Δ⋆‖`, the correction the projection applied.
    pub correction: f64,
}

/// One escape step: `base = u_prev − w`, `u = base + Δ⋆` with
/// `Δ⋆ = argmin ‖Δ‖² s.t. A(base + Δ) ≤ b`. On the first trigger `u_prev`
/// is `initial` (the nominal control). An infeasible projection returns
/// `fallback` and resets the momentum.
pub fn resolve(
    ms: &mut MomentumState,
    grad_u: &[f64],
    initial: &[f64],
    a: &Mat,
    b: &[f64],
    fallback: &[f64],
) -> Result<Resolution> {
    let u_prev = ms.u_prev.clone().unwrap_or_else(|| initial.to_vec());
    ms.update(grad_u);
    let base = linalg::sub(&u_prev, &ms.w);
    let problem = QpProblem::with_constraints(base.clone(), a.clone(), b.to_vec());
    let sol = qp::solve(&problem)?;
    if sol.status == QpStatus::Infeasible {
        ms.reset();
        return Ok(Resolution {
            u: fallback.to_vec(),
            fell_back: true,
            correction: 0.0,
        });
    }
    let correction = linalg::distance(&sol.z, &base);
    ms.u_prev = Some(sol.z.clone());
    Ok(Resolution {
        u: sol.z,
        fell_back: false,
        correction,
    })
}
