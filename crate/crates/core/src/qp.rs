//! Dense small-scale QP solver for minimum-distance problems
//!
//! ```text
//!   minimize ‖z − z₀‖²   subject to   A z ≤ b,   lo ≤ z ≤ hi
//! ```
//!
//! The solver is a dual active-set method (Goldfarb–Idnani) specialised to
//! the identity Hessian: it starts from the unconstrained minimiser `z₀`
//! and adds the most violated constraint (lowest index on ties) until the
//! iterate is primal feasible, dropping constraints whose multipliers would
//! turn negative. Every iterate satisfies stationarity
//! `z = z₀ − ½ Σ λₖ aₖ` and dual feasibility, which is why the method also
//! produces a Farkas certificate when the constraints are inconsistent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Residual tolerance used for optimality and KKT checks.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Slack allowed on dual non-negativity.
pub const DUAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub target: Vec<f64>,
    pub a: Mat,
    pub b: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl QpProblem {
    pub fn new(target: Vec<f64>) -> Self {
        let m = target.len();
        Self {
            target,
            a: Mat::zeros(0, m),
            b: Vec::new(),
            lower: None,
            upper: None,
        }
    }

    pub fn with_constraints(target: Vec<f64>, a: Mat, b: Vec<f64>) -> Self {
        Self {
            target,
            a,
            b,
            lower: None,
            upper: None,
        }
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    /// Appends the row `aᵀ z ≤ bound`.
    pub fn push_row(&mut self, a: &[f64], bound: f64) {
        assert_eq!(a.len(), self.dim());
        self.a.data.extend_from_slice(a);
        self.a.rows += 1;
        self.b.push(bound);
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        if self.a.cols != m {
            return Err(Error::dim("qp constraint columns", m, self.a.cols));
        }
        if self.a.rows != self.b.len() {
            return Err(Error::dim("qp bound vector", self.a.rows, self.b.len()));
        }
        let finite = linalg::all_finite(&self.target)
            && linalg::all_finite(&self.a.data)
            && linalg::all_finite(&self.b);
        if !finite {
            return Err(Error::NumericalFailure("non-finite QP data".into()));
        }
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            if lo.len() != m || hi.len() != m {
                return Err(Error::dim("qp box bounds", m, lo.len().min(hi.len())));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Config("qp box bounds require lo <= hi".into()));
            }
        } else if self.lower.is_some() != self.upper.is_some() {
            return Err(Error::Config("qp box bounds need both lo and hi".into()));
        }
        Ok(())
    }

    /// General rows followed by `z ≤ hi` rows and `−z ≤ −lo` rows.
    fn stacked_rows(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let m = self.dim();
        let mut rows: Vec<Vec<f64>> = (0..self.a.rows).map(|i| self.a.row(i).to_vec()).collect();
        let mut rhs = self.b.clone();
        if let (Some(lo), Some(hi)) = (&self.lower, &self.upper) {
            for j in 0..m {
                let mut e = vec![0.0; m];
                e[j] = 1.0;
                rows.push(e);
                rhs.push(hi[j]);
            }
            for j in 0..m {
                let mut e = vec![0.0; m];
                e[j] = -1.0;
                rows.push(e);
                rhs.push(-lo[j]);
            }
        }
        (rows, rhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖z − (z₀ − ½ Σ λₖ aₖ)‖∞`
    pub stationarity: f64,
    /// `max(A z − b)₊`, box rows included.
    pub primal: f64,
    /// `max(−λ)₊`
    pub dual: f64,
    /// `max |λₖ (aₖᵀ z − bₖ)|`
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.primal <= tol
            && self.dual <= tol
            && self.complementarity <= tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Multipliers of the `A z ≤ b` rows.
    pub lambda: Vec<f64>,
    /// Multipliers of the `z ≤ hi` rows (empty without bounds).
    pub lambda_upper: Vec<f64>,
    /// Multipliers of the `−z ≤ −lo` rows (empty without bounds).
    pub lambda_lower: Vec<f64>,
    pub status: QpStatus,
    pub kkt: KktReport,
    /// For `Infeasible`: `y ≥ 0` over the stacked rows with `Aᵀy = 0`, `bᵀy < 0`.
    pub farkas: Option<Vec<f64>>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    fn stacked_duals(&self) -> Vec<f64> {
        let mut all = self.lambda.clone();
        all.extend_from_slice(&self.lambda_upper);
        all.extend_from_slice(&self.lambda_lower);
        all
    }
}

/// `(Nᵀ N)⁻¹ Nᵀ v` for the active normals `N` (columns), via Cholesky on the Gram matrix.
fn active_coefficients(rows: &[Vec<f64>], active: &[usize], v: &[f64]) -> Option<Vec<f64>> {
    let k = active.len();
    if k == 0 {
        return Some(Vec::new());
    }
    let mut gram = Mat::zeros(k, k);
    for (i, &ai) in active.iter().enumerate() {
        for (j, &aj) in active.iter().enumerate().take(i + 1) {
            let g = linalg::dot(&rows[ai], &rows[aj]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let rhs: Vec<f64> = active.iter().map(|&a| linalg::dot(&rows[a], v)).collect();
    linalg::cholesky_solve(&gram, &rhs)
}

pub fn solve(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let m = problem.dim();
    let (rows, rhs) = problem.stacked_rows();
    let total = rows.len();
    let cap = 10 * (m + total).max(1);

    let mut z = problem.target.clone();
    let mut lambda = vec![0.0; total];
    let mut active: Vec<usize> = Vec::new();
    let mut iterations = 0usize;

    // Scale-aware feasibility tolerance for selecting violated rows.
    let viol_tol = |i: usize| RESIDUAL_TOL * 1e-2 * (1.0 + rhs[i].abs() + linalg::norm(&rows[i]));

    loop {
        // Most violated constraint, lowest index on ties.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..total {
            if active.contains(&i) {
                continue;
            }
            let s = linalg::dot(&rows[i], &z) - rhs[i];
            if s > viol_tol(i) && pick.map_or(true, |(_, best)| s > best) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else {
            break;
        };

        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::NumericalFailure(format!(
                    "active-set iteration cap {cap} exceeded (m = {m}, rows = {total}, active = {active:?})"
                )));
            }
            let np = &rows[p];
            let r = active_coefficients(&rows, &active, np).ok_or_else(|| {
                Error::NumericalFailure("active constraint normals became dependent".into())
            })?;
            // Null-space component of the new normal.
            let mut proj = np.clone();
            for (coef, &a) in r.iter().zip(&active) {
                linalg::axpy(-coef, &rows[a], &mut proj);
            }
            let proj_sq = linalg::norm_sq(&proj);
            let degenerate = proj_sq <= 1e-14 * (1.0 + linalg::norm_sq(np));

            // Partial (dual) step limit from active multipliers that would go negative.
            let mut blocking: Option<(usize, f64)> = None;
            for (idx, (&a, &ri)) in active.iter().zip(&r).enumerate() {
                if ri > 1e-14 {
                    let t = lambda[a] / ri;
                    if blocking.map_or(true, |(_, best)| t < best) {
                        blocking = Some((idx, t));
                    }
                }
            }

            let s_p = linalg::dot(np, &z) - rhs[p];
            if degenerate {
                match blocking {
                    None => {
                        // Aᵀy = 0 with y ≥ 0 and bᵀy = −s_p < 0.
                        let mut y = vec![0.0; total];
                        y[p] = 1.0;
                        for (&a, &ri) in active.iter().zip(&r) {
                            y[a] = (-ri).max(0.0);
                        }
                        return Ok(infeasible(problem, z, lambda, y, iterations));
                    }
                    Some((idx, t)) => {
                        for (&a, &ri) in active.iter().zip(&r) {
                            lambda[a] -= t * ri;
                        }
                        lambda[p] += t;
                        let dropped = active.remove(idx);
                        lambda[dropped] = 0.0;
                        continue;
                    }
                }
            }

            let full = s_p / (0.5 * proj_sq);
            let (t, drop) = match blocking {
                Some((idx, tb)) if tb < full => (tb, Some(idx)),
                _ => (full, None),
            };
            linalg::axpy(-0.5 * t, &proj, &mut z);
            for (&a, &ri) in active.iter().zip(&r) {
                lambda[a] -= t * ri;
            }
            lambda[p] += t;
            match drop {
                Some(idx) => {
                    let dropped = active.remove(idx);
                    lambda[dropped] = 0.0;
                }
                None => {
                    active.push(p);
                    break;
                }
            }
        }
    }

    for l in lambda.iter_mut() {
        if *l < 0.0 && *l > -DUAL_TOL {
            *l = 0.0;
        }
    }
    let k = problem.a.rows;
    let bounded = problem.lower.is_some();
    let mut sol = QpSolution {
        z,
        lambda: lambda[..k].to_vec(),
        lambda_upper: if bounded { lambda[k..k + m].to_vec() } else { Vec::new() },
        lambda_lower: if bounded { lambda[k + m..].to_vec() } else { Vec::new() },
        status: QpStatus::Optimal,
        kkt: KktReport::default(),
        farkas: None,
        iterations,
    };
    sol.kkt = kkt_check(problem, &sol);
    Ok(sol)
}

fn infeasible(problem: &QpProblem, z: Vec<f64>, lambda: Vec<f64>, y: Vec<f64>, iterations: usize) -> QpSolution {
    let k = problem.a.rows;
    let m = problem.dim();
    let bounded = problem.lower.is_some();
    QpSolution {
        z,
        lambda: lambda[..k].to_vec(),
        lambda_upper: if bounded { lambda[k..k + m].to_vec() } else { Vec::new() },
        lambda_lower: if bounded { lambda[k + m..].to_vec() } else { Vec::new() },
        status: QpStatus::Infeasible,
        kkt: KktReport::default(),
        farkas: Some(y),
        iterations,
    }
}

/// All four KKT residuals of `sol` for `problem`.
pub fn kkt_check(problem: &QpProblem, sol: &QpSolution) -> KktReport {
    let (rows, rhs) = problem.stacked_rows();
    let duals = sol.stacked_duals();
    let mut predicted = problem.target.clone();
    for (row, l) in rows.iter().zip(&duals) {
        linalg::axpy(-0.5 * l, row, &mut predicted);
    }
    let stationarity = linalg::norm_inf(&linalg::sub(&sol.z, &predicted));
    let mut primal = 0.0_f64;
    let mut complementarity = 0.0_f64;
    for (i, row) in rows.iter().enumerate() {
        let slack = linalg::dot(row, &sol.z) - rhs[i];
        primal = primal.max(slack);
        complementarity = complementarity.max((duals.get(i).copied().unwrap_or(0.0) * slack).abs());
    }
    let dual = duals.iter().fold(0.0_f64, |acc, l| acc.max(-l));
    KktReport {
        stationarity,
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        complementarity,
    }
}

/// Closed-form solution of `argmin ‖v‖² s.t. pᵀv ≥ q`.
///
/// When `p = 0` a valid certificate must have `q ≤ 0`, in which case the
/// constraint is slack and `v = 0`.
pub fn min_norm_halfspace(p: &[f64], q: f64) -> Result<Vec<f64>> {
    let pp = linalg::norm_sq(p);
    if pp <= f64::EPSILON * f64::EPSILON {
        if q <= 0.0 {
            return Ok(vec![0.0; p.len()]);
        }
        return Err(Error::CertificateViolation { q });
    }
    let s = q.max(0.0) / pp;
    Ok(p.iter().map(|pi| pi * s).collect())
}
