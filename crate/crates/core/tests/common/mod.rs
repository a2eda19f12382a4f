//! Independent oracles shared by the property tests and the acceptance report.
#![allow(dead_code)]

use icbf_swarm::diffnet::{EncoderNet, IcbfNet, Mlp, NetShape, Observation, PolicyNet, Tape, Tensor, Wrt};
use icbf_swarm::dynamics::{DynamicsModel, ModelKind};
use icbf_swarm::qp::QpProblem;
use icbf_swarm::safety::{BarrierTerms, Barriers, HalfPlane, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Inputs closer than this to a ReLU or max-pool switch are redrawn, so a
/// central difference never straddles a kink.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_vec(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn di() -> DynamicsModel {
    DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![1.0, 1.0]).unwrap()
}

// ---- QP ----

/// Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())?;
        if a[p][c].abs() < 1e-10 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Rows of `A z ≤ b` including the box, as plain vectors.
pub fn all_rows(p: &QpProblem) -> (Vec<Vec<f64>>, Vec<f64>) {
    let m = p.dim();
    let mut rows: Vec<Vec<f64>> = (0..p.a.rows).map(|i| p.a.row(i).to_vec()).collect();
    let mut rhs = p.b.clone();
    if let (Some(lo), Some(hi)) = (&p.lower, &p.upper) {
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            rows.push(e.clone());
            rhs.push(hi[i]);
            e[i] = -1.0;
            rows.push(e);
            rhs.push(-lo[i]);
        }
    }
    (rows, rhs)
}

/// Projects `z₀` onto every affine face `{a_S z = b_S}` and keeps the
/// closest feasible projection. The optimum is the projection onto the
/// face of its own active set, so this enumeration finds it.
pub fn brute_force(p: &QpProblem) -> Vec<f64> {
    let (rows, rhs) = all_rows(p);
    let z0 = &p.target;
    let feasible = |z: &[f64]| rows.iter().zip(&rhs).all(|(r, b)| dot(r, z) <= b + 1e-9);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << rows.len()) {
        let set: Vec<usize> = (0..rows.len()).filter(|i| mask >> i & 1 == 1).collect();
        if set.len() > p.dim() {
            continue;
        }
        // z = z₀ − Nᵀμ with N z = b_S  ⇒  (N Nᵀ) μ = N z₀ − b_S
        let gram: Vec<Vec<f64>> = set.iter().map(|&i| set.iter().map(|&j| dot(&rows[i], &rows[j])).collect()).collect();
        let rhs_s: Vec<f64> = set.iter().map(|&i| dot(&rows[i], z0) - rhs[i]).collect();
        let Some(mu) = (if set.is_empty() { Some(vec![]) } else { gauss(gram, rhs_s) }) else {
            continue;
        };
        let mut z = z0.clone();
        for (k, &i) in set.iter().enumerate() {
            for (zc, rc) in z.iter_mut().zip(&rows[i]) {
                *zc -= mu[k] * rc;
            }
        }
        if feasible(&z) {
            let d: f64 = z.iter().zip(z0).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, z));
            }
        }
    }
    best.expect("feasible instance has a projection").1
}

/// Feasible by construction (m ≤ 4, k ≤ 6, box half the time).
pub fn random_feasible(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..=4);
    let k = rng.gen_range(0..=6);
    let inside: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut p = QpProblem::new(target);
    for _ in 0..k {
        let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let slack = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) };
        p.push_row(&a, dot(&a, &inside) + slack);
    }
    if rng.gen_bool(0.5) {
        let lo = inside.iter().map(|v| v - rng.gen_range(0.0..1.5)).collect();
        let hi = inside.iter().map(|v| v + rng.gen_range(0.0..1.5)).collect();
        p = p.with_bounds(lo, hi);
    }
    p
}

// ---- barriers ----

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
    ]
}

pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let x = random_state(rng);
    let neighbors = (0..rng.gen_range(0..6)).map(|_| random_state(rng)).collect();
    let walls = (0..rng.gen_range(0..3))
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let normal = vec![a.cos(), a.sin()];
            let off = rng.gen_range(0.0..1.5);
            HalfPlane {
                point: vec![x[0] - off * normal[0], x[1] - off * normal[1]],
                normal,
            }
        })
        .collect();
    Scene { x, neighbors, walls }
}

/// Component barriers at a random scene and a control that may leave the input set.
pub fn random_terms(rng: &mut ChaCha8Rng, bar: &Barriers) -> BarrierTerms {
    let scene = random_scene(rng);
    let u = [rng.gen_range(-1.3..1.3), rng.gen_range(-1.3..1.3)];
    bar.current(&scene, &u)
}

// ---- networks ----

fn random_shape(rng: &mut ChaCha8Rng) -> NetShape {
    let (n, m, d) = [(4, 2, 2), (6, 3, 3), (3, 2, 2)][rng.gen_range(0..3)];
    NetShape {
        n,
        m,
        d,
        p: rng.gen_range(2..9),
        hidden: rng.gen_range(3..11),
        depth: rng.gen_range(1..4),
    }
}

fn randomize_biases(params: Vec<&mut Tensor>, rng: &mut ChaCha8Rng) {
    for t in params {
        if t.rows == 1 {
            t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
    }
}

/// Distance to the nearest nondifferentiable point of encoder + trunk.
fn kink_distance(encoder: &EncoderNet, trunk: &Mlp, obs: &Observation, tail: &[f64], x: &[f64]) -> f64 {
    let p = encoder.w.rows;
    let mut margin = f64::INFINITY;
    let mut pooled = vec![0.0; p];
    for c in 0..p {
        let mut zs: Vec<f64> = (0..obs.len()).map(|k| dot(encoder.w.row(c), obs.column(k))).collect();
        for z in &zs {
            margin = margin.min(z.abs());
        }
        zs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if zs.len() > 1 && zs[0] > 0.0 {
            margin = margin.min(zs[0] - zs[1]);
        }
        pooled[c] = zs.first().copied().unwrap_or(0.0).max(0.0);
    }
    let mut a: Vec<f64> = x.iter().chain(&pooled).chain(tail).copied().collect();
    let last = trunk.layers.len() - 1;
    for (i, l) in trunk.layers.iter().enumerate() {
        let z: Vec<f64> = (0..l.w.rows).map(|o| dot(l.w.row(o), &a) + l.b.data[o]).collect();
        if i < last {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

pub fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += FD_STEP;
            m[i] -= FD_STEP;
            (f(&p) - f(&m)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Relative error with a unit floor, so near-zero derivatives compare absolutely.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn worst(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(g, w)| rel_err(*g, *w)).fold(0.0, f64::max)
}

fn relative(x: &[f64], nbrs: &[Vec<f64>]) -> Observation {
    let rows: Vec<Vec<f64>> = nbrs.iter().map(|q| q.iter().zip(x).map(|(a, b)| a - b).collect()).collect();
    Observation::from_rows(x.len(), &rows).unwrap()
}

/// Largest relative error between tape gradients of a random `IcbfNet`
/// (parameters, `x` and `u`) and central differences.
pub fn icbf_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_shape(&mut rng);
    let mut net = IcbfNet::new(shape, &mut rng);
    randomize_biases(net.params_mut(), &mut rng);
    let (x, nbrs, u) = loop {
        let x = random_vec(shape.n, 1.0, &mut rng);
        let k = rng.gen_range(0..5);
        // Absolute neighbor states; the observation is these minus `x`.
        let nbrs: Vec<Vec<f64>> = (0..k).map(|_| random_vec(shape.n, 1.5, &mut rng)).collect();
        let u = random_vec(shape.m, 1.0, &mut rng);
        if kink_distance(&net.encoder, &net.trunk, &relative(&x, &nbrs), &u, &x) > KINK_MARGIN {
            break (x, nbrs, u);
        }
    };
    let obs = relative(&x, &nbrs);
    let trace = net.trace(&x, &obs, &u).unwrap();
    let grads = trace.grad_params().unwrap();
    let mut err = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        let base = net.params()[t].data.clone();
        let fd = central(
            |w| {
                let mut n = net.clone();
                n.params_mut()[t].data.copy_from_slice(w);
                n.value(&x, &obs, &u).unwrap()
            },
            &base,
        );
        err = err.max(worst(&g.data, &fd));
    }
    let fx = central(|xx| net.value(xx, &relative(xx, &nbrs), &u).unwrap(), &x);
    let fu = central(|uu| net.value(&x, &obs, uu).unwrap(), &u);
    err = err.max(worst(&trace.grad_inputs(Wrt::X).unwrap(), &fx));
    err.max(worst(&trace.grad_inputs(Wrt::U).unwrap(), &fu))
}

/// Same for a random `PolicyNet`, probing `Σ π` with parameters, `x` and
/// the goal offset as leaves.
pub fn policy_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_shape(&mut rng);
    let u_max: Vec<f64> = (0..shape.m).map(|_| rng.gen_range(0.5..2.0)).collect();
    let mut pol = PolicyNet::new(shape, u_max, &mut rng);
    randomize_biases(pol.params_mut(), &mut rng);
    let (x, obs, goal, nominal) = loop {
        let x = random_vec(shape.n, 1.0, &mut rng);
        let k = rng.gen_range(0..5);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_vec(shape.n, 1.5, &mut rng)).collect();
        let obs = Observation::from_rows(shape.n, &rows).unwrap();
        let goal = random_vec(shape.d, 2.0, &mut rng);
        let nominal = random_vec(shape.m, 1.0, &mut rng);
        if kink_distance(&pol.encoder, &pol.trunk, &obs, &goal, &x) > KINK_MARGIN {
            break (x, obs, goal, nominal);
        }
    };
    let mut tape = Tape::new();
    let vars = pol.register(&mut tape);
    let xv = tape.leaf(Tensor::row_vector(&x));
    let ov = tape.leaf(Tensor::from_vec(obs.len(), shape.n, obs.data.clone()).unwrap());
    let gv = tape.leaf(Tensor::row_vector(&goal));
    let kv = tape.leaf(Tensor::row_vector(&nominal));
    let out = pol.build(&mut tape, &vars, xv, ov, &[0, obs.len()], gv, kv);
    let s = tape.sum(out);
    let direct: f64 = pol.act(&x, &obs, &goal, &nominal).unwrap().iter().sum();
    let mut err = rel_err(tape.scalar(s), direct);
    let g = tape.backward(s).unwrap();
    for (t, gt) in vars.gradients(&tape, &g).iter().enumerate() {
        let base = pol.params()[t].data.clone();
        let fd = central(
            |w| {
                let mut p = pol.clone();
                p.params_mut()[t].data.copy_from_slice(w);
                p.act(&x, &obs, &goal, &nominal).unwrap().iter().sum()
            },
            &base,
        );
        err = err.max(worst(&gt.data, &fd));
    }
    let fx = central(|xx| pol.act(xx, &obs, &goal, &nominal).unwrap().iter().sum(), &x);
    let fg = central(|gg| pol.act(&x, &obs, gg, &nominal).unwrap().iter().sum(), &goal);
    err = err.max(worst(&g.wrt(&tape, xv).data, &fx));
    err.max(worst(&g.wrt(&tape, gv).data, &fg))
}
