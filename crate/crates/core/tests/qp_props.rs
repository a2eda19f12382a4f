mod common;

use common::{all_rows, brute_force, dot, gauss, random_feasible};
use icbf_swarm::diffnet::{IcbfNet, NetShape, Observation, Wrt};
use icbf_swarm::dynamics::{DynamicsModel, ModelKind};
use icbf_swarm::linalg::Mat;
use icbf_swarm::qp::{self, QpProblem, QpStatus};
use icbf_swarm::safety::min_norm_filter;
use icbf_swarm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn active_set_matches_brute_force(seed in any::<u64>()) {
        let p = random_feasible(seed);
        let sol = qp::solve(&p).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let oracle = brute_force(&p);
        for (a, b) in sol.z.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-4, "{:?} vs {:?}", sol.z, oracle);
        }
        let kkt = qp::kkt_check(&p, &sol);
        prop_assert!(kkt.within(1e-8), "{kkt:?}");
        prop_assert!(sol.lambda.iter().all(|l| *l >= -1e-9));
    }

    #[test]
    fn row_scaling_leaves_solution_and_scales_duals(seed in any::<u64>(), c in 0.01f64..100.0) {
        let p = random_feasible(seed);
        prop_assume!(p.a.rows > 0);
        let row = (seed % p.a.rows as u64) as usize;
        let mut scaled = p.clone();
        for v in scaled.a.row_mut(row) {
            *v *= c;
        }
        scaled.b[row] *= c;
        let s0 = qp::solve(&p).unwrap();
        let s1 = qp::solve(&scaled).unwrap();
        for (a, b) in s0.z.iter().zip(&s1.z) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
        }
        // Duals are unique only when the active rows are independent.
        let (rows, rhs) = all_rows(&p);
        let active: Vec<usize> = (0..rows.len()).filter(|&i| (dot(&rows[i], &s0.z) - rhs[i]).abs() < 1e-9).collect();
        let gram: Vec<Vec<f64>> = active.iter().map(|&i| active.iter().map(|&j| dot(&rows[i], &rows[j])).collect()).collect();
        if active.is_empty() || gauss(gram, vec![0.0; active.len()]).is_some() {
            prop_assert!((s1.lambda[row] * c - s0.lambda[row]).abs() <= 1e-7 * (1.0 + s0.lambda[row].abs()));
        }
    }

    #[test]
    fn zero_solution_means_target_is_a_dual_combination(seed in any::<u64>()) {
        // Rows aₖᵀz ≤ 0 with k(x) = Σ cₖaₖ, cₖ > 0, pin the solution at the origin.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..=4);
        let rows = rng.gen_range(1..=m);
        let mut target = vec![0.0; m];
        let mut p = QpProblem::new(vec![0.0; m]);
        for _ in 0..rows {
            let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = rng.gen_range(0.1..2.0);
            for (t, ai) in target.iter_mut().zip(&a) {
                *t += c * ai;
            }
            p.push_row(&a, 0.0);
        }
        prop_assume!(target.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        p.target = target.clone();
        let sol = qp::solve(&p).unwrap();
        prop_assert!(sol.is_optimal());
        prop_assert!(sol.z.iter().all(|v| v.abs() <= 1e-8), "{:?}", sol.z);
        let mut residual = target.clone();
        for (i, l) in sol.lambda.iter().enumerate() {
            for (r, a) in residual.iter_mut().zip(p.a.row(i)) {
                *r -= 0.5 * l * a;
            }
        }
        prop_assert!(residual.iter().all(|v| v.abs() <= 1e-8), "{residual:?}");
    }

    #[test]
    fn single_row_matches_closed_form(p0 in -3.0f64..3.0, p1 in -3.0f64..3.0, q in -2.0f64..2.0) {
        prop_assume!(p0 * p0 + p1 * p1 > 1e-6);
        let closed = qp::min_norm_halfspace(&[p0, p1], q).unwrap();
        let mut prob = QpProblem::new(vec![0.0, 0.0]);
        prob.push_row(&[-p0, -p1], -q);
        let sol = qp::solve(&prob).unwrap();
        for (a, b) in sol.z.iter().zip(&closed) {
            prop_assert!((a - b).abs() <= 1e-12, "{:?} vs {closed:?}", sol.z);
        }
        if q > 0.0 {
            let lam = 2.0 * q / (p0 * p0 + p1 * p1);
            prop_assert!((sol.lambda[0] - lam).abs() <= 1e-10 * (1.0 + lam));
        }
    }

    #[test]
    fn min_norm_filter_satisfies_its_condition(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![1.0, 1.0]).unwrap();
        let net = IcbfNet::new(NetShape::for_model(&model), &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phi: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obs = Observation::from_rows(4, &[vec![0.5, 0.2, -0.1, 0.0]]).unwrap();
        let v = min_norm_filter(&model, &net, &x, &obs, &u, &phi, 1.0).unwrap();
        let tr = net.trace(&x, &obs, &u).unwrap();
        let gx = tr.grad_inputs(Wrt::X).unwrap();
        let gu = tr.grad_inputs(Wrt::U).unwrap();
        let q = -(dot(&gx, &model.f(&x, &u)) + dot(&gu, &phi) + tr.value());
        prop_assert!(dot(&gu, &v) >= q - 1e-10);
        // v is the shortest such vector: parallel to ∇ᵤh and zero when slack.
        if q <= 0.0 {
            prop_assert!(v.iter().all(|c| *c == 0.0));
        } else {
            prop_assert!((v[0] * gu[1] - v[1] * gu[0]).abs() <= 1e-10);
        }
    }
}

#[test]
fn min_norm_examples() {
    assert_eq!(qp::min_norm_halfspace(&[1.0, 0.0], -1.0).unwrap(), vec![0.0, 0.0]);
    assert_eq!(qp::min_norm_halfspace(&[1.0, 0.0], 2.0).unwrap(), vec![2.0, 0.0]);
    assert!(matches!(
        qp::min_norm_halfspace(&[0.0, 0.0], 1.0),
        Err(Error::CertificateViolation { .. })
    ));
}

#[test]
fn contradictory_bounds_are_infeasible_with_certificate() {
    let p = QpProblem::with_constraints(vec![0.0], Mat::from_rows(&[vec![1.0], vec![-1.0]]), vec![-1.0, -1.0]);
    let sol = qp::solve(&p).unwrap();
    assert_eq!(sol.status, QpStatus::Infeasible);
    let y = sol.farkas.unwrap();
    assert!(y.iter().all(|v| *v >= 0.0));
    assert!((y[0] - y[1]).abs() < 1e-12);
    assert!(-y[0] - y[1] < 0.0);
}
