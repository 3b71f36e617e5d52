use ddpc::qp::{kkt_report, solve, QpOptions, QpProblem, QpStatus};
use ddpc::{Matrix, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive active-set enumeration: solves the equality-constrained KKT
/// system for every subset of rows and keeps the best feasible point.
fn brute_force(qp: &QpProblem) -> Option<Vector> {
    let (n, nc) = (qp.n_vars(), qp.n_constraints());
    let mut best: Option<(f64, Vector)> = None;
    for mask in 0u32..(1 << nc) {
        let rows: Vec<usize> = (0..nc).filter(|i| mask & (1 << i) != 0).collect();
        let k = rows.len();
        let mut kkt = Matrix::zeros(n + k, n + k);
        let mut rhs = Vector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.g);
        for i in 0..n {
            rhs[i] = -qp.f[i];
        }
        for (j, &r) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = qp.a[(r, c)];
                kkt[(c, n + j)] = qp.a[(r, c)];
            }
            rhs[n + j] = qp.b[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if (&qp.a * &x - &qp.b).iter().any(|v| *v > 1e-9) {
            continue;
        }
        let obj = qp.objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=3);
    let nc = rng.random_range(0..=4);
    let m = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let g = &m * m.transpose() + Matrix::identity(n, n) * 0.1;
    let f = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let a = Matrix::from_fn(nc, n, |_, _| rng.random_range(-1.0..1.0));
    let b = Vector::from_fn(nc, |_, _| rng.random_range(-1.0..1.0));
    QpProblem::new(g, f, a, b).unwrap()
}

#[test]
fn hildreth_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut infeasible, mut checked) = (0, 0);
    for case in 0..500 {
        let qp = random_qp(&mut rng);
        let sol = solve(&qp, &QpOptions::default()).unwrap();
        match brute_force(&qp) {
            Some(x) => {
                assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
                assert!((&sol.primal - &x).amax() < 1e-6, "case {case}: {} vs {}", sol.primal, x);
                assert!(kkt_report(&qp, &sol.primal, &sol.dual).passes(), "case {case}");
                checked += 1;
            }
            None => {
                assert_eq!(sol.status, QpStatus::Infeasible, "case {case}");
                infeasible += 1;
            }
        }
    }
    assert!(checked > 300 && infeasible > 0, "{checked} feasible, {infeasible} infeasible");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_solutions_carry_kkt_certificate(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng);
        let sol = solve(&qp, &QpOptions::default()).unwrap();
        if sol.status == QpStatus::Optimal {
            prop_assert!(kkt_report(&qp, &sol.primal, &sol.dual).passes());
        }
    }

    #[test]
    fn dual_objective_never_decreases(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng);
        let opts = QpOptions { record_dual_trace: true, polish_every: 0, ..Default::default() };
        let sol = solve(&qp, &opts).unwrap();
        for w in sol.dual_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
        }
    }
}
