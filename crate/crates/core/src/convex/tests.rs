use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;

fn e(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

fn min_norm(n: usize) -> ConvexProgram {
    let mut p = ConvexProgram::new(n);
    p.objective.p = DMatrix::identity(n, n) * 2.0;
    p
}

#[test]
fn projection_onto_hyperplane() {
    let mut p = min_norm(4);
    p.add_eq(e(4, 0), 1.0);
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!((s.objective_value - 1.0).abs() < 1e-7);
    assert!((&s.x - e(4, 0)).amax() < 1e-7);
}

#[test]
fn active_upper_bound() {
    // (x - 2)^2 = x^2 - 4x + 4
    let mut p = ConvexProgram::new(1);
    p.objective.p[(0, 0)] = 2.0;
    p.objective.q[0] = -4.0;
    p.objective.c = 4.0;
    p.add_lin_ineq(e(1, 0), 1.0);
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!((s.x[0] - 1.0).abs() < 1e-6);
    assert!((s.objective_value - 1.0).abs() < 1e-6);
    assert!(s.complementarity <= 10.0 * 1e-8);
}

#[test]
fn disk_constraint_with_linear_objective() {
    // min x + y  s.t.  x^2 + y^2 <= 1  ->  -(1,1)/sqrt2
    let mut p = ConvexProgram::new(2);
    p.objective.q = DVector::from_vec(vec![1.0, 1.0]);
    p.add_quad_ineq(vec![0, 1], DMatrix::identity(2, 2), None, 1.0);
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!((s.objective_value + 2f64.sqrt()).abs() < 1e-6, "{}", s.objective_value);
}

#[test]
fn infeasible_disk_and_halfplane() {
    let mut p = ConvexProgram::new(2);
    p.add_quad_ineq(vec![0, 1], DMatrix::identity(2, 2), None, 1.0);
    p.add_lin_ineq(-e(2, 0), -2.0);
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Infeasible);
    assert!(s.infeasibility.unwrap() > 0.5);
}

#[test]
fn contradictory_equalities_detected_in_presolve() {
    let mut p = ConvexProgram::new(3);
    p.add_eq(e(3, 0), 0.0);
    p.add_eq(e(3, 0), 1.0);
    assert!(matches!(presolve(&p), Err(PresolveError::ProvablyInfeasible(_))));
    assert_eq!(solve(&p, 1e-8, 100).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn duplicated_equality_removed() {
    let mut p = ConvexProgram::new(3);
    p.add_eq(DVector::from_vec(vec![1.0, 2.0, 0.0]), 3.0);
    p.add_eq(DVector::from_vec(vec![2.0, 4.0, 0.0]), 6.0);
    let pre = presolve(&p).unwrap();
    assert_eq!(pre.eq.len(), 1);
}

#[test]
fn paired_bounds_become_equality() {
    let mut p = min_norm(2);
    p.add_lin_ineq(e(2, 1), 0.5);
    p.add_lin_ineq(-e(2, 1), -0.5);
    let pre = presolve(&p).unwrap();
    assert_eq!(pre.eq.len(), 1);
    assert!(pre.lin_ineq.is_empty());
    let s = solve(&p, 1e-8, 100).unwrap();
    assert!((s.x[1] - 0.5).abs() < 1e-9);
}

#[test]
fn unconstrained_quadratic() {
    let mut p = ConvexProgram::new(2);
    p.objective.p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    p.objective.q = DVector::from_vec(vec![1.0, -1.0]);
    let s = solve(&p, 1e-8, 100).unwrap();
    let expect = p.objective.p.clone().lu().solve(&(-&p.objective.q)).unwrap();
    assert!((&s.x - expect).amax() < 1e-8);
}

#[test]
fn unbounded_objective_is_degenerate() {
    let mut p = ConvexProgram::new(1);
    p.objective.q[0] = 1.0;
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Degenerate);
}

#[test]
fn bad_tolerance_rejected() {
    let p = ConvexProgram::new(1);
    assert_eq!(solve(&p, 1.0, 10), Err(SolveError::BadTolerance(1.0)));
}

#[test]
fn text_roundtrip_is_exact() {
    let mut p = ConvexProgram::new(3);
    p.objective.p = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 0.0]);
    p.objective.q = DVector::from_vec(vec![0.1, -1.0 / 3.0, 7.0]);
    p.objective.c = 1e-17;
    p.add_eq(DVector::from_vec(vec![1.0, 1.0, 1.0]), 1.0);
    p.add_lin_ineq(DVector::from_vec(vec![0.0, -1.0, 0.0]), 0.25);
    p.add_quad_ineq(vec![2, 0], DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]), Some(e(3, 1)), 4.0);
    let back = parse_text(&p.to_text()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn text_rejects_garbage() {
    assert!(parse_text("convex-program 1\nn 2\nq 1\nend\n").is_err());
    assert!(parse_text("n 2\n").is_err());
}

/// Box-bounded random convex QP with a strictly feasible interior point.
fn random_program(seed: &[f64]) -> (ConvexProgram, DVector<f64>) {
    let mut it = seed.iter().copied().cycle();
    let mut next = move || it.next().unwrap();
    let n = 2 + (next().abs() * 4.0) as usize % 3;
    let mut p = ConvexProgram::new(n);
    let g = DMatrix::from_fn(n, n, |_, _| next());
    p.objective.p = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
    p.objective.q = DVector::from_fn(n, |_, _| next() * 2.0);
    for i in 0..n {
        p.add_lin_ineq(e(n, i), 1.0);
        p.add_lin_ineq(-e(n, i), 1.0);
    }
    let x0 = DVector::from_fn(n, |_, _| next() * 0.5);
    let a = DVector::from_fn(n, |_, _| next());
    let b = a.dot(&x0) + 0.1 + next().abs();
    p.add_lin_ineq(a, b);
    p.add_quad_ineq((0..n).collect(), DMatrix::identity(n, n), None, x0.norm_squared() + 0.5);
    (p, x0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_solutions_are_feasible_and_deterministic(seed in proptest::collection::vec(-1.0f64..1.0, 40)) {
        let (p, _) = random_program(&seed);
        let a = solve(&p, 1e-8, 100).unwrap();
        let b = solve(&p, 1e-8, 100).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.status, SolveStatus::Optimal);
        prop_assert!(a.kkt_residuals.primal_ineq <= 1e-8);
        prop_assert!(a.complementarity <= 10.0 * 1e-8);
    }

    #[test]
    fn tightening_a_bound_never_lowers_the_optimum(seed in proptest::collection::vec(-1.0f64..1.0, 40), cut in 0.0f64..0.9) {
        let (p, _) = random_program(&seed);
        let mut tight = p.clone();
        tight.lin_ineq[0].b = 1.0 - cut;
        let loose = solve(&p, 1e-8, 100).unwrap();
        let tight = solve(&tight, 1e-8, 100).unwrap();
        prop_assert!(tight.objective_value >= loose.objective_value - 1e-7);
    }

    #[test]
    fn presolve_preserves_optimum(seed in proptest::collection::vec(-1.0f64..1.0, 40)) {
        let (mut p, x0) = random_program(&seed);
        let a = p.lin_ineq[2].a.clone() * 3.0;
        let b = p.lin_ineq[2].b * 3.0;
        p.add_lin_ineq(a, b);
        let row = DVector::from_fn(p.n, |i, _| seed[i] + 0.5);
        let level = row.dot(&x0);
        p.add_eq(row.clone(), level);
        p.add_eq(row * -2.0, -2.0 * level);
        let direct = solve(&p, 1e-8, 100).unwrap();
        let pre = solve(&presolve(&p).unwrap(), 1e-8, 100).unwrap();
        prop_assert_eq!(direct.status, SolveStatus::Optimal);
        prop_assert!((direct.objective_value - pre.objective_value).abs() <= 1e-8 * (1.0 + direct.objective_value.abs()));
    }
}
