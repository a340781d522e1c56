//! Strict programs captured from planner runs that once stalled the solver.

use cycleplan::convex::{parse_text, solve};
use cycleplan::SolveStatus;

fn check(name: &str, text: &str) {
    let p = parse_text(text).unwrap();
    let s = solve(&p, 1e-8, 100).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal, "{name}: {:?}", s.kkt_residuals);
    assert!(s.kkt_residuals.primal_eq < 1e-8, "{name}");
    assert!(s.kkt_residuals.primal_ineq < 1e-8, "{name}");
}

// The first knot's position is fixed by the start state, so after the
// equalities are eliminated one bound keeps only round-off coefficients.
#[test]
fn knot_fixed_by_the_start_state() {
    check("pinned", include_str!("data/strict_pinned_knot.txt"));
}

// The infeasible-start iteration loses primal feasibility on the curved
// constraints; the solve has to recover from the phase-one point.
#[test]
fn restart_from_phase_one_point() {
    check("restart", include_str!("data/strict_restart.txt"));
}
