//! The receding planning loop: search, relaxed and strict solves, horizon
//! trimming, safety-weight scheduling and control concatenation.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cycle::{prepare_cycle, solve_strict, CycleConfig, CycleError, CycleResult, StrictOutcome};
use crate::dynamics::{linearize, rollout, DiscreteDynamics, Propagator};
use crate::geometry::min_clearance;
use crate::scenario::Scenario;
use crate::search::{audit_search, coast_safety, run_cdwa, run_cvapf, DwaParams, FieldParams, SearchBackend, SearchResult};
use crate::trajectory::Trajectory;

/// Slack kept below the control bound at the junction of two cycles.
pub const JUNCTION_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub backend: SearchBackend,
    /// Field parameters; `None` picks defaults from the scenario limits.
    pub field: Option<FieldParams>,
    pub dwa: DwaParams,
    /// Upper bound on the safety weight; `None` uses `1e-3 * lambda_min(Q0)`.
    pub rho_max: Option<f64>,
    pub cycle_limit: usize,
    pub cycle: CycleConfig,
    /// Knot clearance accepted by the post-hoc audit.
    pub clearance_tol: f64,
    /// Extra radius the search and the convex regions keep around every
    /// obstacle, so cycles do not end on an obstacle surface.
    pub safety_margin: f64,
    /// Pull the replanning point back to the last knot from which coasting
    /// over the search look-ahead stays clear of the obstacles.
    pub safe_junction: bool,
    /// Overlap the next cycle's computation with executing the current one.
    pub pipelined: bool,
    /// Fail when a cycle takes longer to compute than the time it covers.
    pub deadline: bool,
    /// Sleep added to every cycle's computation; only useful for exercising
    /// the deadline.
    pub artificial_delay: Option<Duration>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            backend: SearchBackend::Cvapf,
            field: None,
            dwa: DwaParams::default(),
            rho_max: None,
            cycle_limit: 300,
            cycle: CycleConfig::default(),
            clearance_tol: 1e-6,
            safety_margin: 0.5,
            safe_junction: true,
            pipelined: false,
            deadline: false,
            artificial_delay: None,
        }
    }
}

impl PlannerConfig {
    pub fn with_backend(backend: SearchBackend) -> Self {
        Self {
            backend,
            ..Self::default()
        }
    }

    pub fn field_params(&self, scenario: &Scenario) -> FieldParams {
        self.field.unwrap_or_else(|| FieldParams::for_limits(scenario.a_max))
    }

    pub fn rho_bound(scenario: &Scenario) -> f64 {
        1e-3 * scenario.q0_min_eigenvalue()
    }

    pub fn effective_rho_max(&self, scenario: &Scenario) -> f64 {
        self.rho_max.unwrap_or_else(|| Self::rho_bound(scenario))
    }

    fn look_ahead(&self, scenario: &Scenario) -> f64 {
        match self.backend {
            SearchBackend::Cvapf => self.field_params(scenario).t_w,
            SearchBackend::Cdwa => self.dwa.t_w,
        }
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<(), String> {
        let bound = Self::rho_bound(scenario);
        let rho_max = self.effective_rho_max(scenario);
        if !(rho_max >= 0.0) || rho_max > bound {
            return Err(format!("rho_max = {rho_max} must lie in [0, {bound}]"));
        }
        if !(self.safety_margin >= 0.0 && self.safety_margin.is_finite()) {
            return Err(format!("safety_margin = {} must be finite and non-negative", self.safety_margin));
        }
        if self.cycle_limit == 0 {
            return Err("cycle_limit must be at least 1".into());
        }
        match self.backend {
            SearchBackend::Cvapf => self.field_params(scenario).validate(scenario.a_max),
            SearchBackend::Cdwa => self.dwa.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    SearchFailed,
    Infeasible,
    ConstraintViolation,
    CycleLimit,
    /// A cycle's computation outlasted the horizon it applied.
    ExcessiveTime,
}

/// Number of controls to apply before replanning: the largest `m <=
/// min(n_max, n - 2)` whose junction controls `u_m`, `u_{m+1}` (1-based) are
/// strictly inside the control set, else `max(1, n / 2)`; `1` when `n < 3`.
pub fn adjust_horizon(n: usize, controls: &[DVector<f64>], scenario: &Scenario, n_max: usize) -> usize {
    if n < 3 {
        return 1;
    }
    let inside = |u: &DVector<f64>| scenario.control_norm_sq(u) <= 1.0 - JUNCTION_EPS;
    let top = n_max.min(n - 2);
    (1..=top)
        .rev()
        .find(|&m| inside(&controls[m - 1]) && inside(&controls[m]))
        .unwrap_or((n / 2).max(1))
}

/// Largest `m <= n_hat` whose knot coasts clear of the obstacles for `t_w`,
/// preferring knots that also keep the junction controls strictly inside the
/// control set; `n_hat` when no knot coasts clear.
pub fn safe_junction(traj: &Trajectory, n_hat: usize, scenario: &Scenario, t_w: f64) -> usize {
    let model = scenario.model;
    let clear = |m: usize| {
        let z = &traj.states[m];
        !coast_safety(&model.position(z), &model.velocity(z), &scenario.balls_at(traj.knot_time(m)), t_w).not_safe
    };
    let inside = |u: &DVector<f64>| scenario.control_norm_sq(u) <= 1.0 - JUNCTION_EPS;
    let junction_ok = |m: usize| inside(&traj.controls[m - 1]) && traj.controls.get(m).is_none_or(inside);
    if clear(n_hat) {
        return n_hat;
    }
    let safe: Vec<usize> = (1..n_hat).rev().filter(|&m| clear(m)).collect();
    safe.iter()
        .copied()
        .find(|&m| junction_ok(m))
        .or_else(|| safe.first().copied())
        .unwrap_or(n_hat)
}

/// Safety weight from the smallest time-to-collision of the search: zero
/// when nothing is hit within the window, growing linearly to `rho_max` as
/// the collision time shrinks to zero.
pub fn update_rho(min_ts: f64, t_w: f64, rho_max: f64) -> f64 {
    if min_ts.is_infinite() {
        return 0.0;
    }
    rho_max * (1.0 - (min_ts / t_w).clamp(0.0, 1.0))
}

/// One executed planning cycle.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub index: usize,
    pub result: CycleResult,
    pub dynamics: DiscreteDynamics,
    /// Knots actually executed, rolled out from the cycle start.
    pub applied: Trajectory,
    pub n_hat: usize,
    /// Weight chosen before any retry.
    pub rho_initial: f64,
    pub search_seconds: f64,
    pub compute_seconds: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub cycles: Vec<CycleRecord>,
    pub t_f: f64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub failure_detail: Option<String>,
}

impl RunResult {
    pub fn final_state(&self) -> &DVector<f64> {
        self.trajectory.last_state()
    }

    /// Cycles whose strict objective exceeds the previous one.
    pub fn non_contracting_steps(&self) -> usize {
        self.cycles
            .windows(2)
            .filter(|w| w[1].result.strict_objective > w[0].result.strict_objective)
            .count()
    }

    pub fn theorem4_rate(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        self.cycles.iter().filter(|c| c.result.theorem4_ok).count() as f64 / self.cycles.len() as f64
    }

    /// One JSON object per line, per cycle.
    pub fn cycle_log(&self) -> String {
        self.cycles.iter().map(|c| cycle_log_line(c).to_string() + "\n").collect()
    }
}

/// Record for the run log. Fields: `v` (format version, 1), `cycle`, `t0`,
/// `n`, `n_hat`, `rho_initial`, `rho`, `relaxed_objective`,
/// `strict_objective`, `relaxed_status`, `strict_status`, `strict_attempts`,
/// `theorem4`, `min_ts` (null when nothing is hit), `min_clearance`,
/// `search_s`, `relaxed_s`, `strict_s`, `compute_s`, `terminal`.
pub fn cycle_log_line(c: &CycleRecord) -> serde_json::Value {
    let r = &c.result;
    let d = &r.diagnostics;
    json!({
        "v": 1,
        "cycle": c.index,
        "t0": r.t0,
        "n": r.n,
        "n_hat": c.n_hat,
        "rho_initial": c.rho_initial,
        "rho": r.rho_used,
        "relaxed_objective": r.relaxed_objective,
        "strict_objective": r.strict_objective,
        "relaxed_status": d.relaxed_status,
        "strict_status": d.strict_status,
        "strict_attempts": d.strict_attempts,
        "theorem4": r.theorem4_ok,
        "min_ts": if r.search.min_ts.is_finite() { json!(r.search.min_ts) } else { json!(null) },
        "min_clearance": if d.min_clearance.is_finite() { json!(d.min_clearance) } else { json!(null) },
        "search_s": c.search_seconds,
        "relaxed_s": d.relaxed_seconds,
        "strict_s": d.strict_seconds,
        "compute_s": c.compute_seconds,
        "terminal": c.terminal,
    })
}

struct Failure {
    reason: FailureReason,
    detail: String,
}

impl Failure {
    fn new(reason: FailureReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: detail.into(),
        }
    }
}

impl From<CycleError> for Failure {
    fn from(e: CycleError) -> Self {
        let reason = match e {
            CycleError::SearchFailed => FailureReason::SearchFailed,
            CycleError::ResidualTooLarge(_) | CycleError::DegenerateSegment(_) => FailureReason::ConstraintViolation,
            _ => FailureReason::Infeasible,
        };
        Failure::new(reason, e.to_string())
    }
}

struct Computed {
    result: CycleResult,
    dynamics: DiscreteDynamics,
    rho_initial: f64,
    search_seconds: f64,
    compute_seconds: f64,
}

fn run_search(scenario: &Scenario, cfg: &PlannerConfig, z: &DVector<f64>, t: f64, d: &DiscreteDynamics) -> SearchResult {
    match cfg.backend {
        SearchBackend::Cvapf => run_cvapf(scenario, z, t, Propagator::Linear(d), &cfg.field_params(scenario)),
        SearchBackend::Cdwa => run_cdwa(scenario, z, t, Propagator::Linear(d), &cfg.dwa),
    }
}

/// Everything a cycle computes from its start state; pure apart from timing.
fn compute_cycle(scenario: &Scenario, cfg: &PlannerConfig, z: &DVector<f64>, t: f64) -> Result<Computed, Failure> {
    let start = Instant::now();
    if let Some(delay) = cfg.artificial_delay {
        std::thread::sleep(delay);
    }
    let dynamics = linearize(scenario.model, z, scenario.h).map_err(|e| Failure::new(FailureReason::Infeasible, e.to_string()))?;
    let padded = scenario.inflated_near(cfg.safety_margin, &scenario.model.position(z), t);
    let scenario = &padded;
    let search = run_search(scenario, cfg, z, t, &dynamics);
    let search_seconds = start.elapsed().as_secs_f64();
    if search.failed {
        return Err(Failure::new(FailureReason::SearchFailed, format!("search failed at t = {t:.3}")));
    }
    let issues = audit_search(scenario, &search, Propagator::Linear(&dynamics));
    if !issues.is_empty() {
        return Err(Failure::new(FailureReason::ConstraintViolation, issues.join("; ")));
    }
    let rho_max = cfg.effective_rho_max(scenario);
    let rho = update_rho(search.min_ts, cfg.look_ahead(scenario), rho_max);
    let prep = prepare_cycle(scenario, z, t, &dynamics, search, &cfg.cycle)?;
    let mut result = match solve_strict(&prep, scenario, rho, &cfg.cycle)? {
        StrictOutcome::Solved(r) => *r,
        StrictOutcome::Infeasible { .. } => {
            let retry = if rho == 0.0 { rho_max } else { (2.0 * rho).min(rho_max) };
            match solve_strict(&prep, scenario, retry, &cfg.cycle)? {
                StrictOutcome::Solved(r) => {
                    let mut r = *r;
                    r.diagnostics.strict_attempts = 2;
                    r
                }
                StrictOutcome::Infeasible { rho } => {
                    return Err(Failure::new(FailureReason::Infeasible, format!("strict program infeasible at t = {t:.3} (rho = {rho:e})")));
                }
            }
        }
    };
    result.t0 = t;
    Ok(Computed {
        result,
        dynamics,
        rho_initial: rho,
        search_seconds,
        compute_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trims and executes a computed cycle from `z` at `t`.
fn execute(scenario: &Scenario, cfg: &PlannerConfig, index: usize, c: Computed, z: &DVector<f64>, t: f64) -> CycleRecord {
    let controls = &c.result.trajectory.controls;
    let full = rollout(&c.dynamics, z, controls, t);
    let terminal = scenario.reached(full.last_state());
    let n_hat = if terminal {
        controls.len()
    } else {
        let n_hat = adjust_horizon(controls.len(), controls, scenario, scenario.n_max);
        if cfg.safe_junction {
            safe_junction(&full, n_hat, scenario, cfg.look_ahead(scenario))
        } else {
            n_hat
        }
    };
    let applied = if terminal { full } else { rollout(&c.dynamics, z, &controls[..n_hat], t) };
    CycleRecord {
        index,
        result: c.result,
        dynamics: c.dynamics,
        applied,
        n_hat,
        rho_initial: c.rho_initial,
        search_seconds: c.search_seconds,
        compute_seconds: c.compute_seconds,
        terminal,
    }
}

/// Post-hoc checks on executed knots: clearance at the knot times, state and
/// control bounds, and the compute deadline when enabled.
fn audit_record(scenario: &Scenario, cfg: &PlannerConfig, rec: &CycleRecord) -> Result<(), Failure> {
    let seg = &rec.applied;
    for (i, z) in seg.states.iter().enumerate().skip(1) {
        let t = seg.knot_time(i);
        let c = min_clearance(&scenario.model.position(z), &scenario.balls_at(t));
        if c < -cfg.clearance_tol {
            return Err(Failure::new(FailureReason::ConstraintViolation, format!("knot at t = {t:.3} has clearance {c:.3e}")));
        }
        if scenario.state_norm_sq(z) > 1.0 + 1e-6 {
            return Err(Failure::new(FailureReason::ConstraintViolation, format!("state bound violated at t = {t:.3}")));
        }
    }
    if let Some(u) = seg.controls.iter().find(|u| scenario.control_norm_sq(u) > 1.0 + 1e-6) {
        return Err(Failure::new(FailureReason::ConstraintViolation, format!("control bound violated ({:.6})", scenario.control_norm_sq(u))));
    }
    if cfg.deadline && rec.compute_seconds > rec.n_hat as f64 * scenario.h {
        return Err(Failure::new(
            FailureReason::ExcessiveTime,
            format!("cycle {} took {:.3} s for a {:.3} s horizon", rec.index, rec.compute_seconds, rec.n_hat as f64 * scenario.h),
        ));
    }
    Ok(())
}

struct Runner<'a> {
    scenario: &'a Scenario,
    cfg: &'a PlannerConfig,
    trajectory: Trajectory,
    cycles: Vec<CycleRecord>,
}

impl<'a> Runner<'a> {
    fn new(scenario: &'a Scenario, cfg: &'a PlannerConfig) -> Self {
        Self {
            scenario,
            cfg,
            trajectory: Trajectory::new(0.0, scenario.h, scenario.z0.clone()),
            cycles: Vec::new(),
        }
    }

    /// Appends an executed record; `Some` ends the run.
    fn commit(&mut self, rec: CycleRecord) -> Option<Result<(), Failure>> {
        let audit = audit_record(self.scenario, self.cfg, &rec);
        for (u, z) in rec.applied.controls.iter().zip(rec.applied.states.iter().skip(1)) {
            self.trajectory.push(u.clone(), z.clone());
        }
        let terminal = rec.terminal;
        self.cycles.push(rec);
        if let Err(f) = audit {
            return Some(Err(f));
        }
        if terminal {
            return Some(Ok(()));
        }
        None
    }

    fn finish(self, outcome: Result<(), Failure>) -> RunResult {
        let (success, failure_reason, failure_detail) = match outcome {
            Ok(()) => (true, None, None),
            Err(f) => (false, Some(f.reason), Some(f.detail)),
        };
        RunResult {
            t_f: self.trajectory.duration(),
            trajectory: self.trajectory,
            cycles: self.cycles,
            success,
            failure_reason,
            failure_detail,
        }
    }

    fn state(&self) -> (DVector<f64>, f64) {
        let t = &self.trajectory;
        (t.last_state().clone(), t.knot_time(t.horizon()))
    }
}

fn limit_failure(cfg: &PlannerConfig) -> Failure {
    Failure::new(FailureReason::CycleLimit, format!("no arrival within {} cycles", cfg.cycle_limit))
}

/// Runs the planner on `scenario`. Failures are reported in the result.
pub fn run(scenario: &Scenario, cfg: &PlannerConfig) -> RunResult {
    let mut runner = Runner::new(scenario, cfg);
    if let Err(msg) = cfg.validate(scenario) {
        return runner.finish(Err(Failure::new(FailureReason::Infeasible, msg)));
    }
    let outcome = if cfg.pipelined {
        run_pipelined(&mut runner)
    } else {
        run_sequential(&mut runner)
    };
    runner.finish(outcome)
}

fn run_sequential(runner: &mut Runner) -> Result<(), Failure> {
    let (scenario, cfg) = (runner.scenario, runner.cfg);
    for index in 0..cfg.cycle_limit {
        let (z, t) = runner.state();
        let computed = compute_cycle(scenario, cfg, &z, t)?;
        let rec = execute(scenario, cfg, index, computed, &z, t);
        if let Some(done) = runner.commit(rec) {
            return done;
        }
    }
    Err(limit_failure(cfg))
}

/// Same cycles as [`run_sequential`], but cycle `K + 1` is computed on a
/// worker from the predicted state at cycle `K`'s trim point while cycle
/// `K` is audited and appended.
fn run_pipelined(runner: &mut Runner) -> Result<(), Failure> {
    let (scenario, cfg) = (runner.scenario, runner.cfg);
    let (z, t) = runner.state();
    let mut pending = compute_cycle(scenario, cfg, &z, t)?;
    let (mut z, mut t) = (z, t);
    for index in 0..cfg.cycle_limit {
        let rec = execute(scenario, cfg, index, pending, &z, t);
        let next_z = rec.applied.last_state().clone();
        let next_t = rec.applied.knot_time(rec.applied.horizon());
        let more = !rec.terminal && index + 1 < cfg.cycle_limit;
        let (done, next) = std::thread::scope(|s| {
            let worker = more.then(|| s.spawn(|| compute_cycle(scenario, cfg, &next_z, next_t)));
            let done = runner.commit(rec);
            (done, worker.map(|w| w.join().expect("cycle worker panicked")))
        });
        if let Some(done) = done {
            return done;
        }
        match next {
            Some(n) => pending = n?,
            None => break,
        }
        z = next_z;
        t = next_t;
    }
    Err(limit_failure(cfg))
}

/// Largest deviation between the stored knots and an open-loop replay of the
/// concatenated controls from the scenario start, re-linearizing at each
/// cycle start exactly as the planner does.
pub fn replay_error(scenario: &Scenario, run: &RunResult) -> f64 {
    let mut z = scenario.z0.clone();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for rec in &run.cycles {
        let Ok(d) = linearize(scenario.model, &z, scenario.h) else {
            return f64::INFINITY;
        };
        for u in &rec.applied.controls {
            z = d.step(&z, u);
            k += 1;
            worst = worst.max((&z - &run.trajectory.states[k]).amax());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::scenario::{generate_scenario, rest_state, GenParams};
    use crate::dynamics::VehicleModel;

    fn free(z0: Vec2, zf: Vec2) -> Scenario {
        let m = VehicleModel::DoubleIntegrator;
        Scenario::new(m, rest_state(m, z0, 0.0), rest_state(m, zf, 0.0), 12.0, 20.0)
    }

    fn controls(norms: &[f64], s: &Scenario) -> Vec<DVector<f64>> {
        norms.iter().map(|n| DVector::from_vec(vec![n.sqrt() * s.a_max, 0.0])).collect()
    }

    #[test]
    fn horizon_examples() {
        let s = free(Vec2::zeros(), Vec2::new(1.0, 1.0));
        assert_eq!(adjust_horizon(10, &controls(&[0.5; 10], &s), &s, 20), 8);
        assert_eq!(adjust_horizon(10, &controls(&[1.0; 10], &s), &s, 20), 5);
        assert_eq!(adjust_horizon(2, &controls(&[0.5; 2], &s), &s, 20), 1);
        assert_eq!(adjust_horizon(10, &controls(&[0.5; 10], &s), &s, 4), 4);
        let mut n = vec![0.5; 10];
        n[8] = 1.0;
        assert_eq!(adjust_horizon(10, &controls(&n, &s), &s, 20), 7);
    }

    #[test]
    fn junction_pulled_back_before_a_ball() {
        let s = free(Vec2::zeros(), Vec2::new(100.0, 0.0)).with_obstacles(vec![crate::scenario::Obstacle::fixed(0, Vec2::new(20.0, 0.0), 2.0)]);
        // constant 8 m/s along +x: knot m sits at x = 2m, the surface at x = 18
        let mut traj = Trajectory::new(0.0, 0.25, DVector::from_vec(vec![0.0, 0.0, 8.0, 0.0]));
        for _ in 0..8 {
            let z = traj.last_state().clone();
            traj.push(DVector::zeros(2), DVector::from_vec(vec![z[0] + 2.0, 0.0, 8.0, 0.0]));
        }
        assert_eq!(safe_junction(&traj, 7, &s, 1.0), 4);
        assert_eq!(safe_junction(&traj, 7, &s, 0.5), 6);
        // nothing coasts clear for three seconds: keep the junction
        assert_eq!(safe_junction(&traj, 7, &s, 3.0), 7);
        let open = free(Vec2::zeros(), Vec2::new(100.0, 0.0));
        assert_eq!(safe_junction(&traj, 7, &open, 1.0), 7);
    }

    #[test]
    fn rho_examples() {
        assert_eq!(update_rho(f64::INFINITY, 1.0, 1e-3), 0.0);
        assert_eq!(update_rho(0.0, 1.0, 1e-3), 1e-3);
        assert!((update_rho(0.5, 1.0, 1e-3) - 5e-4).abs() < 1e-18);
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let r = update_rho(k as f64 * 0.1, 1.0, 1e-3);
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn rho_max_above_bound_rejected() {
        let s = free(Vec2::zeros(), Vec2::new(100.0, 100.0));
        let cfg = PlannerConfig {
            rho_max: Some(1.0),
            ..PlannerConfig::default()
        };
        assert!(cfg.validate(&s).is_err());
        let r = run(&s, &cfg);
        assert!(!r.success);
    }

    #[test]
    fn start_within_gamma_finishes_in_one_cycle() {
        let s = free(Vec2::new(50.0, 50.0), Vec2::new(51.0, 51.0));
        let r = run(&s, &PlannerConfig::default());
        assert!(r.success, "{:?}", r.failure_detail);
        assert_eq!(r.cycles.len(), 1);
        assert_eq!(r.t_f, r.cycles[0].result.n as f64 * s.h);
    }

    #[test]
    fn free_run_reaches_target_and_replays() {
        let s = free(Vec2::zeros(), Vec2::new(160.0, 160.0));
        let r = run(&s, &PlannerConfig::default());
        assert!(r.success, "{:?}", r.failure_detail);
        assert!(s.terminal_distance(r.final_state()) <= s.gamma + 1e-9);
        let nh: usize = r.cycles.iter().map(|c| c.n_hat).sum();
        assert_eq!(r.t_f, nh as f64 * s.h);
        assert!(r.cycles.last().unwrap().terminal);
        assert!(replay_error(&s, &r) <= 1e-9);
        assert_eq!(r.cycle_log().lines().count(), r.cycles.len());
    }

    #[test]
    fn table1_map_succeeds() {
        let s = generate_scenario(&GenParams::table1(20250712)).unwrap();
        for backend in [SearchBackend::Cvapf, SearchBackend::Cdwa] {
            let r = run(&s, &PlannerConfig::with_backend(backend));
            assert!(r.success, "{backend:?}: {:?} {:?}", r.failure_reason, r.failure_detail);
            assert!(replay_error(&s, &r) <= 1e-9);
        }
    }

    #[test]
    fn pipelined_matches_sequential() {
        let s = generate_scenario(&GenParams::table5(3, 3)).unwrap();
        let a = run(&s, &PlannerConfig::default());
        let b = run(
            &s,
            &PlannerConfig {
                pipelined: true,
                ..PlannerConfig::default()
            },
        );
        assert_eq!(a.success, b.success);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.cycles.len(), b.cycles.len());
    }

    #[test]
    fn slowed_solver_misses_deadline() {
        let s = free(Vec2::zeros(), Vec2::new(160.0, 160.0));
        let cfg = PlannerConfig {
            deadline: true,
            artificial_delay: Some(Duration::from_secs(3)),
            cycle_limit: 2,
            ..PlannerConfig::default()
        };
        let r = run(&s, &cfg);
        assert_eq!(r.failure_reason, Some(FailureReason::ExcessiveTime));
    }

    #[test]
    fn enclosed_moving_start_fails_in_search() {
        let mut s = free(Vec2::zeros(), Vec2::new(160.0, 160.0));
        s.obstacles = (0..16)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 16.0;
                crate::scenario::Obstacle::fixed(k, Vec2::new(50.0 + 6.0 * a.cos(), 50.0 + 6.0 * a.sin()), 3.0)
            })
            .collect();
        s.z0 = DVector::from_vec(vec![50.0, 50.0, 12.0, 0.0]);
        let r = run(&s, &PlannerConfig::default());
        assert_eq!(r.failure_reason, Some(FailureReason::SearchFailed));
    }
}
