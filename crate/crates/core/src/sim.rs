//! Closed-loop simulation against the (possibly moving) obstacles, run
//! metrics, clearance traces and seeded batch benchmarks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::min_clearance;
use crate::planner::{replay_error, run, FailureReason, PlannerConfig, RunResult};
use crate::scenario::{generate_scenario, GenParams, Scenario};
use crate::trajectory::Trajectory;

/// Which failure criteria a run hit. Infeasibility covers search and solver
/// failures and the cycle limit; constraint violation is the post-hoc audit;
/// excessive time is the compute deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureCriteria {
    pub count_infeasibility: bool,
    pub count_constraint_violation: bool,
    pub count_excessive_time: bool,
}

impl FailureCriteria {
    pub fn from_reason(reason: Option<FailureReason>) -> Self {
        let mut c = Self::default();
        match reason {
            None => {}
            Some(FailureReason::ConstraintViolation) => c.count_constraint_violation = true,
            Some(FailureReason::ExcessiveTime) => c.count_excessive_time = true,
            Some(FailureReason::SearchFailed | FailureReason::Infeasible | FailureReason::CycleLimit) => c.count_infeasibility = true,
        }
        c
    }
}

/// End-to-end metrics of one run. Clearances are `+inf` on an obstacle-free
/// map and serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub failures: FailureCriteria,
    pub t_f: f64,
    pub cycles: usize,
    pub compute_time_total: f64,
    pub compute_time_avg: f64,
    pub compute_time_median: f64,
    pub compute_time_worst: f64,
    /// Smallest knot distance to a true obstacle surface.
    #[serde(with = "inf_as_null")]
    pub min_clearance: f64,
    /// Same, at the midpoints between knots. Reported only.
    #[serde(with = "inf_as_null")]
    pub midpoint_clearance: f64,
    pub theorem4_rate: f64,
    pub theorem4_cycles: usize,
    pub non_contracting_steps: usize,
    pub terminal_distance: f64,
    pub replay_error: f64,
}

pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl RunMetrics {
    pub fn from_run(scenario: &Scenario, run: &RunResult) -> Self {
        let times: Vec<f64> = run.cycles.iter().map(|c| c.compute_seconds).collect();
        let total: f64 = times.iter().sum();
        let n = times.len();
        Self {
            success: run.success,
            failure_reason: run.failure_reason,
            failures: FailureCriteria::from_reason(run.failure_reason),
            t_f: run.t_f,
            cycles: n,
            compute_time_total: total,
            compute_time_avg: if n == 0 { 0.0 } else { total / n as f64 },
            compute_time_median: median(&times),
            compute_time_worst: times.iter().copied().fold(0.0, f64::max),
            min_clearance: fold_min(clearance_trace(&run.trajectory, scenario).iter().map(|p| p.clearance)),
            midpoint_clearance: fold_min(midpoint_trace(&run.trajectory, scenario).iter().map(|p| p.clearance)),
            theorem4_rate: run.theorem4_rate(),
            theorem4_cycles: run.cycles.iter().filter(|c| c.result.theorem4_ok).count(),
            non_contracting_steps: run.non_contracting_steps(),
            terminal_distance: scenario.terminal_distance(run.final_state()),
            replay_error: replay_error(scenario, run),
        }
    }
}

fn fold_min(xs: impl Iterator<Item = f64>) -> f64 {
    xs.fold(f64::INFINITY, f64::min)
}

/// Distance from the vehicle to the nearest obstacle surface at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearancePoint {
    pub t: f64,
    #[serde(with = "inf_as_null")]
    pub clearance: f64,
}

/// Per knot: the smallest `|p_i - c_j(t_i)| - r_j` over obstacles.
pub fn clearance_trace(traj: &Trajectory, scenario: &Scenario) -> Vec<ClearancePoint> {
    (0..traj.states.len())
        .map(|i| {
            let t = traj.knot_time(i);
            ClearancePoint {
                t,
                clearance: min_clearance(&traj.position(i), &scenario.balls_at(t)),
            }
        })
        .collect()
}

/// Clearance halfway between consecutive knots, with the vehicle position
/// interpolated linearly.
pub fn midpoint_trace(traj: &Trajectory, scenario: &Scenario) -> Vec<ClearancePoint> {
    (1..traj.states.len())
        .map(|i| {
            let t = traj.knot_time(i - 1) + 0.5 * traj.h;
            let p = 0.5 * (traj.position(i - 1) + traj.position(i));
            ClearancePoint {
                t,
                clearance: min_clearance(&p, &scenario.balls_at(t)),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub run: RunResult,
    pub metrics: RunMetrics,
}

/// Runs the planner with obstacles advancing in lockstep with the applied
/// controls. Obstacle motion is a pure function of time, so on a static map
/// this is exactly [`run`].
pub fn simulate(scenario: &Scenario, cfg: &PlannerConfig) -> Simulation {
    let run = run(scenario, cfg);
    let metrics = RunMetrics::from_run(scenario, &run);
    Simulation { run, metrics }
}

/// Table row: a single run is an aggregate of one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean final time over successful runs; `None` without any.
    pub t_f_mean: Option<f64>,
    pub cycles: usize,
    /// Mean compute time per cycle over all cycles.
    pub compute_time_avg: f64,
    /// Median of the per-run median cycle times.
    pub compute_time_median: f64,
    pub compute_time_worst: f64,
    pub theorem4_rate: f64,
    #[serde(with = "inf_as_null")]
    pub min_clearance: f64,
}

impl Aggregate {
    /// Fold of per-run metrics; `None` entries are runs whose map could not
    /// be generated and count as failures.
    pub fn of<'a>(runs: impl IntoIterator<Item = Option<&'a RunMetrics>>) -> Self {
        let mut a = Aggregate {
            runs: 0,
            successes: 0,
            success_rate: 0.0,
            t_f_mean: None,
            cycles: 0,
            compute_time_avg: 0.0,
            compute_time_median: 0.0,
            compute_time_worst: 0.0,
            theorem4_rate: 0.0,
            min_clearance: f64::INFINITY,
        };
        let (mut total, mut t4, mut tf) = (0.0, 0, 0.0);
        let mut medians = Vec::new();
        for m in runs {
            a.runs += 1;
            let Some(m) = m else { continue };
            if m.success {
                a.successes += 1;
                tf += m.t_f;
            }
            a.cycles += m.cycles;
            total += m.compute_time_total;
            t4 += m.theorem4_cycles;
            medians.push(m.compute_time_median);
            a.compute_time_worst = a.compute_time_worst.max(m.compute_time_worst);
            a.min_clearance = a.min_clearance.min(m.min_clearance);
        }
        if a.runs > 0 {
            a.success_rate = a.successes as f64 / a.runs as f64;
        }
        if a.successes > 0 {
            a.t_f_mean = Some(tf / a.successes as f64);
        }
        if a.cycles > 0 {
            a.compute_time_avg = total / a.cycles as f64;
            a.theorem4_rate = t4 as f64 / a.cycles as f64;
        }
        a.compute_time_median = median(&medians);
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub seed: u64,
    /// `Err` holds the generator's message when no map could be placed.
    pub metrics: Result<RunMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<BatchRow>,
    pub aggregate: Aggregate,
}

/// Generates one map per seed from `params` and simulates each, in
/// parallel. Rows come back in seed-list order.
pub fn batch(seeds: &[u64], params: &GenParams, cfg: &PlannerConfig) -> BatchReport {
    let rows: Vec<BatchRow> = seeds
        .par_iter()
        .map(|&seed| {
            let p = GenParams { seed, ..params.clone() };
            let metrics = generate_scenario(&p).map(|s| simulate(&s, cfg).metrics).map_err(|e| e.to_string());
            BatchRow { seed, metrics }
        })
        .collect();
    let aggregate = Aggregate::of(rows.iter().map(|r| r.metrics.as_ref().ok()));
    BatchReport { rows, aggregate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleModel;
    use crate::geometry::Vec2;
    use crate::scenario::{rest_state, Obstacle};
    use nalgebra::DVector;

    fn straight_pass(offset: f64) -> (Trajectory, Scenario) {
        let m = VehicleModel::DoubleIntegrator;
        let s = Scenario::new(m, rest_state(m, Vec2::zeros(), 0.0), rest_state(m, Vec2::new(40.0, 0.0), 0.0), 12.0, 20.0)
            .with_obstacles(vec![Obstacle::fixed(0, Vec2::new(20.0, 5.0 + offset), 5.0)]);
        let mut t = Trajectory::new(0.0, 0.25, DVector::from_vec(vec![0.0, 0.0, 4.0, 0.0]));
        for k in 1..=40 {
            t.push(DVector::zeros(2), DVector::from_vec(vec![k as f64, 0.0, 4.0, 0.0]));
        }
        (t, s)
    }

    #[test]
    fn closest_approach_of_a_straight_pass() {
        let (t, s) = straight_pass(2.0);
        let trace = clearance_trace(&t, &s);
        let min = trace.iter().map(|p| p.clearance).fold(f64::INFINITY, f64::min);
        assert!((min - 2.0).abs() < 1e-12);
        assert_eq!(trace.len(), 41);
        assert_eq!(trace[4].t, 1.0);
    }

    #[test]
    fn knot_on_the_surface_is_zero() {
        let (t, s) = straight_pass(0.0);
        let min = clearance_trace(&t, &s).iter().map(|p| p.clearance).fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
    }

    #[test]
    fn open_map_trace_is_infinite_and_null() {
        let (t, mut s) = straight_pass(0.0);
        s.obstacles.clear();
        let trace = clearance_trace(&t, &s);
        assert!(trace.iter().all(|p| p.clearance == f64::INFINITY));
        let j = serde_json::to_value(trace[0]).unwrap();
        assert!(j["clearance"].is_null());
        let back: ClearancePoint = serde_json::from_value(j).unwrap();
        assert_eq!(back.clearance, f64::INFINITY);
    }

    #[test]
    fn midpoints_sit_between_knots() {
        let (t, s) = straight_pass(2.0);
        let mid = midpoint_trace(&t, &s);
        assert_eq!(mid.len(), 40);
        assert_eq!(mid[0].t, 0.125);
        assert!(mid.iter().all(|p| p.clearance >= 2.0 - 1e-12));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }

    #[test]
    fn failure_reasons_map_to_criteria() {
        assert_eq!(FailureCriteria::from_reason(None), FailureCriteria::default());
        assert!(FailureCriteria::from_reason(Some(FailureReason::SearchFailed)).count_infeasibility);
        assert!(FailureCriteria::from_reason(Some(FailureReason::ConstraintViolation)).count_constraint_violation);
        assert!(FailureCriteria::from_reason(Some(FailureReason::ExcessiveTime)).count_excessive_time);
    }

    #[test]
    fn single_seed_batch_matches_its_run() {
        let p = GenParams::table1(20250712);
        let cfg = PlannerConfig::default();
        let b = batch(&[p.seed], &p, &cfg);
        let m = b.rows[0].metrics.as_ref().unwrap();
        let a = &b.aggregate;
        assert_eq!(a.runs, 1);
        assert_eq!(a.success_rate, if m.success { 1.0 } else { 0.0 });
        assert_eq!(a.cycles, m.cycles);
        assert_eq!(a.compute_time_median, m.compute_time_median);
        assert_eq!(a.compute_time_worst, m.compute_time_worst);
        assert!((a.compute_time_avg - m.compute_time_avg).abs() <= 1e-15 * m.compute_time_avg.max(1.0));
        assert_eq!(a.theorem4_rate, m.theorem4_rate);
        assert_eq!(a.min_clearance, m.min_clearance);
        assert_eq!(a.t_f_mean, m.success.then_some(m.t_f));
    }

    #[test]
    fn static_simulation_equals_planner_run() {
        let s = generate_scenario(&GenParams::table1(20250712)).unwrap();
        let cfg = PlannerConfig::default();
        let sim = simulate(&s, &cfg);
        let r = run(&s, &cfg);
        assert_eq!(sim.run.trajectory, r.trajectory);
        assert_eq!(sim.metrics.success, r.success);
        assert!(sim.metrics.min_clearance > 0.0);
    }
}
