//! Customized dynamic window search for general control-affine models.
//!
//! The window is a grid over the bounding box of the control ellipsoid,
//! filtered by the control and next-state constraints. Candidates are scored
//! on the first knot they influence (two steps ahead, since the next knot
//! position does not depend on the current control).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{coast_safety, finish, SearchResult};
use crate::dynamics::Propagator;
use crate::geometry::min_clearance;
use crate::scenario::Scenario;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwaParams {
    /// Samples per control axis.
    pub accel_grid: usize,
    pub w_heading: f64,
    pub w_clearance: f64,
    pub w_speed: f64,
    /// Clearance at which the clearance score saturates (m).
    pub activation_dist: f64,
    /// Coasting look-ahead window (s).
    pub t_w: f64,
}

impl Default for DwaParams {
    fn default() -> Self {
        Self {
            accel_grid: 9,
            w_heading: 1.0,
            w_clearance: 0.4,
            w_speed: 0.3,
            activation_dist: 15.0,
            t_w: 1.0,
        }
    }
}

impl DwaParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.accel_grid < 3 {
            return Err("accel_grid must be at least 3".into());
        }
        let w = [self.w_heading, self.w_clearance, self.w_speed];
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err("weights must be non-negative and not all zero".into());
        }
        if !(self.t_w > 0.0 && self.activation_dist > 0.0) {
            return Err("t_w and activation_dist must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("every candidate control leads into an obstacle")]
pub struct AllCandidatesColliding;

/// Grid controls `u` with `u'Q2u <= 1` whose successor satisfies the state
/// constraint. When the filter leaves nothing, the single grid control with
/// the smallest successor state-constraint value is returned.
pub fn dynamic_window(scenario: &Scenario, z: &DVector<f64>, propagator: Propagator, params: &DwaParams) -> Vec<DVector<f64>> {
    let m = scenario.model.control_dim();
    let half: Vec<f64> = match scenario.q2.clone().try_inverse() {
        Some(inv) => (0..m).map(|i| inv[(i, i)].max(0.0).sqrt()).collect(),
        None => vec![0.0; m],
    };
    let g = params.accel_grid;
    let axis = |i: usize, k: usize| -half[i] * (1.0 - 2.0 * k as f64 / (g - 1) as f64);
    let total = g.pow(m as u32);
    let mut inside = Vec::new();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for idx in 0..total {
        let mut rem = idx;
        let u = DVector::from_fn(m, |i, _| {
            let k = rem % g;
            rem /= g;
            // middle sample exactly zero for odd grids
            if 2 * k + 1 == g {
                0.0
            } else {
                axis(i, k)
            }
        });
        if scenario.control_norm_sq(&u) > 1.0 {
            continue;
        }
        let next = scenario.state_norm_sq(&propagator.step(z, &u));
        if next <= 1.0 {
            inside.push(u);
        } else if best.as_ref().is_none_or(|(v, _)| next < *v) {
            best = Some((next, u));
        }
    }
    if inside.is_empty() {
        inside.push(best.map(|(_, u)| u).unwrap_or_else(|| DVector::zeros(m)));
    }
    inside
}

/// Scores of all candidates; `None` marks a candidate whose influenced knot
/// collides. Also reports which candidates coast safely from the next knot.
fn scores(
    candidates: &[DVector<f64>],
    z: &DVector<f64>,
    scenario: &Scenario,
    propagator: Propagator,
    t_now: f64,
    params: &DwaParams,
) -> Vec<Option<(f64, bool)>> {
    let model = scenario.model;
    let h = scenario.h;
    let target = scenario.target_position();
    let zero = DVector::zeros(model.control_dim());
    let balls_next = scenario.balls_at(t_now + h);
    let balls_after = scenario.balls_at(t_now + 2.0 * h);
    candidates
        .iter()
        .map(|u| {
            let z1 = propagator.step(z, u);
            let p1 = model.position(&z1);
            let p2 = model.position(&propagator.step(&z1, &zero));
            let clearance = min_clearance(&p2, &balls_after);
            if clearance < 0.0 {
                return None;
            }
            let step = p2 - p1;
            let to_target = target - p1;
            let heading = if step.norm() > 0.0 && to_target.norm() > 0.0 {
                step.dot(&to_target) / (step.norm() * to_target.norm())
            } else {
                0.0
            };
            let score = params.w_heading * heading
                + params.w_clearance * (clearance / params.activation_dist).min(1.0)
                + params.w_speed * model.speed(&z1) / scenario.v_max;
            let safe = !coast_safety(&p1, &model.velocity(&z1), &balls_next, params.t_w).not_safe;
            Some((score, safe))
        })
        .collect()
}

/// Index of the best candidate. Colliding candidates are discarded; among the
/// rest, those that coast safely from the next knot are preferred. Ties go to
/// the lower index.
pub fn evaluate_candidates(
    candidates: &[DVector<f64>],
    z: &DVector<f64>,
    scenario: &Scenario,
    propagator: Propagator,
    t_now: f64,
    params: &DwaParams,
) -> Result<usize, AllCandidatesColliding> {
    let s = scores(candidates, z, scenario, propagator, t_now, params);
    let any_safe = s.iter().flatten().any(|(_, safe)| *safe);
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in s.iter().enumerate() {
        let Some((score, safe)) = entry else { continue };
        if any_safe && !safe {
            continue;
        }
        if best.is_none_or(|(_, b)| *score > b) {
            best = Some((i, *score));
        }
    }
    best.map(|(i, _)| i).ok_or(AllCandidatesColliding)
}

/// Runs the search from `z0` at time `t0` with the same exit rule as the
/// field search.
pub fn run_cdwa(scenario: &Scenario, z0: &DVector<f64>, t0: f64, propagator: Propagator, params: &DwaParams) -> SearchResult {
    let model = scenario.model;
    let h = scenario.h;
    let zero = DVector::zeros(model.control_dim());
    let mut traj = Trajectory::new(t0, h, z0.clone());
    let mut not_safe = true;
    let mut min_ts = f64::INFINITY;
    let mut n = 0;
    while (n < scenario.n_min || not_safe) && n < scenario.n_max {
        let z = traj.last_state().clone();
        let t_now = t0 + n as f64 * h;
        let balls_next = scenario.balls_at(t_now + h);
        if min_clearance(&model.position(&propagator.step(&z, &zero)), &balls_next) < 0.0 {
            return finish(traj, true, 0.0, true);
        }
        let window = dynamic_window(scenario, &z, propagator, params);
        let Ok(k) = evaluate_candidates(&window, &z, scenario, propagator, t_now, params) else {
            return finish(traj, true, 0.0, true);
        };
        let u = window[k].clone();
        let zn = propagator.step(&z, &u);
        let safety = coast_safety(&model.position(&zn), &model.velocity(&zn), &balls_next, params.t_w);
        not_safe = safety.not_safe;
        min_ts = min_ts.min(safety.min_ts);
        traj.push(u, zn);
        n += 1;
    }
    finish(traj, not_safe, min_ts, false)
}
