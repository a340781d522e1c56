//! Trajectory searches producing a collision-free, dynamically feasible
//! nominal trajectory for one planning cycle.

pub mod cdwa;
pub mod cvapf;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Propagator, VehicleModel};
use crate::geometry::{min_clearance, Ball, Vec2};
use crate::scenario::Scenario;
use crate::trajectory::Trajectory;

pub use cdwa::{run_cdwa, DwaParams};
pub use cvapf::{run_cvapf, FieldParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchBackend {
    #[default]
    Cvapf,
    Cdwa,
}

impl std::str::FromStr for SearchBackend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cvapf" => Ok(Self::Cvapf),
            "cdwa" => Ok(Self::Cdwa),
            other => Err(format!("unknown search backend `{other}` (expected cvapf or cdwa)")),
        }
    }
}

/// Output of a search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub trajectory: Trajectory,
    /// Number of controls.
    pub n: usize,
    /// Coasting from the last knot enters an obstacle within the look-ahead.
    pub not_safe: bool,
    /// Smallest time-to-collision seen over the generated knots.
    pub min_ts: f64,
    pub failed: bool,
}

/// Coasting check from one knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Safety {
    pub not_safe: bool,
    /// Earliest entry time into any ball within the window, `+inf` if none.
    pub min_ts: f64,
}

/// Earliest `t in [0, t_w]` with `pos + vel t` inside a ball (boundary
/// included), from the smaller root of `|d + v t|^2 = r^2` per ball.
pub fn coast_safety(pos: &Vec2, vel: &Vec2, balls: &[Ball], t_w: f64) -> Safety {
    let mut first = f64::INFINITY;
    for b in balls {
        let d = pos - b.center;
        let c = d.norm_squared() - b.radius * b.radius;
        if c <= 0.0 {
            first = 0.0;
            break;
        }
        let a = vel.norm_squared();
        if a == 0.0 {
            continue;
        }
        let half_b = d.dot(vel);
        let disc = half_b * half_b - a * c;
        if disc < 0.0 {
            continue;
        }
        // c > 0 puts both roots on the same side of zero.
        let t1 = c / (-half_b + disc.sqrt());
        if half_b < 0.0 && t1 >= 0.0 && t1 <= t_w {
            first = first.min(t1);
        }
    }
    Safety {
        not_safe: first.is_finite(),
        min_ts: first,
    }
}

/// [`coast_safety`] from state `z` against the obstacles frozen at `t_now`.
pub fn compute_safety(scenario: &Scenario, z: &DVector<f64>, t_now: f64, t_w: f64) -> Safety {
    let model = scenario.model;
    coast_safety(&model.position(z), &model.velocity(z), &scenario.balls_at(t_now), t_w)
}

/// Control that moves the velocity of `z` to `v_des` in one step of length
/// `h`, for the built-in models.
pub fn control_toward_velocity(model: VehicleModel, z: &DVector<f64>, v_des: &Vec2, h: f64) -> DVector<f64> {
    match model {
        VehicleModel::DoubleIntegrator => {
            let v = Vec2::new(z[2], z[3]);
            let a = (v_des - v) / h;
            DVector::from_vec(vec![a.x, a.y])
        }
        VehicleModel::Unicycle => {
            let speed = v_des.norm();
            let turn = if speed > 0.0 {
                wrap_angle(v_des.y.atan2(v_des.x) - z[2])
            } else {
                0.0
            };
            DVector::from_vec(vec![(speed - z[3]) / h, turn / h])
        }
    }
}

/// Angle in `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Scales `u` onto the control ellipsoid `u'Q2u <= 1` when outside it.
pub fn clamp_control(scenario: &Scenario, u: DVector<f64>) -> DVector<f64> {
    let n2 = scenario.control_norm_sq(&u);
    if n2 > 1.0 {
        let s = 1.0 / n2.sqrt();
        // guard against rounding back above one
        u * (s * (1.0 - 1e-15))
    } else {
        u
    }
}

/// Result builder shared by both searches: a trajectory that failed at a
/// colliding knot, or one that ran out of iterations while still unsafe.
pub(crate) fn finish(traj: Trajectory, not_safe: bool, min_ts: f64, collided: bool) -> SearchResult {
    let n = traj.horizon();
    SearchResult {
        trajectory: traj,
        n,
        not_safe,
        min_ts,
        failed: collided || not_safe,
    }
}

/// Violations of the search invariants, checked independently of the
/// searches: knots outside every ball at their time, control and state norm
/// constraints, horizon bounds, and the one-step dynamics residual against
/// `propagator`.
pub fn audit_search(scenario: &Scenario, result: &SearchResult, propagator: Propagator) -> Vec<String> {
    let mut out = Vec::new();
    let traj = &result.trajectory;
    if !result.failed && !(scenario.n_min <= result.n && result.n <= scenario.n_max) {
        out.push(format!("horizon {} outside [{}, {}]", result.n, scenario.n_min, scenario.n_max));
    }
    for (i, z) in traj.states.iter().enumerate() {
        let t = traj.knot_time(i);
        let clearance = min_clearance(&scenario.model.position(z), &scenario.balls_at(t));
        // the start is an input and may sit on a surface up to round-off
        let floor = if i == 0 { -1e-9 } else { 0.0 };
        if clearance < floor {
            out.push(format!("knot {i} inside an obstacle (clearance {clearance:.3e})"));
        }
        if scenario.state_norm_sq(z) > 1.0 + 1e-9 {
            out.push(format!("knot {i} violates the state constraint"));
        }
    }
    for (i, u) in traj.controls.iter().enumerate() {
        if scenario.control_norm_sq(u) > 1.0 + 1e-9 {
            out.push(format!("control {i} violates the control constraint"));
        }
        let r = (propagator.step(&traj.states[i], u) - &traj.states[i + 1]).amax();
        if r > 1e-9 {
            out.push(format!("control {i} dynamics residual {r:.3e}"));
        }
    }
    out
}
