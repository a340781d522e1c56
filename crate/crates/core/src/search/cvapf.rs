//! Customized vortex artificial potential field search.
//!
//! Each step extrapolates the next knot position with the current velocity,
//! evaluates the normalized field direction there and scans speeds from
//! `v_max` down to zero for a velocity that is reachable in one step, within
//! the state constraint and safe to coast on for `t_w`. When no speed
//! qualifies a bounded braking acceleration is applied instead.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{clamp_control, coast_safety, control_toward_velocity, finish, SearchResult};
use crate::dynamics::Propagator;
use crate::geometry::{min_clearance, Ball, Vec2};
use crate::rng::{derive_seed, SeededRng};
use crate::scenario::Scenario;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Repulsion weight.
    pub zeta: f64,
    /// Repulsion sharpness.
    pub beta: f64,
    /// Vortex gain applied near obstacles.
    pub zeta_v0: f64,
    /// Surface distance below which the vortex is active.
    pub activation_dist: f64,
    /// Braking part of the fallback acceleration.
    pub a0: f64,
    /// Steering part of the fallback acceleration.
    pub a1: f64,
    /// Coasting look-ahead window (s).
    pub t_w: f64,
    pub speed_steps: usize,
}

impl FieldParams {
    /// Defaults for a vehicle with acceleration limit `a_max`.
    pub fn for_limits(a_max: f64) -> Self {
        Self {
            zeta: 1.5e4,
            beta: 3.0,
            zeta_v0: 300.0,
            activation_dist: 15.0,
            a0: 0.55 * a_max,
            a1: 0.40 * a_max,
            t_w: 1.0,
            speed_steps: 20,
        }
    }

    pub fn validate(&self, a_max: f64) -> Result<(), String> {
        if !(self.zeta > 0.0 && self.beta > 0.0) {
            return Err("zeta and beta must be positive".into());
        }
        if !(self.zeta_v0 >= 0.0 && self.a0 >= 0.0 && self.a1 >= 0.0) {
            return Err("zeta_v0, a0 and a1 must be non-negative".into());
        }
        if self.a0 + self.a1 > a_max {
            return Err(format!("a0 + a1 = {} exceeds a_max = {a_max}", self.a0 + self.a1));
        }
        if !(self.t_w > 0.0) || self.speed_steps == 0 {
            return Err("t_w must be positive and speed_steps at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("field vanishes at ({0}, {1})")]
pub struct DegenerateField(pub f64, pub f64);

/// Gradient of `|pos - target|^2`.
pub fn attractive_gradient(pos: &Vec2, target: &Vec2) -> Vec2 {
    (pos - target) * 2.0
}

/// `zeta * sum_j exp(-beta (|pos - p_j| - r_j) / r_j)`.
pub fn repulsive_potential(pos: &Vec2, balls: &[Ball], zeta: f64, beta: f64) -> f64 {
    balls
        .iter()
        .map(|b| (-beta * ((pos - b.center).norm() - b.radius) / b.radius).exp())
        .sum::<f64>()
        * zeta
}

/// Gradient of [`repulsive_potential`]; a term is zero at its own center.
pub fn repulsive_gradient(pos: &Vec2, balls: &[Ball], zeta: f64, beta: f64) -> Vec2 {
    let mut g = Vec2::zeros();
    for b in balls {
        let d = pos - b.center;
        let dist = d.norm();
        if dist == 0.0 {
            continue;
        }
        let e = (-beta * (dist - b.radius) / b.radius).exp();
        g -= d * (zeta * beta / b.radius * e / dist);
    }
    g
}

/// Unit vector orthogonal to the repulsive gradient, on the side facing the
/// target; the target direction itself when the gradient vanishes.
pub fn vortex_direction(pos: &Vec2, balls: &[Ball], target: &Vec2, params: &FieldParams) -> Vec2 {
    let grad = repulsive_gradient(pos, balls, params.zeta, params.beta);
    let to_target = target - pos;
    let gn = grad.norm();
    if gn == 0.0 || !gn.is_finite() {
        let n = to_target.norm();
        return if n > 0.0 { to_target / n } else { Vec2::new(1.0, 0.0) };
    }
    let d = Vec2::new(-grad.y, grad.x) / gn;
    if d.dot(&to_target) >= 0.0 {
        d
    } else {
        -d
    }
}

/// `E / |E|` with `E = -(grad P_att + grad P_rep) + zeta_v d`.
pub fn total_field_direction(
    pos: &Vec2,
    balls: &[Ball],
    target: &Vec2,
    zeta_v: f64,
    params: &FieldParams,
) -> Result<Vec2, DegenerateField> {
    let mut e = -(attractive_gradient(pos, target) + repulsive_gradient(pos, balls, params.zeta, params.beta));
    if zeta_v != 0.0 {
        e += vortex_direction(pos, balls, target, params) * zeta_v;
    }
    let n = e.norm();
    if n < 1e-12 || !n.is_finite() {
        return Err(DegenerateField(pos.x, pos.y));
    }
    Ok(e / n)
}

/// `a1 E - a0 v / |v|`; the braking term is dropped at zero velocity.
pub fn safe_acceleration(direction: &Vec2, velocity: &Vec2, a0: f64, a1: f64) -> Vec2 {
    let speed = velocity.norm();
    let brake = if speed > 0.0 { velocity / speed * a0 } else { Vec2::zeros() };
    direction * a1 - brake
}

/// Vortex gain for a knot at `pos`.
pub fn vortex_gain(pos: &Vec2, balls: &[Ball], params: &FieldParams) -> f64 {
    if min_clearance(pos, balls) < params.activation_dist {
        params.zeta_v0
    } else {
        0.0
    }
}

/// Speed scan `v_max (1 - k / steps)`, `k = 0..=steps`. Returns the first
/// speed whose velocity `s * direction` passes `accept`.
pub fn speed_search(v_max: f64, steps: usize, direction: &Vec2, mut accept: impl FnMut(f64, Vec2) -> bool) -> Option<f64> {
    (0..=steps)
        .map(|k| v_max * (steps - k) as f64 / steps as f64)
        .find(|&s| accept(s, direction * s))
}

fn field_direction_or_perturbed(pos: &Vec2, balls: &[Ball], target: &Vec2, zeta_v: f64, params: &FieldParams, step: usize) -> Vec2 {
    match total_field_direction(pos, balls, target, zeta_v, params) {
        Ok(d) => d,
        Err(_) => {
            let mut rng = SeededRng::new(derive_seed(0x5EED_F1E1D, step as u64));
            for _ in 0..16 {
                let a = rng.uniform(0.0, std::f64::consts::TAU);
                let p = pos + Vec2::new(a.cos(), a.sin()) * 1e-6;
                if let Ok(d) = total_field_direction(&p, balls, target, zeta_v, params) {
                    return d;
                }
            }
            let n = (target - pos).norm();
            if n > 0.0 {
                (target - pos) / n
            } else {
                Vec2::new(1.0, 0.0)
            }
        }
    }
}

/// Runs the search from `z0` at wall-clock time `t0`, stepping states with
/// `propagator`. Obstacles are evaluated at each knot's time.
pub fn run_cvapf(scenario: &Scenario, z0: &DVector<f64>, t0: f64, propagator: Propagator, params: &FieldParams) -> SearchResult {
    let model = scenario.model;
    let h = scenario.h;
    let target = scenario.target_position();
    let zero_u = DVector::zeros(model.control_dim());
    let mut traj = Trajectory::new(t0, h, z0.clone());
    let mut zeta_v = vortex_gain(&model.position(z0), &scenario.balls_at(t0), params);
    let mut not_safe = true;
    let mut min_ts = f64::INFINITY;
    let mut n = 0;
    while (n < scenario.n_min || not_safe) && n < scenario.n_max {
        let z = traj.last_state().clone();
        let t_next = t0 + (n + 1) as f64 * h;
        let balls = scenario.balls_at(t_next);
        let mut p_next = model.position(&propagator.step(&z, &zero_u));
        if min_clearance(&p_next, &balls) < 0.0 {
            // coasting would collide; steer with the field at the current knot
            p_next = model.position(&z);
        }
        let dir = field_direction_or_perturbed(&p_next, &balls, &target, zeta_v, params, n);

        let mut chosen = None;
        speed_search(scenario.v_max, params.speed_steps, &dir, |_, v| {
            let u = control_toward_velocity(model, &z, &v, h);
            if scenario.control_norm_sq(&u) > 1.0 + 1e-12 {
                return false;
            }
            let zn = propagator.step(&z, &u);
            if scenario.state_norm_sq(&zn) > 1.0 + 1e-12 {
                return false;
            }
            if coast_safety(&model.position(&zn), &model.velocity(&zn), &balls, params.t_w).not_safe {
                return false;
            }
            chosen = Some((u, zn));
            true
        });
        let (u, zn) = chosen.unwrap_or_else(|| {
            let v = model.velocity(&z);
            let mut vd = v + safe_acceleration(&dir, &v, params.a0, params.a1) * h;
            if vd.norm() > scenario.v_max {
                vd *= scenario.v_max / vd.norm();
            }
            let u = clamp_control(scenario, control_toward_velocity(model, &z, &vd, h));
            let zn = propagator.step(&z, &u);
            (u, zn)
        });
        if min_clearance(&model.position(&zn), &balls) < 0.0 {
            return finish(traj, true, 0.0, true);
        }
        let safety = coast_safety(&model.position(&zn), &model.velocity(&zn), &balls, params.t_w);
        zeta_v = vortex_gain(&model.position(&zn), &balls, params);
        not_safe = safety.not_safe;
        min_ts = min_ts.min(safety.min_ts);
        traj.push(u, zn);
        n += 1;
    }
    finish(traj, not_safe, min_ts, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{linearize, VehicleModel};
    use crate::scenario::{generate_scenario, rest_state, GenParams, Obstacle};
    use crate::search::audit_search;
    use proptest::prelude::*;

    fn params() -> FieldParams {
        FieldParams::for_limits(20.0)
    }

    #[test]
    fn attractive_gradient_cases() {
        let z = Vec2::new(0.0, 0.0);
        assert_eq!(attractive_gradient(&z, &z), Vec2::zeros());
        assert_eq!(attractive_gradient(&Vec2::new(1.0, 0.0), &z), Vec2::new(2.0, 0.0));
    }

    #[test]
    fn repulsion_equals_zeta_on_surface() {
        let b = [Ball::new(Vec2::new(1.0, 2.0), 3.0)];
        let v = repulsive_potential(&Vec2::new(4.0, 2.0), &b, 7.0, 2.5);
        assert!((v - 7.0).abs() < 1e-12);
    }

    #[test]
    fn repulsion_decays_far_away() {
        let b = [Ball::new(Vec2::zeros(), 2.0)];
        let g = repulsive_gradient(&Vec2::new(200.0, 0.0), &b, 1e4, 3.0);
        assert!(g.norm() < 1e-6 * 1e4);
    }

    #[test]
    fn vortex_orthogonal_with_tie_break() {
        // gradient along +x: obstacle to the left of pos
        let b = [Ball::new(Vec2::new(-3.0, 0.0), 1.0)];
        let d = vortex_direction(&Vec2::zeros(), &b, &Vec2::new(0.0, 10.0), &params());
        assert!((d - Vec2::new(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn vortex_without_obstacles_points_at_target() {
        let d = vortex_direction(&Vec2::zeros(), &[], &Vec2::new(3.0, 4.0), &params());
        assert!((d - Vec2::new(0.6, 0.8)).norm() < 1e-15);
    }

    #[test]
    fn free_field_points_at_target() {
        let e = total_field_direction(&Vec2::new(1.0, 1.0), &[], &Vec2::new(4.0, 5.0), 0.0, &params()).unwrap();
        assert!((e - Vec2::new(0.6, 0.8)).norm() < 1e-15);
    }

    #[test]
    fn blocked_field_turns_sideways() {
        let b = [Ball::new(Vec2::new(10.0, 0.0), 3.0)];
        let e = total_field_direction(&Vec2::new(5.0, 0.0), &b, &Vec2::new(30.0, 0.0), 300.0, &params()).unwrap();
        assert!(e.y.abs() > 1e-3);
        assert!((e.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_field_reported() {
        let t = Vec2::new(2.0, 3.0);
        assert!(total_field_direction(&t, &[], &t, 0.0, &params()).is_err());
    }

    #[test]
    fn safe_acceleration_collinear_cases() {
        let v = Vec2::new(3.0, 4.0);
        let vh = v / 5.0;
        assert!((safe_acceleration(&vh, &v, 5.0, 2.0).norm() - 3.0).abs() < 1e-12);
        assert!((safe_acceleration(&-vh, &v, 5.0, 2.0).norm() - 7.0).abs() < 1e-12);
        assert_eq!(safe_acceleration(&vh, &Vec2::zeros(), 5.0, 2.0), vh * 2.0);
    }

    #[test]
    fn speed_scan_grid() {
        let mut seen = Vec::new();
        speed_search(12.0, 20, &Vec2::new(1.0, 0.0), |s, _| {
            seen.push(s);
            false
        });
        assert_eq!(seen.len(), 21);
        assert!((seen[0] - seen[1] - 0.6).abs() < 1e-12);
        assert_eq!(*seen.last().unwrap(), 0.0);
    }

    #[test]
    fn speed_scan_cases() {
        let (vmax, amax, h) = (6.0, 6.0, 0.25);
        let dir = Vec2::new(1.0, 0.0);
        let reach = |v: Vec2| move |_: f64, cand: Vec2| (cand - v).norm() <= amax * h;
        assert_eq!(speed_search(vmax, 20, &dir, reach(dir * vmax)), Some(vmax));
        // moving backwards at 1.1 m/s: only s = 0.3 and 0 are within 1.5 m/s.
        assert_eq!(speed_search(vmax, 20, &dir, reach(Vec2::new(-1.1, 0.0))), Some(0.3));
        assert_eq!(speed_search(vmax, 20, &dir, reach(Vec2::new(-3.0, 0.0))), None);
    }

    fn free_scenario() -> Scenario {
        generate_scenario(&GenParams {
            n_obs: 0,
            ..GenParams::table1(0)
        })
        .unwrap()
    }

    #[test]
    fn free_map_accelerates_straight_at_target() {
        let s = free_scenario();
        let dyn_ = linearize(s.model, &s.z0, s.h).unwrap();
        let r = run_cvapf(&s, &s.z0, 0.0, Propagator::Linear(&dyn_), &params());
        assert!(!r.failed);
        assert_eq!(r.n, s.n_min);
        assert!(audit_search(&s, &r, Propagator::Linear(&dyn_)).is_empty());
        for z in &r.trajectory.states {
            assert!((z[0] - z[1]).abs() < 1e-9, "off the diagonal: {z}");
        }
        let speeds: Vec<f64> = r.trajectory.states.iter().map(|z| s.model.speed(z)).collect();
        assert!(speeds.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    pub(crate) fn enclosed_scenario() -> Scenario {
        let mut s = free_scenario();
        s.obstacles = (0..16)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 16.0;
                Obstacle::fixed(k, Vec2::new(50.0 + 6.0 * a.cos(), 50.0 + 6.0 * a.sin()), 3.0)
            })
            .collect();
        s.z0 = DVector::from_vec(vec![50.0, 50.0, 12.0, 0.0]);
        s
    }

    #[test]
    fn enclosed_moving_start_fails() {
        let s = enclosed_scenario();
        let dyn_ = linearize(s.model, &s.z0, s.h).unwrap();
        let r = run_cvapf(&s, &s.z0, 0.0, Propagator::Linear(&dyn_), &params());
        assert!(r.failed);
        assert!(r.n <= s.n_max);
    }

    #[test]
    fn table1_map_search_passes_audit() {
        let s = generate_scenario(&GenParams::table1(20250712)).unwrap();
        let dyn_ = linearize(s.model, &s.z0, s.h).unwrap();
        let r = run_cvapf(&s, &s.z0, 0.0, Propagator::Linear(&dyn_), &params());
        assert!(!r.failed);
        assert!(audit_search(&s, &r, Propagator::Linear(&dyn_)).is_empty());
    }

    #[test]
    fn unicycle_search_respects_limits() {
        let mut p = GenParams::table1(5);
        p.model = VehicleModel::Unicycle;
        let s = generate_scenario(&p).unwrap();
        let z0 = rest_state(s.model, Vec2::zeros(), 0.3);
        let dyn_ = linearize(s.model, &z0, s.h).unwrap();
        let r = run_cvapf(&s, &z0, 0.0, Propagator::Linear(&dyn_), &FieldParams::for_limits(s.a_max));
        let audit = audit_search(&s, &r, Propagator::Linear(&dyn_));
        assert!(audit.is_empty(), "{audit:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gradients_match_central_differences(
            px in -30.0f64..30.0, py in -30.0f64..30.0,
            cx in -20.0f64..20.0, cy in -20.0f64..20.0, r in 3.0f64..11.0,
            tx in -30.0f64..30.0, ty in -30.0f64..30.0,
        ) {
            let pos = Vec2::new(px, py);
            let ball = Ball::new(Vec2::new(cx, cy), r);
            prop_assume!((pos - ball.center).norm() > 1e-3);
            let target = Vec2::new(tx, ty);
            let (zeta, beta) = (1e3, 3.0);
            let hstep = 1e-5;
            let fd = |f: &dyn Fn(&Vec2) -> f64| {
                Vec2::new(
                    (f(&(pos + Vec2::new(hstep, 0.0))) - f(&(pos - Vec2::new(hstep, 0.0)))) / (2.0 * hstep),
                    (f(&(pos + Vec2::new(0.0, hstep))) - f(&(pos - Vec2::new(0.0, hstep)))) / (2.0 * hstep),
                )
            };
            let att = attractive_gradient(&pos, &target);
            let att_fd = fd(&|p: &Vec2| (p - target).norm_squared());
            prop_assert!((att - att_fd).norm() <= 1e-5 * att.norm().max(1.0));
            let rep = repulsive_gradient(&pos, &[ball], zeta, beta);
            let rep_fd = fd(&|p: &Vec2| repulsive_potential(p, &[ball], zeta, beta));
            prop_assert!((rep - rep_fd).norm() <= 1e-5 * rep.norm().max(1e-3));
        }

        #[test]
        fn vortex_is_unit_and_orthogonal(
            px in -30.0f64..30.0, py in -30.0f64..30.0,
            cx in -20.0f64..20.0, cy in -20.0f64..20.0, r in 3.0f64..11.0,
        ) {
            let ball = Ball::new(Vec2::new(cx, cy), r);
            let pos = Vec2::new(px, py);
            let p = params();
            let d = vortex_direction(&pos, &[ball], &Vec2::new(100.0, 100.0), &p);
            let g = repulsive_gradient(&pos, &[ball], p.zeta, p.beta);
            prop_assert!((d.norm() - 1.0).abs() < 1e-12);
            prop_assert!(d.dot(&g).abs() <= 1e-9 * g.norm().max(1.0));
        }

        #[test]
        fn safe_acceleration_bounded(
            ex in -1.0f64..1.0, ey in -1.0f64..1.0,
            vx in -20.0f64..20.0, vy in -20.0f64..20.0,
            a0 in 0.0f64..10.0, a1 in 0.0f64..10.0,
        ) {
            let e = Vec2::new(ex, ey);
            prop_assume!(e.norm() > 1e-9);
            let e = e / e.norm();
            let a = safe_acceleration(&e, &Vec2::new(vx, vy), a0, a1);
            prop_assert!(a.norm() <= (a0 + a1) * (1.0 + 1e-12));
        }
    }
}
