//! One planning cycle: the relaxed program without obstacles, per-knot
//! collision-free convex regions interpolating between its optimizer and the
//! searched trajectory, and the strict program over the interpolation
//! variables.
//!
//! Knot `i` (0-based, knot 0 is the cycle start) of the strict problem has
//! position
//!
//! ```text
//! p_i = c0_i + lf_i * cf_i + ld_i * cd_i
//! c0_i = (1 - lmin_i) bar_i + lmin_i tilde_i
//! cf_i = (1 - lmin_i) (tilde_i - bar_i)
//! cd_i = tilde_a(i) - tilde_i
//! ```
//!
//! with `0 <= lf_i <= 1`, `0 <= ld_i <= k_i lf_i`, and `a(i)` the anchor
//! knot (the previous searched knot by default). The remaining state
//! components and the controls are free decision variables tied by the
//! discrete dynamics. The reachable positions form the triangle
//! `{c0_i, tilde_i, (1 - k_i) tilde_i + k_i tilde_a(i)}`.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{solve_with, ConvexProgram, SolveError, SolveStatus, SolverOptions};
use crate::dynamics::DiscreteDynamics;
use crate::geometry::{min_clearance, triangle_hits_ball, Ball, Vec2};
use crate::scenario::Scenario;
use crate::search::SearchResult;
use crate::trajectory::Trajectory;

/// Which searched knot anchors the `ld` direction of knot `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRule {
    /// `tilde_{i-1}` (the cycle start for knot 1).
    #[default]
    Previous,
    /// Always the cycle start.
    First,
}

impl AnchorRule {
    pub fn anchor(&self, i: usize) -> usize {
        match self {
            AnchorRule::Previous => i.saturating_sub(1),
            AnchorRule::First => 0,
        }
    }
}

/// Obstacle positions used inside a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleMode {
    /// Each knot sees the obstacles at its own time.
    #[default]
    TimeIndexed,
    /// All knots see the obstacles at the cycle start.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub anchor: AnchorRule,
    pub obstacle_mode: ObstacleMode,
    pub tol: f64,
    pub max_iter: usize,
    /// Grid step for `k`.
    pub k_step: f64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            anchor: AnchorRule::Previous,
            obstacle_mode: ObstacleMode::TimeIndexed,
            tol: 1e-8,
            max_iter: 100,
            k_step: 0.1,
        }
    }
}

impl CycleConfig {
    fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CycleError {
    #[error("trajectory search failed")]
    SearchFailed,
    #[error("relaxed program ended with status {0:?}")]
    RelaxedNotSolved(SolveStatus),
    #[error("strict program ended with status {0:?}")]
    StrictNotSolved(SolveStatus),
    #[error("recovered trajectory violates the dynamics by {0:e}")]
    ResidualTooLarge(f64),
    #[error("searched knot {0} lies inside an obstacle")]
    DegenerateSegment(usize),
    #[error(transparent)]
    Solver(#[from] SolveError),
}

/// Obstacles seen by each knot of a cycle starting at `t0`.
pub fn knot_balls(scenario: &Scenario, t0: f64, n: usize, mode: ObstacleMode) -> Vec<Vec<Ball>> {
    (0..=n)
        .map(|i| match mode {
            ObstacleMode::TimeIndexed => scenario.balls_at(t0 + i as f64 * scenario.h),
            ObstacleMode::Frozen => scenario.balls_at(t0),
        })
        .collect()
}

/// State of one knot as an affine function of the decision vector:
/// `z = d + sum_j x[var_j] * col_j`.
#[derive(Debug, Clone)]
struct AffineState {
    d: DVector<f64>,
    terms: Vec<(usize, DVector<f64>)>,
}

impl AffineState {
    fn constant(z: &DVector<f64>) -> Self {
        Self {
            d: z.clone(),
            terms: Vec::new(),
        }
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = self.d.clone();
        for (j, col) in &self.terms {
            z.axpy(x[*j], col, 1.0);
        }
        z
    }

    fn matrix(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.terms.iter().map(|(_, c)| c.clone()).collect();
        if cols.is_empty() {
            DMatrix::zeros(self.d.len(), 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    }

    fn vars(&self) -> Vec<usize> {
        self.terms.iter().map(|(j, _)| *j).collect()
    }
}

/// Shared program assembly for the relaxed and strict problems.
struct Builder<'a> {
    prog: ConvexProgram,
    knots: Vec<AffineState>,
    control_offset: usize,
    dyn_: &'a DiscreteDynamics,
}

impl<'a> Builder<'a> {
    fn control_var(&self, step: usize, j: usize) -> usize {
        self.control_offset + step * self.dyn_.control_dim() + j
    }

    fn add_dynamics(&mut self) {
        let ns = self.dyn_.state_dim();
        let nc = self.dyn_.control_dim();
        for k in 0..self.knots.len() - 1 {
            let (cur, next) = (&self.knots[k], &self.knots[k + 1]);
            let ad = &self.dyn_.a * &cur.d;
            for r in 0..ns {
                let mut coeffs: Vec<(usize, f64)> = Vec::new();
                for (j, col) in &next.terms {
                    if col[r] != 0.0 {
                        coeffs.push((*j, col[r]));
                    }
                }
                for (j, col) in &cur.terms {
                    let v = self.dyn_.a.row(r).dot(&col.transpose());
                    if v != 0.0 {
                        coeffs.push((*j, -v));
                    }
                }
                for c in 0..nc {
                    let b = self.dyn_.b[(r, c)];
                    if b != 0.0 {
                        coeffs.push((self.control_var(k, c), -b));
                    }
                }
                let rhs = self.dyn_.w[r] - next.d[r] + ad[r];
                self.prog.add_eq_sparse(&coeffs, rhs);
            }
        }
    }

    /// `z_k' Q z_k <= 1` for every non-constant knot.
    fn add_state_constraints(&mut self, q1: &DMatrix<f64>) {
        for k in 1..self.knots.len() {
            let st = self.knots[k].clone();
            add_affine_quad(&mut self.prog, &st, q1, 1.0);
        }
    }

    fn add_control_constraints(&mut self, q2: &DMatrix<f64>) {
        let nc = self.dyn_.control_dim();
        for k in 0..self.knots.len() - 1 {
            let support: Vec<usize> = (0..nc).map(|c| self.control_var(k, c)).collect();
            self.prog.add_quad_ineq(support, q2.clone(), None, 1.0);
        }
    }

    /// Adds `(z_N - zf)' Q0 (z_N - zf)` to the objective.
    fn add_terminal_cost(&mut self, q0: &DMatrix<f64>, zf: &DVector<f64>) {
        let last = self.knots.last().expect("at least one knot").clone();
        let m = last.matrix();
        let off = &last.d - zf;
        let pm = m.transpose() * q0 * &m * 2.0;
        let qv = m.transpose() * q0 * &off * 2.0;
        let vars = last.vars();
        for (a, &i) in vars.iter().enumerate() {
            self.prog.objective.q[i] += qv[a];
            for (b, &j) in vars.iter().enumerate() {
                self.prog.objective.p[(i, j)] += pm[(a, b)];
            }
        }
        self.prog.objective.c += off.dot(&(q0 * &off));
    }
}

/// `z' Q z <= bound` with `z = d + M v`, restricted to the variables it
/// actually involves. Constant constraints are skipped.
fn add_affine_quad(prog: &mut ConvexProgram, st: &AffineState, q: &DMatrix<f64>, bound: f64) {
    let m = st.matrix();
    let qm = m.transpose() * q * &m;
    let lv = m.transpose() * q * &st.d * 2.0;
    let vars = st.vars();
    let keep: Vec<usize> = (0..vars.len())
        .filter(|&a| lv[a] != 0.0 || qm.row(a).iter().any(|v| *v != 0.0))
        .collect();
    if keep.is_empty() {
        return;
    }
    let support: Vec<usize> = keep.iter().map(|&a| vars[a]).collect();
    let qs = DMatrix::from_fn(keep.len(), keep.len(), |r, c| qm[(keep[r], keep[c])]);
    let mut l = DVector::zeros(prog.n);
    for &a in &keep {
        l[vars[a]] = lv[a];
    }
    prog.add_quad_ineq(support, qs, Some(l), bound - st.d.dot(&(q * &st.d)));
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

/// Relaxed program: variables `(z_1..z_N, u_0..u_{N-1})` (knot 0 is `z0`,
/// substituted), terminal cost, dynamics, state and control constraints.
#[derive(Debug, Clone)]
pub struct RelaxedProgram {
    pub program: ConvexProgram,
    pub n: usize,
    pub z0: DVector<f64>,
    ns: usize,
    nc: usize,
}

impl RelaxedProgram {
    /// Knot states and controls from a solution vector.
    pub fn trajectory(&self, x: &DVector<f64>, t0: f64, h: f64) -> Trajectory {
        let mut t = Trajectory::new(t0, h, self.z0.clone());
        for k in 0..self.n {
            let z = DVector::from_fn(self.ns, |r, _| x[k * self.ns + r]);
            let off = self.n * self.ns + k * self.nc;
            let u = DVector::from_fn(self.nc, |c, _| x[off + c]);
            t.push(u, z);
        }
        t
    }

    /// Packs a trajectory into the decision vector.
    pub fn pack(&self, traj: &Trajectory) -> DVector<f64> {
        let mut x = DVector::zeros(self.program.n);
        for k in 0..self.n {
            x.rows_mut(k * self.ns, self.ns).copy_from(&traj.states[k + 1]);
            x.rows_mut(self.n * self.ns + k * self.nc, self.nc).copy_from(&traj.controls[k]);
        }
        x
    }
}

fn relaxed_builder<'a>(z0: &DVector<f64>, n: usize, dyn_: &'a DiscreteDynamics) -> Builder<'a> {
    let ns = dyn_.state_dim();
    let nc = dyn_.control_dim();
    let mut knots = vec![AffineState::constant(z0)];
    for k in 0..n {
        knots.push(AffineState {
            d: DVector::zeros(ns),
            terms: (0..ns).map(|r| (k * ns + r, unit(ns, r))).collect(),
        });
    }
    Builder {
        prog: ConvexProgram::new(n * (ns + nc)),
        knots,
        control_offset: n * ns,
        dyn_,
    }
}

pub fn build_relaxed(z0: &DVector<f64>, n: usize, dyn_: &DiscreteDynamics, scenario: &Scenario) -> RelaxedProgram {
    let mut b = relaxed_builder(z0, n, dyn_);
    b.add_terminal_cost(&scenario.q0, &scenario.zf);
    b.add_dynamics();
    b.add_state_constraints(&scenario.q1);
    b.add_control_constraints(&scenario.q2);
    RelaxedProgram {
        program: b.prog,
        n,
        z0: z0.clone(),
        ns: dyn_.state_dim(),
        nc: dyn_.control_dim(),
    }
}

/// The relaxed program plus the terminal ball `|z_N - zf|_{Q0} <= gamma`.
/// Obstacles are not represented, so this equals the full cycle problem only
/// on obstacle-free maps.
pub fn build_cycle_problem_without_obstacles(z0: &DVector<f64>, n: usize, dyn_: &DiscreteDynamics, scenario: &Scenario) -> RelaxedProgram {
    let mut r = build_relaxed(z0, n, dyn_, scenario);
    let b = relaxed_builder(z0, n, dyn_);
    let last = b.knots.last().expect("n >= 1").clone();
    let shifted = AffineState {
        d: &last.d - &scenario.zf,
        terms: last.terms,
    };
    add_affine_quad(&mut r.program, &shifted, &scenario.q0, scenario.gamma * scenario.gamma);
    r
}

/// Largest root in `[0, 1]` of `|(1 - l) bar + l tilde - p|^2 = r^2` over all
/// balls, or zero when the segment never touches a ball boundary.
pub fn lambda_min_single(bar: &Vec2, tilde: &Vec2, balls: &[Ball]) -> f64 {
    let dir = tilde - bar;
    let a = dir.norm_squared();
    let mut best: f64 = 0.0;
    for ball in balls {
        let off = bar - ball.center;
        let c = off.norm_squared() - ball.radius * ball.radius;
        if a == 0.0 {
            continue;
        }
        let half_b = off.dot(&dir);
        let disc = half_b * half_b - a * c;
        if disc < 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        // stable pair of roots
        let qn = -(half_b + half_b.signum() * sq);
        let mut roots = [f64::NAN, f64::NAN];
        if qn != 0.0 {
            roots = [qn / a, c / qn];
        } else if c == 0.0 {
            roots = [0.0, 0.0];
        }
        for r in roots {
            if (0.0..=1.0).contains(&r) {
                best = best.max(r);
            }
        }
    }
    best
}

/// Per-knot `lambda_min` between the relaxed (`bar`) and searched (`tilde`)
/// knot positions.
pub fn compute_lambda_min(bar: &[Vec2], tilde: &[Vec2], balls: &[Vec<Ball>]) -> Result<Vec<f64>, CycleError> {
    bar.iter()
        .zip(tilde)
        .zip(balls)
        .enumerate()
        .map(|(i, ((b, t), bl))| {
            if min_clearance(t, bl) < -1e-9 {
                return Err(CycleError::DegenerateSegment(i));
            }
            Ok(lambda_min_single(b, t, bl))
        })
        .collect()
}

/// Per-knot interpolation data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRegion {
    pub bar: Vec<DVector<f64>>,
    pub tilde: Vec<DVector<f64>>,
    pub lambda_min: Vec<f64>,
    pub k: Vec<f64>,
    pub anchor: AnchorRule,
}

impl ConvexRegion {
    fn pos(z: &DVector<f64>) -> Vec2 {
        Vec2::new(z[0], z[1])
    }

    pub fn len(&self) -> usize {
        self.bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bar.is_empty()
    }

    /// Position at `lf = ld = 0`.
    pub fn base(&self, i: usize) -> Vec2 {
        let l = self.lambda_min[i];
        Self::pos(&self.bar[i]) * (1.0 - l) + Self::pos(&self.tilde[i]) * l
    }

    pub fn forward_dir(&self, i: usize) -> Vec2 {
        (Self::pos(&self.tilde[i]) - Self::pos(&self.bar[i])) * (1.0 - self.lambda_min[i])
    }

    pub fn side_dir(&self, i: usize) -> Vec2 {
        Self::pos(&self.tilde[self.anchor.anchor(i)]) - Self::pos(&self.tilde[i])
    }

    pub fn position(&self, i: usize, lf: f64, ld: f64) -> Vec2 {
        self.base(i) + self.forward_dir(i) * lf + self.side_dir(i) * ld
    }

    /// Corners of the reachable triangle of knot `i` for a given `k`.
    pub fn triangle(&self, i: usize, k: f64) -> [Vec2; 3] {
        let t = Self::pos(&self.tilde[i]);
        let a = Self::pos(&self.tilde[self.anchor.anchor(i)]);
        [self.base(i), t, t * (1.0 - k) + a * k]
    }
}

/// Largest `k` on the grid `{0, step, .., 1}` whose triangle misses every
/// ball; knot 0 is pinned to `k = 0`.
pub fn select_k(region: &ConvexRegion, balls: &[Vec<Ball>], step: f64) -> Vec<f64> {
    let levels = (1.0 / step).round() as usize;
    (0..region.len())
        .map(|i| {
            if i == 0 {
                return 0.0;
            }
            for j in (1..=levels).rev() {
                let k = j as f64 / levels as f64;
                let [a, b, c] = region.triangle(i, k);
                if !balls[i].iter().any(|ball| triangle_hits_ball(&a, &b, &c, ball, 1e-9)) {
                    return k;
                }
            }
            0.0
        })
        .collect()
}

/// Builds the region from the relaxed and searched trajectories.
pub fn build_region(bar: &Trajectory, tilde: &Trajectory, balls: &[Vec<Ball>], cfg: &CycleConfig) -> Result<ConvexRegion, CycleError> {
    let bp: Vec<Vec2> = bar.positions().collect();
    let tp: Vec<Vec2> = tilde.positions().collect();
    let lambda_min = compute_lambda_min(&bp, &tp, balls)?;
    let mut region = ConvexRegion {
        bar: bar.states.clone(),
        tilde: tilde.states.clone(),
        lambda_min,
        k: Vec::new(),
        anchor: cfg.anchor,
    };
    region.k = select_k(&region, balls, cfg.k_step);
    Ok(region)
}

/// Strict program. Per knot `i >= 1` the variables are `(lf, ld, free state
/// components)`; then the controls.
#[derive(Debug, Clone)]
pub struct StrictProgram {
    pub program: ConvexProgram,
    pub rho: f64,
    knots: Vec<AffineState>,
    control_offset: usize,
    nc: usize,
    block: usize,
}

impl StrictProgram {
    fn lf_var(&self, i: usize) -> usize {
        (i - 1) * self.block
    }

    pub fn n_steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// `(lf, ld)` per knot, knot 0 reported as `(1, 0)`.
    pub fn lambdas(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut lf = vec![1.0];
        let mut ld = vec![0.0];
        for i in 1..self.knots.len() {
            lf.push(x[self.lf_var(i)]);
            ld.push(x[self.lf_var(i) + 1]);
        }
        (lf, ld)
    }

    pub fn states(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.knots.iter().map(|k| k.eval(x)).collect()
    }

    pub fn controls(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.n_steps())
            .map(|k| DVector::from_fn(self.nc, |c, _| x[self.control_offset + k * self.nc + c]))
            .collect()
    }

    /// Decision vector with `lf = 1`, `ld = 0` and the free state components
    /// and controls copied from `tilde`.
    pub fn pack_search(&self, tilde: &Trajectory) -> DVector<f64> {
        let mut x = DVector::zeros(self.program.n);
        for i in 1..self.knots.len() {
            let v = self.lf_var(i);
            x[v] = 1.0;
            for (f, r) in (2..tilde.states[i].len()).enumerate() {
                x[v + 2 + f] = tilde.states[i][r];
            }
        }
        for (k, u) in tilde.controls.iter().enumerate() {
            x.rows_mut(self.control_offset + k * self.nc, self.nc).copy_from(u);
        }
        x
    }
}

pub fn build_strict(region: &ConvexRegion, z0: &DVector<f64>, dyn_: &DiscreteDynamics, scenario: &Scenario, rho: f64) -> StrictProgram {
    let ns = dyn_.state_dim();
    let nc = dyn_.control_dim();
    let n = region.len() - 1;
    let nf = ns - 2;
    let block = 2 + nf;
    let mut knots = vec![AffineState::constant(z0)];
    for i in 1..=n {
        let v = (i - 1) * block;
        let mut d = DVector::zeros(ns);
        let base = region.base(i);
        d[0] = base.x;
        d[1] = base.y;
        let mut cf = DVector::zeros(ns);
        let f = region.forward_dir(i);
        cf[0] = f.x;
        cf[1] = f.y;
        let mut cd = DVector::zeros(ns);
        let s = region.side_dir(i);
        cd[0] = s.x;
        cd[1] = s.y;
        let mut terms = vec![(v, cf), (v + 1, cd)];
        for r in 2..ns {
            terms.push((v + r, unit(ns, r)));
        }
        knots.push(AffineState { d, terms });
    }
    let mut b = Builder {
        prog: ConvexProgram::new(n * (block + nc)),
        knots,
        control_offset: n * block,
        dyn_,
    };
    b.add_terminal_cost(&scenario.q0, &scenario.zf);
    let weight = rho * (z0 - &scenario.zf).norm();
    for i in 1..=n {
        let v = (i - 1) * block;
        b.prog.objective.p[(v, v)] += 2.0 * weight;
        b.prog.objective.q[v] -= 2.0 * weight;
        b.prog.objective.c += weight;
    }
    b.add_dynamics();
    b.add_state_constraints(&scenario.q1);
    b.add_control_constraints(&scenario.q2);
    for i in 1..=n {
        let v = (i - 1) * block;
        b.prog.add_lin_ineq_sparse(&[(v, 1.0)], 1.0);
        b.prog.add_lin_ineq_sparse(&[(v, -1.0)], 0.0);
        b.prog.add_lin_ineq_sparse(&[(v + 1, -1.0)], 0.0);
        b.prog.add_lin_ineq_sparse(&[(v + 1, 1.0), (v, -region.k[i])], 0.0);
    }
    StrictProgram {
        program: b.prog,
        rho,
        knots: b.knots,
        control_offset: n * block,
        nc,
        block,
    }
}

/// Knot states from the interpolation formula and the solved free
/// components, with the solved controls. Fails when the recovered knots
/// violate the dynamics by more than `1e-6`.
pub fn recover(strict: &StrictProgram, x: &DVector<f64>, dyn_: &DiscreteDynamics, t0: f64) -> Result<Trajectory, CycleError> {
    let states = strict.states(x);
    let controls = strict.controls(x);
    let mut worst: f64 = 0.0;
    for (k, u) in controls.iter().enumerate() {
        worst = worst.max(dyn_.residual(&states[k], u, &states[k + 1]).amax());
    }
    if worst > 1e-6 {
        return Err(CycleError::ResidualTooLarge(worst));
    }
    let mut t = Trajectory::new(t0, dyn_.h, states[0].clone());
    for (u, z) in controls.into_iter().zip(states.into_iter().skip(1)) {
        t.push(u, z);
    }
    Ok(t)
}

/// Either every knot has `lambda_min = 0` or coincident anchors, or every
/// solved `(lf, ld)` lies in the relative interior of its constraint set with
/// margin `1e-6` (for `k = 0` the set is the segment `0 < lf < 1, ld = 0`).
pub fn check_theorem4(region: &ConvexRegion, lf: &[f64], ld: &[f64]) -> bool {
    let m = 1e-6;
    let coincident = (1..region.len()).all(|i| region.lambda_min[i] == 0.0 || (&region.tilde[i] - &region.bar[i]).norm() <= 1e-9);
    if coincident {
        return true;
    }
    (1..region.len()).all(|i| {
        let f_ok = lf[i] > m && lf[i] < 1.0 - m;
        if region.k[i] == 0.0 {
            f_ok
        } else {
            f_ok && ld[i] > m && ld[i] < region.k[i] * lf[i] - m
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleDiagnostics {
    pub relaxed_status: SolveStatus,
    pub strict_status: SolveStatus,
    pub relaxed_seconds: f64,
    pub strict_seconds: f64,
    pub relaxed_iterations: usize,
    pub strict_iterations: usize,
    pub regularizations: usize,
    /// Strict solves performed (more than one after an infeasible retry).
    pub strict_attempts: usize,
    pub min_clearance: f64,
    /// Largest violation of the strict program at `lf = 1, ld = 0` with the
    /// searched free components and controls.
    pub search_point_violation: f64,
}

#[derive(Debug, Clone)]
pub struct CycleResult {
    pub t0: f64,
    pub trajectory: Trajectory,
    pub search: SearchResult,
    pub region: ConvexRegion,
    pub lambda_f: Vec<f64>,
    pub lambda_d: Vec<f64>,
    pub rho_used: f64,
    pub n: usize,
    pub relaxed_objective: f64,
    pub strict_objective: f64,
    pub theorem4_ok: bool,
    pub diagnostics: CycleDiagnostics,
}

/// Everything of a cycle that does not depend on `rho`.
#[derive(Debug, Clone)]
pub struct PreparedCycle {
    pub t0: f64,
    pub z0: DVector<f64>,
    pub dynamics: DiscreteDynamics,
    pub search: SearchResult,
    pub relaxed: RelaxedProgram,
    pub bar: Trajectory,
    pub relaxed_objective: f64,
    pub region: ConvexRegion,
    pub balls: Vec<Vec<Ball>>,
    relaxed_status: SolveStatus,
    relaxed_seconds: f64,
    relaxed_iterations: usize,
    regularizations: usize,
}

/// Solves the relaxed program and extracts the convex regions.
pub fn prepare_cycle(
    scenario: &Scenario,
    z0: &DVector<f64>,
    t0: f64,
    dynamics: &DiscreteDynamics,
    search: SearchResult,
    cfg: &CycleConfig,
) -> Result<PreparedCycle, CycleError> {
    if search.failed {
        return Err(CycleError::SearchFailed);
    }
    let n = search.n;
    let relaxed = build_relaxed(z0, n, dynamics, scenario);
    let start = Instant::now();
    let sol = solve_with(&relaxed.program, &cfg.solver())?;
    let relaxed_seconds = start.elapsed().as_secs_f64();
    if sol.status != SolveStatus::Optimal {
        return Err(CycleError::RelaxedNotSolved(sol.status));
    }
    let bar = relaxed.trajectory(&sol.x, t0, scenario.h);
    let balls = knot_balls(scenario, t0, n, cfg.obstacle_mode);
    let region = build_region(&bar, &search.trajectory, &balls, cfg)?;
    Ok(PreparedCycle {
        t0,
        z0: z0.clone(),
        dynamics: dynamics.clone(),
        search,
        relaxed,
        bar,
        relaxed_objective: sol.objective_value,
        region,
        balls,
        relaxed_status: sol.status,
        relaxed_seconds,
        relaxed_iterations: sol.iterations,
        regularizations: sol.regularizations,
    })
}

/// Outcome of one strict solve; `Infeasible` is reported separately so the
/// caller can retry with a different `rho`.
#[derive(Debug)]
pub enum StrictOutcome {
    Solved(Box<CycleResult>),
    Infeasible { rho: f64 },
}

pub fn solve_strict(prep: &PreparedCycle, scenario: &Scenario, rho: f64, cfg: &CycleConfig) -> Result<StrictOutcome, CycleError> {
    let strict = build_strict(&prep.region, &prep.z0, &prep.dynamics, scenario, rho);
    let search_point = strict.pack_search(&prep.search.trajectory);
    let search_point_violation = strict
        .program
        .eq_residual(&search_point)
        .max(strict.program.ineq_violation(&search_point));
    let start = Instant::now();
    let sol = solve_with(&strict.program, &cfg.solver())?;
    let strict_seconds = start.elapsed().as_secs_f64();
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Ok(StrictOutcome::Infeasible { rho }),
        s => return Err(CycleError::StrictNotSolved(s)),
    }
    let trajectory = recover(&strict, &sol.x, &prep.dynamics, prep.t0)?;
    let (lambda_f, lambda_d) = strict.lambdas(&sol.x);
    let min_clear = trajectory
        .positions()
        .zip(&prep.balls)
        .map(|(p, b)| min_clearance(&p, b))
        .fold(f64::INFINITY, f64::min);
    let theorem4_ok = check_theorem4(&prep.region, &lambda_f, &lambda_d);
    Ok(StrictOutcome::Solved(Box::new(CycleResult {
        t0: prep.t0,
        n: prep.search.n,
        trajectory,
        search: prep.search.clone(),
        region: prep.region.clone(),
        lambda_f,
        lambda_d,
        rho_used: rho,
        relaxed_objective: prep.relaxed_objective,
        strict_objective: sol.objective_value,
        theorem4_ok,
        diagnostics: CycleDiagnostics {
            relaxed_status: prep.relaxed_status,
            strict_status: sol.status,
            relaxed_seconds: prep.relaxed_seconds,
            strict_seconds,
            relaxed_iterations: prep.relaxed_iterations,
            strict_iterations: sol.iterations,
            regularizations: prep.regularizations + sol.regularizations,
            strict_attempts: 1,
            min_clearance: min_clear,
            search_point_violation,
        },
    })))
}

/// Text dump of a cycle for offline inspection:
///
/// ```text
/// cycle t0=<t0> n=<N> rho=<rho>
/// knot <i> bar <x> <y> tilde <x> <y> lambda_min <l> k <k>
/// relaxed
/// <relaxed program dump>
/// strict
/// <strict program dump>
/// ```
pub fn dump_cycle(prep: &PreparedCycle, scenario: &Scenario, rho: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "cycle t0={:?} n={} rho={:?}", prep.t0, prep.search.n, rho);
    let r = &prep.region;
    for i in 0..r.len() {
        let _ = writeln!(
            s,
            "knot {i} bar {:?} {:?} tilde {:?} {:?} lambda_min {:?} k {:?}",
            r.bar[i][0], r.bar[i][1], r.tilde[i][0], r.tilde[i][1], r.lambda_min[i], r.k[i]
        );
    }
    s.push_str("relaxed\n");
    s.push_str(&prep.relaxed.program.to_text());
    s.push_str("strict\n");
    s.push_str(&build_strict(r, &prep.z0, &prep.dynamics, scenario, rho).program.to_text());
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::solve;
    use crate::dynamics::{linearize, Propagator};
    use crate::scenario::{generate_scenario, GenParams, Obstacle};
    use crate::search::{run_cvapf, FieldParams};
    use proptest::prelude::*;

    fn free_scenario() -> Scenario {
        generate_scenario(&GenParams {
            n_obs: 0,
            ..GenParams::table1(0)
        })
        .unwrap()
    }

    fn prepared(s: &Scenario) -> PreparedCycle {
        let d = linearize(s.model, &s.z0, s.h).unwrap();
        let search = run_cvapf(s, &s.z0, 0.0, Propagator::Linear(&d), &FieldParams::for_limits(s.a_max));
        prepare_cycle(s, &s.z0.clone(), 0.0, &d, search, &CycleConfig::default()).unwrap()
    }

    #[test]
    fn relaxed_variable_count() {
        let s = free_scenario();
        let d = linearize(s.model, &s.z0, s.h).unwrap();
        let r = build_relaxed(&s.z0, 1, &d, &s);
        assert_eq!(r.program.n, 6);
    }

    #[test]
    fn at_target_relaxed_cost_is_zero() {
        let mut s = free_scenario();
        s.z0 = s.zf.clone();
        let d = linearize(s.model, &s.z0, s.h).unwrap();
        let r = build_relaxed(&s.z0, 5, &d, &s);
        let sol = solve(&r.program, 1e-8, 100).unwrap();
        assert!(sol.objective_value.abs() < 1e-7);
        let t = r.trajectory(&sol.x, 0.0, s.h);
        assert!((t.last_state() - &s.zf).amax() < 1e-4);
    }

    #[test]
    fn relaxed_matches_cycle_problem_without_obstacles() {
        let mut s = free_scenario();
        s.z0 = DVector::from_vec(vec![150.0, 150.0, 5.0, 5.0]);
        let d = linearize(s.model, &s.z0, s.h).unwrap();
        let relaxed = build_relaxed(&s.z0, 10, &d, &s);
        let full = build_cycle_problem_without_obstacles(&s.z0, 10, &d, &s);
        let a = solve(&relaxed.program, 1e-8, 100).unwrap();
        let b = solve(&full.program, 1e-8, 100).unwrap();
        assert_eq!(b.status, SolveStatus::Optimal);
        assert!((a.objective_value - b.objective_value).abs() < 1e-6);
        // controls are not unique, the terminal state is
        assert!(full.program.is_feasible(&a.x, 1e-7));
        let ta = relaxed.trajectory(&a.x, 0.0, s.h);
        let tb = full.trajectory(&b.x, 0.0, s.h);
        assert!((ta.last_state() - tb.last_state()).amax() < 1e-4);
    }

    #[test]
    fn lambda_min_examples() {
        let ball = [Ball::new(Vec2::zeros(), 1.0)];
        assert_eq!(lambda_min_single(&Vec2::new(5.0, 0.0), &Vec2::new(5.0, 3.0), &ball), 0.0);
        let l = lambda_min_single(&Vec2::new(0.0, 0.5), &Vec2::new(0.0, 2.0), &ball);
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn free_map_region_is_trivial() {
        let s = free_scenario();
        let p = prepared(&s);
        assert!(p.region.lambda_min.iter().all(|l| *l == 0.0));
        assert_eq!(p.region.k[0], 0.0);
        assert!(p.region.k[1..].iter().all(|k| *k == 1.0));
    }

    #[test]
    fn strict_with_zero_rho_matches_relaxed_on_free_map() {
        let s = free_scenario();
        let p = prepared(&s);
        let StrictOutcome::Solved(c) = solve_strict(&p, &s, 0.0, &CycleConfig::default()).unwrap() else {
            panic!("strict infeasible")
        };
        assert!((c.strict_objective - c.relaxed_objective).abs() <= 1e-6 * (1.0 + c.relaxed_objective));
        assert!(c.theorem4_ok);
        assert!(c.diagnostics.search_point_violation < 1e-9);
    }

    #[test]
    fn search_point_reproduces_searched_positions() {
        let s = generate_scenario(&GenParams::table1(20250712)).unwrap();
        let p = prepared(&s);
        let strict = build_strict(&p.region, &p.z0, &p.dynamics, &s, 0.0);
        let x = strict.pack_search(&p.search.trajectory);
        assert!(strict.program.is_feasible(&x, 1e-9));
        for (z, t) in strict.states(&x).iter().zip(&p.search.trajectory.states) {
            assert!((z - t).amax() < 1e-9);
        }
    }

    #[test]
    fn recovery_corner_cases() {
        let s = generate_scenario(&GenParams::table1(20250712)).unwrap();
        let p = prepared(&s);
        let r = &p.region;
        for i in 0..r.len() {
            let t = Vec2::new(r.tilde[i][0], r.tilde[i][1]);
            assert!((r.position(i, 1.0, 0.0) - t).norm() < 1e-9);
            let b = Vec2::new(r.bar[i][0], r.bar[i][1]);
            let expect = b * (1.0 - r.lambda_min[i]) + t * r.lambda_min[i];
            assert!((r.position(i, 0.0, 0.0) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn large_rho_pulls_lambda_f_to_one() {
        let mut s = free_scenario();
        s.obstacles = vec![Obstacle::fixed(0, Vec2::new(12.0, 8.0), 4.0)];
        let p = prepared(&s);
        let StrictOutcome::Solved(c) = solve_strict(&p, &s, 1e6, &CycleConfig::default()).unwrap() else {
            panic!("strict infeasible")
        };
        assert!(c.lambda_f.iter().all(|l| (l - 1.0).abs() < 1e-3), "{:?}", c.lambda_f);
    }

    #[test]
    fn optimal_strict_knots_are_collision_free() {
        for seed in [20250712, 1, 2, 3] {
            let s = generate_scenario(&GenParams::table1(seed)).unwrap();
            let p = prepared(&s);
            let StrictOutcome::Solved(c) = solve_strict(&p, &s, 0.0, &CycleConfig::default()).unwrap() else {
                panic!("strict infeasible")
            };
            assert!(c.diagnostics.min_clearance >= -1e-6);
            assert!(c.strict_objective >= c.relaxed_objective - 1e-8 * (1.0 + c.relaxed_objective));
            for i in 0..c.lambda_f.len() {
                assert!(c.lambda_f[i] >= -1e-8 && c.lambda_f[i] <= 1.0 + 1e-8);
                assert!(c.lambda_d[i] >= -1e-8 && c.lambda_d[i] <= c.region.k[i] * c.lambda_f[i] + 1e-8);
            }
        }
    }

    #[test]
    fn theorem4_boundary_fails_condition_two() {
        let region = ConvexRegion {
            bar: vec![DVector::zeros(4), DVector::from_vec(vec![0.0, 0.5, 0.0, 0.0])],
            tilde: vec![DVector::zeros(4), DVector::from_vec(vec![0.0, 2.0, 0.0, 0.0])],
            lambda_min: vec![0.0, 1.0 / 3.0],
            k: vec![0.0, 0.5],
            anchor: AnchorRule::Previous,
        };
        assert!(!check_theorem4(&region, &[1.0, 1.0], &[0.0, 0.2]));
        assert!(check_theorem4(&region, &[1.0, 0.5], &[0.0, 0.1]));
    }

    #[test]
    fn k_limited_by_obstacle_matches_dense_sampling() {
        // triangle toward the previous knot clips a ball sitting beside it
        let region = ConvexRegion {
            bar: vec![DVector::zeros(4), DVector::from_vec(vec![10.0, 0.0, 0.0, 0.0])],
            tilde: vec![DVector::from_vec(vec![0.0, 10.0, 0.0, 0.0]), DVector::from_vec(vec![10.0, 10.0, 0.0, 0.0])],
            lambda_min: vec![0.0, 0.0],
            k: vec![],
            anchor: AnchorRule::Previous,
        };
        let balls = vec![vec![], vec![Ball::new(Vec2::new(4.0, 8.0), 1.5)]];
        let k = select_k(&region, &balls, 0.1);
        assert!(k[1] < 1.0 && k[1] > 0.0);
        let hits = |kk: f64| {
            (0..=100).any(|a| {
                (0..=100).any(|b| {
                    let lf = a as f64 / 100.0;
                    let ld = kk * lf * b as f64 / 100.0;
                    balls[1][0].contains_strict(&region.position(1, lf, ld))
                })
            })
        };
        assert!(!hits(k[1]));
        assert!(hits(k[1] + 0.1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn lambda_min_matches_scan(
            bx in -3.0f64..3.0, by in -3.0f64..3.0,
            tx in -3.0f64..3.0, ty in -3.0f64..3.0,
            cx in -2.0f64..2.0, cy in -2.0f64..2.0, r in 0.2f64..2.0,
        ) {
            let ball = Ball::new(Vec2::new(cx, cy), r);
            let tilde = Vec2::new(tx, ty);
            prop_assume!(ball.clearance(&tilde) > 0.0);
            let bar = Vec2::new(bx, by);
            let l = lambda_min_single(&bar, &tilde, &[ball]);
            let steps = 100_000;
            let mut scan = 0.0;
            for j in (0..=steps).rev() {
                let lam = j as f64 / steps as f64;
                if ball.contains_strict(&(bar * (1.0 - lam) + tilde * lam)) {
                    scan = lam;
                    break;
                }
            }
            prop_assert!((l - scan).abs() <= 1e-4, "analytic {l} scan {scan}");
        }
    }
}
