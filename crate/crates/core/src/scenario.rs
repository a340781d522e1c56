//! Obstacle maps: ball obstacles (static or seeded random walks), boundary
//! conditions, physical limits, seeded generation and validation.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleModel;
use crate::geometry::{Ball, Vec2};
use crate::rng::{derive_seed, SeededRng};

/// How an obstacle center moves over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleMotion {
    Static,
    /// Double-integrator walk: each step draws an acceleration uniformly from
    /// the disk of radius `accel_cap`, rejection-sampled so the next speed
    /// stays at or below `max_speed`.
    SeededRandomWalk { max_speed: f64, accel_cap: f64, seed: u64 },
}

/// Lazily extended sample path of a random walk at a fixed step.
#[derive(Debug)]
struct Walk {
    step: f64,
    positions: Vec<Vec2>,
    velocity: Vec2,
    rng: SeededRng,
}

/// A ball obstacle. `radius` is already inflated by the vehicle radius.
#[derive(Clone)]
pub struct Obstacle {
    pub id: usize,
    pub center0: Vec2,
    pub radius: f64,
    pub motion: ObstacleMotion,
    walk: Arc<RwLock<Option<Walk>>>,
}

impl fmt::Debug for Obstacle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Obstacle")
            .field("id", &self.id)
            .field("center0", &self.center0)
            .field("radius", &self.radius)
            .field("motion", &self.motion)
            .finish()
    }
}

impl PartialEq for Obstacle {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.center0 == other.center0
            && self.radius == other.radius
            && self.motion == other.motion
    }
}

impl Obstacle {
    pub fn new(id: usize, center0: Vec2, radius: f64, motion: ObstacleMotion) -> Self {
        Self {
            id,
            center0,
            radius,
            motion,
            walk: Arc::new(RwLock::new(None)),
        }
    }

    pub fn fixed(id: usize, center0: Vec2, radius: f64) -> Self {
        Self::new(id, center0, radius, ObstacleMotion::Static)
    }

    pub fn is_static(&self) -> bool {
        matches!(self.motion, ObstacleMotion::Static)
    }

    /// Upper bound on the center speed.
    pub fn max_speed(&self) -> f64 {
        match self.motion {
            ObstacleMotion::Static => 0.0,
            ObstacleMotion::SeededRandomWalk { max_speed, .. } => max_speed,
        }
    }

    /// Center at time `t`, integrating the walk with step `step` and
    /// interpolating linearly between steps. Negative times clamp to 0.
    pub fn center_at(&self, t: f64, step: f64) -> Vec2 {
        let (max_speed, accel_cap, seed) = match self.motion {
            ObstacleMotion::Static => return self.center0,
            ObstacleMotion::SeededRandomWalk {
                max_speed,
                accel_cap,
                seed,
            } => (max_speed, accel_cap, seed),
        };
        let t = t.max(0.0);
        if t == 0.0 || !(step > 0.0) {
            return self.center0;
        }
        let s = t / step;
        let k = s.floor() as usize;
        let frac = s - k as f64;
        {
            let guard = self.walk.read().unwrap_or_else(|e| e.into_inner());
            if let Some(w) = guard.as_ref() {
                if w.step == step && w.positions.len() > k + 1 {
                    return lerp(&w.positions[k], &w.positions[k + 1], frac);
                }
            }
        }
        let mut guard = self.walk.write().unwrap_or_else(|e| e.into_inner());
        if guard.as_ref().is_none_or(|w| w.step != step) {
            *guard = Some(Walk {
                step,
                positions: vec![self.center0],
                velocity: Vec2::zeros(),
                rng: SeededRng::new(seed),
            });
        }
        let w = guard.as_mut().expect("walk initialized above");
        while w.positions.len() <= k + 1 {
            let a = draw_acceleration(&mut w.rng, &w.velocity, accel_cap, max_speed, step);
            let p = *w.positions.last().expect("walk starts with center0");
            w.positions.push(p + w.velocity * step);
            w.velocity += a * step;
        }
        lerp(&w.positions[k], &w.positions[k + 1], frac)
    }

    pub fn ball_at(&self, t: f64, step: f64) -> Ball {
        Ball::new(self.center_at(t, step), self.radius)
    }
}

fn lerp(a: &Vec2, b: &Vec2, s: f64) -> Vec2 {
    if s == 0.0 {
        *a
    } else {
        a + (b - a) * s
    }
}

/// Uniform draw from `{a : |a| <= cap, |v + a h| <= vmax}` by rejection from
/// the bounding square; zero acceleration when 64 draws all miss.
fn draw_acceleration(rng: &mut SeededRng, v: &Vec2, cap: f64, vmax: f64, h: f64) -> Vec2 {
    for _ in 0..64 {
        let a = Vec2::new(rng.uniform(-cap, cap), rng.uniform(-cap, cap));
        if a.norm() <= cap && (v + a * h).norm() <= vmax {
            return a;
        }
    }
    Vec2::zeros()
}

/// Center of `o` at time `t` for a scenario stepping obstacles at `h`.
pub fn obstacle_center_at(o: &Obstacle, t: f64, h: f64) -> Vec2 {
    o.center_at(t, h)
}

/// A complete planning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: VehicleModel,
    pub obstacles: Vec<Obstacle>,
    pub z0: DVector<f64>,
    pub zf: DVector<f64>,
    pub gamma: f64,
    /// Terminal weight.
    pub q0: DMatrix<f64>,
    /// State constraint `z' Q1 z <= 1`.
    pub q1: DMatrix<f64>,
    /// Control constraint `u' Q2 u <= 1`.
    pub q2: DMatrix<f64>,
    pub v_max: f64,
    pub a_max: f64,
    /// Turn-rate limit; only used by the unicycle.
    pub omega_max: f64,
    pub clearance_ell: f64,
    pub h: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Placement box `[xmin, ymin, xmax, ymax]`.
    pub bounds: [f64; 4],
}

/// Default weight matrices for a model and its limits.
pub fn default_weights(model: VehicleModel, v_max: f64, a_max: f64, omega_max: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let iv = 1.0 / (v_max * v_max);
    let ia = 1.0 / (a_max * a_max);
    match model {
        VehicleModel::DoubleIntegrator => (
            DMatrix::identity(4, 4),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, iv, iv])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![ia, ia])),
        ),
        VehicleModel::Unicycle => (
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1e-4, 1.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 0.0, iv])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![ia, 1.0 / (omega_max * omega_max)])),
        ),
    }
}

/// State at rest at `pos`; the unicycle heading is `heading`.
pub fn rest_state(model: VehicleModel, pos: Vec2, heading: f64) -> DVector<f64> {
    match model {
        VehicleModel::DoubleIntegrator => DVector::from_vec(vec![pos.x, pos.y, 0.0, 0.0]),
        VehicleModel::Unicycle => DVector::from_vec(vec![pos.x, pos.y, heading, 0.0]),
    }
}

/// `sqrt(x' Q x)`, clamped at zero against round-off.
pub fn weighted_norm(q: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(q * x)).max(0.0).sqrt()
}

impl Scenario {
    /// Obstacle-free scenario with default weights, `gamma = 3`, `ell = 7`,
    /// `h = 0.25`, `N in [8, 24]` and a `[0, 160]^2` placement box.
    pub fn new(model: VehicleModel, z0: DVector<f64>, zf: DVector<f64>, v_max: f64, a_max: f64) -> Self {
        let omega_max = 1.5;
        let (q0, q1, q2) = default_weights(model, v_max, a_max, omega_max);
        Self {
            model,
            obstacles: Vec::new(),
            z0,
            zf,
            gamma: 3.0,
            q0,
            q1,
            q2,
            v_max,
            a_max,
            omega_max,
            clearance_ell: 7.0,
            h: 0.25,
            n_min: 8,
            n_max: 24,
            bounds: [0.0, 0.0, 160.0, 160.0],
        }
    }

    pub fn with_obstacles(mut self, obstacles: Vec<Obstacle>) -> Self {
        self.obstacles = obstacles;
        self
    }

    /// Copy with every radius grown by up to `margin`, capped per obstacle at
    /// half the clearance of `pos` at time `t` so `pos` stays outside.
    pub fn inflated_near(&self, margin: f64, pos: &Vec2, t: f64) -> Scenario {
        let mut out = self.clone();
        if margin <= 0.0 {
            return out;
        }
        for o in &mut out.obstacles {
            let gap = o.ball_at(t, self.h).clearance(pos);
            o.radius += margin.min(0.5 * gap).max(0.0);
        }
        out
    }

    pub fn has_moving_obstacles(&self) -> bool {
        self.obstacles.iter().any(|o| !o.is_static())
    }

    pub fn balls_at(&self, t: f64) -> Vec<Ball> {
        self.obstacles.iter().map(|o| o.ball_at(t, self.h)).collect()
    }

    pub fn target_position(&self) -> Vec2 {
        Vec2::new(self.zf[0], self.zf[1])
    }

    /// `||z - zf||_{Q0}`.
    pub fn terminal_distance(&self, z: &DVector<f64>) -> f64 {
        weighted_norm(&self.q0, &(z - &self.zf))
    }

    pub fn reached(&self, z: &DVector<f64>) -> bool {
        self.terminal_distance(z) <= self.gamma
    }

    /// `z' Q1 z`.
    pub fn state_norm_sq(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.q1 * z))
    }

    /// `u' Q2 u`.
    pub fn control_norm_sq(&self, u: &DVector<f64>) -> f64 {
        u.dot(&(&self.q2 * u))
    }

    /// Smallest eigenvalue of Q0.
    pub fn q0_min_eigenvalue(&self) -> f64 {
        self.q0.clone().symmetric_eigenvalues().min()
    }
}

/// One reason a scenario is rejected.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DimensionMismatch { what: String },
    NonPositiveRadius { id: usize },
    StartInsideObstacle { id: usize },
    TargetInsideObstacle { id: usize },
    ObstaclesTooClose { a: usize, b: usize, gap: f64 },
    WeightNotPositive { matrix: String },
    BadHorizon,
    BadStep,
    BadGamma,
    BadLimits,
    Unreachable,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch { what } => write!(f, "dimension mismatch: {what}"),
            Violation::NonPositiveRadius { id } => write!(f, "obstacle {id} has non-positive radius"),
            Violation::StartInsideObstacle { id } => write!(f, "start position inside obstacle {id}"),
            Violation::TargetInsideObstacle { id } => write!(f, "target position inside obstacle {id}"),
            Violation::ObstaclesTooClose { a, b, gap } => {
                write!(f, "obstacles {a} and {b} closer than the clearance (surface gap {gap:.4})")
            }
            Violation::WeightNotPositive { matrix } => write!(f, "{matrix} is not symmetric positive (semi)definite"),
            Violation::BadHorizon => write!(f, "horizon bounds must satisfy 0 < N_min <= N_max"),
            Violation::BadStep => write!(f, "time step must be positive"),
            Violation::BadGamma => write!(f, "terminal tolerance must be positive"),
            Violation::BadLimits => write!(f, "speed and acceleration limits must be positive"),
            Violation::Unreachable => write!(f, "target not reachable from start on the coarse grid"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// Checks the standing assumptions at `t = 0`: start and target outside every
/// ball, pairwise gaps larger than `ell`, well-formed limits, and coarse
/// reachability of the target.
pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut out = Vec::new();
    let n = s.model.state_dim();
    let m = s.model.control_dim();
    let dims_ok = s.z0.len() == n
        && s.zf.len() == n
        && s.q0.shape() == (n, n)
        && s.q1.shape() == (n, n)
        && s.q2.shape() == (m, m);
    if !dims_ok {
        out.push(Violation::DimensionMismatch {
            what: format!("expected states of length {n}, Q0/Q1 {n}x{n}, Q2 {m}x{m}"),
        });
        return ValidationReport { violations: out };
    }
    if !(s.n_min > 0 && s.n_min <= s.n_max) {
        out.push(Violation::BadHorizon);
    }
    if !(s.h > 0.0 && s.h.is_finite()) {
        out.push(Violation::BadStep);
    }
    if !(s.gamma > 0.0) {
        out.push(Violation::BadGamma);
    }
    if !(s.v_max > 0.0 && s.a_max > 0.0) {
        out.push(Violation::BadLimits);
    }
    let tol = 1e-12;
    for (name, q, definite) in [("Q0", &s.q0, true), ("Q1", &s.q1, false), ("Q2", &s.q2, true)] {
        let ok = is_symmetric(q) && {
            let e = min_eig(q);
            if definite {
                e > tol
            } else {
                e >= -tol && q.amax() > 0.0
            }
        };
        if !ok {
            out.push(Violation::WeightNotPositive { matrix: name.into() });
        }
    }
    let start = Vec2::new(s.z0[0], s.z0[1]);
    let target = s.target_position();
    for o in &s.obstacles {
        if !(o.radius > 0.0) {
            out.push(Violation::NonPositiveRadius { id: o.id });
            continue;
        }
        if (start - o.center0).norm() <= o.radius {
            out.push(Violation::StartInsideObstacle { id: o.id });
        }
        if (target - o.center0).norm() <= o.radius {
            out.push(Violation::TargetInsideObstacle { id: o.id });
        }
    }
    for i in 0..s.obstacles.len() {
        for j in i + 1..s.obstacles.len() {
            let (a, b) = (&s.obstacles[i], &s.obstacles[j]);
            let gap = (a.center0 - b.center0).norm() - a.radius - b.radius;
            if gap <= s.clearance_ell {
                out.push(Violation::ObstaclesTooClose { a: a.id, b: b.id, gap });
            }
        }
    }
    let blocked_ends = out
        .iter()
        .any(|v| matches!(v, Violation::StartInsideObstacle { .. } | Violation::TargetInsideObstacle { .. }));
    if !blocked_ends && !grid_reachable(start, target, &s.balls_at(0.0)) {
        out.push(Violation::Unreachable);
    }
    ValidationReport { violations: out }
}

/// Breadth-first search on a 4-connected grid covering the start, target and
/// all balls with a margin. A cell is free when its center clears every ball
/// by half a cell diagonal; the start and target cells are always free.
fn grid_reachable(start: Vec2, target: Vec2, balls: &[Ball]) -> bool {
    let mut lo = start.inf(&target);
    let mut hi = start.sup(&target);
    for b in balls {
        lo = lo.inf(&(b.center - Vec2::repeat(b.radius)));
        hi = hi.sup(&(b.center + Vec2::repeat(b.radius)));
    }
    let extent = (hi - lo).max().max(1.0);
    let margin = 0.05 * extent + 2.0;
    lo -= Vec2::repeat(margin);
    hi += Vec2::repeat(margin);
    let cell = ((hi - lo).max() / 320.0).max(0.05);
    let nx = ((hi.x - lo.x) / cell).ceil() as usize + 1;
    let ny = ((hi.y - lo.y) / cell).ceil() as usize + 1;
    let index = |p: &Vec2| -> (usize, usize) {
        (
            (((p.x - lo.x) / cell).floor() as usize).min(nx - 1),
            (((p.y - lo.y) / cell).floor() as usize).min(ny - 1),
        )
    };
    let s = index(&start);
    let t = index(&target);
    let half_diag = cell * std::f64::consts::FRAC_1_SQRT_2;
    let free = |ix: usize, iy: usize| -> bool {
        if (ix, iy) == s || (ix, iy) == t {
            return true;
        }
        let c = Vec2::new(lo.x + (ix as f64 + 0.5) * cell, lo.y + (iy as f64 + 0.5) * cell);
        balls.iter().all(|b| b.clearance(&c) > half_diag)
    };
    let mut seen = vec![false; nx * ny];
    let mut queue = VecDeque::new();
    seen[s.1 * nx + s.0] = true;
    queue.push_back(s);
    while let Some((x, y)) = queue.pop_front() {
        if (x, y) == t {
            return true;
        }
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (a, b) in neighbours {
            if a < nx && b < ny && !seen[b * nx + a] && free(a, b) {
                seen[b * nx + a] = true;
                queue.push_back((a, b));
            }
        }
    }
    false
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("could not place obstacle {placed} of {requested} after {attempts} attempts")]
    GenerationFailed {
        placed: usize,
        requested: usize,
        attempts: usize,
    },
}

/// Parameters of the seeded map generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub n_obs: usize,
    pub radius_range: (f64, f64),
    /// `[xmin, ymin, xmax, ymax]` for obstacle centers.
    pub bounds: [f64; 4],
    pub ell: f64,
    pub model: VehicleModel,
    pub v_max: f64,
    pub a_max: f64,
    pub omega_max: f64,
    pub gamma: f64,
    pub h: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub start: [f64; 2],
    pub target: [f64; 2],
    /// Maximal obstacle speed; `None` for a static map.
    pub obstacle_speed: Option<f64>,
    pub obstacle_accel: f64,
    /// Placement draws per obstacle before giving up.
    pub max_attempts: usize,
}

impl GenParams {
    /// Static 20-obstacle double-integrator map: radii in `[3, 11]`, `ell = 7`,
    /// `v_max = 12`, `a_max = 20`, `gamma = 3`, start at the origin at rest and
    /// target `(160, 160)` at rest.
    pub fn table1(seed: u64) -> Self {
        Self {
            seed,
            n_obs: 20,
            radius_range: (3.0, 11.0),
            bounds: [0.0, 0.0, 160.0, 160.0],
            ell: 7.0,
            model: VehicleModel::DoubleIntegrator,
            v_max: 12.0,
            a_max: 20.0,
            omega_max: 1.5,
            gamma: 3.0,
            h: 0.25,
            n_min: 8,
            n_max: 24,
            start: [0.0, 0.0],
            target: [160.0, 160.0],
            obstacle_speed: None,
            obstacle_accel: 0.0,
            max_attempts: 20_000,
        }
    }

    /// Moving-obstacle map: `v_max = a_max = 6`, obstacle speed `0.3 v_max`.
    pub fn table5(seed: u64, n_obs: usize) -> Self {
        Self {
            n_obs,
            v_max: 6.0,
            a_max: 6.0,
            obstacle_speed: Some(1.8),
            obstacle_accel: 1.0,
            ..Self::table1(seed)
        }
    }
}

/// Places `n_obs` balls by rejection sampling. Draw order per attempt is
/// center x, center y, radius from `SeededRng::new(seed)`; walk seeds are
/// `derive_seed(seed, id)`.
pub fn generate_scenario(p: &GenParams) -> Result<Scenario, ScenarioError> {
    let start = Vec2::new(p.start[0], p.start[1]);
    let target = Vec2::new(p.target[0], p.target[1]);
    let heading = (target - start).y.atan2((target - start).x);
    let mut s = Scenario::new(
        p.model,
        rest_state(p.model, start, heading),
        rest_state(p.model, target, heading),
        p.v_max,
        p.a_max,
    );
    s.omega_max = p.omega_max;
    let (q0, q1, q2) = default_weights(p.model, p.v_max, p.a_max, p.omega_max);
    s.q0 = q0;
    s.q1 = q1;
    s.q2 = q2;
    s.gamma = p.gamma;
    s.clearance_ell = p.ell;
    s.h = p.h;
    s.n_min = p.n_min;
    s.n_max = p.n_max;
    s.bounds = p.bounds;

    let mut rng = SeededRng::new(p.seed);
    let (rlo, rhi) = p.radius_range;
    let [xmin, ymin, xmax, ymax] = p.bounds;
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(p.n_obs);
    for id in 0..p.n_obs {
        let mut placed = false;
        for _ in 0..p.max_attempts {
            let c = Vec2::new(rng.uniform(xmin, xmax), rng.uniform(ymin, ymax));
            let r = rng.uniform(rlo, rhi);
            let clear_ends = (c - start).norm() > r + p.ell && (c - target).norm() > r + p.ell;
            let clear_others = obstacles
                .iter()
                .all(|o| (c - o.center0).norm() > r + o.radius + p.ell);
            if clear_ends && clear_others {
                let motion = match p.obstacle_speed {
                    None => ObstacleMotion::Static,
                    Some(max_speed) => ObstacleMotion::SeededRandomWalk {
                        max_speed,
                        accel_cap: p.obstacle_accel,
                        seed: derive_seed(p.seed, id as u64),
                    },
                };
                obstacles.push(Obstacle::new(id, c, r, motion));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(ScenarioError::GenerationFailed {
                placed: id,
                requested: p.n_obs,
                attempts: p.max_attempts,
            });
        }
    }
    s.obstacles = obstacles;
    Ok(s)
}
