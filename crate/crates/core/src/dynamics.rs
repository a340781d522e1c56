//! Control-affine vehicle models, forward-Euler discretization and per-cycle
//! linearization into the discrete affine system `z' = A z + B u + w`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("input matrix is rank deficient (smallest singular value {0:e})")]
    SingularModel(f64),
    #[error("non-finite jacobian at linearization point")]
    NonFinite,
}

/// Built-in control-affine models `z' = f_a(z) + f_b(z) u`.
///
/// Both models use a four-dimensional state whose first two components are the
/// planar position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VehicleModel {
    /// State `(x, y, vx, vy)`, control `(ax, ay)`.
    #[default]
    DoubleIntegrator,
    /// Kinematic unicycle: state `(x, y, theta, v)`, control `(a, omega)`.
    Unicycle,
}

impl VehicleModel {
    pub fn state_dim(&self) -> usize {
        4
    }

    pub fn control_dim(&self) -> usize {
        2
    }

    /// Indices of the planar position inside the state.
    pub fn position_slice(&self) -> std::ops::Range<usize> {
        0..2
    }

    pub fn drift(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            VehicleModel::DoubleIntegrator => DVector::from_vec(vec![z[2], z[3], 0.0, 0.0]),
            VehicleModel::Unicycle => {
                let (s, c) = z[2].sin_cos();
                DVector::from_vec(vec![z[3] * c, z[3] * s, 0.0, 0.0])
            }
        }
    }

    pub fn input_matrix(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(4, 2);
        match self {
            VehicleModel::DoubleIntegrator => {
                b[(2, 0)] = 1.0;
                b[(3, 1)] = 1.0;
            }
            VehicleModel::Unicycle => {
                b[(3, 0)] = 1.0;
                b[(2, 1)] = 1.0;
            }
        }
        b
    }

    /// Continuous dynamics `f_c(z, u)`.
    pub fn rate(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(z) + self.input_matrix(z) * u
    }

    /// Analytic `d f_c / d z` at `(z, u)`. `f_b` is state independent for both
    /// models, so this is the drift jacobian.
    pub fn state_jacobian(&self, z: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(4, 4);
        match self {
            VehicleModel::DoubleIntegrator => {
                j[(0, 2)] = 1.0;
                j[(1, 3)] = 1.0;
            }
            VehicleModel::Unicycle => {
                let (s, c) = z[2].sin_cos();
                j[(0, 2)] = -z[3] * s;
                j[(0, 3)] = c;
                j[(1, 2)] = z[3] * c;
                j[(1, 3)] = s;
            }
        }
        j
    }

    pub fn position(&self, z: &DVector<f64>) -> Vec2 {
        Vec2::new(z[0], z[1])
    }

    /// Planar velocity vector of a state.
    pub fn velocity(&self, z: &DVector<f64>) -> Vec2 {
        match self {
            VehicleModel::DoubleIntegrator => Vec2::new(z[2], z[3]),
            VehicleModel::Unicycle => {
                let (s, c) = z[2].sin_cos();
                Vec2::new(z[3] * c, z[3] * s)
            }
        }
    }

    pub fn speed(&self, z: &DVector<f64>) -> f64 {
        match self {
            VehicleModel::DoubleIntegrator => Vec2::new(z[2], z[3]).norm(),
            VehicleModel::Unicycle => z[3].abs(),
        }
    }

    /// State with the given position and planar velocity. For the unicycle the
    /// heading of `previous` is kept when the velocity vanishes.
    pub fn state_from(&self, pos: Vec2, vel: Vec2, previous: &DVector<f64>) -> DVector<f64> {
        match self {
            VehicleModel::DoubleIntegrator => DVector::from_vec(vec![pos.x, pos.y, vel.x, vel.y]),
            VehicleModel::Unicycle => {
                let speed = vel.norm();
                let theta = if speed > 0.0 { vel.y.atan2(vel.x) } else { previous[2] };
                DVector::from_vec(vec![pos.x, pos.y, theta, speed])
            }
        }
    }
}

/// Forward-Euler step `z + h f_c(z, u)`.
pub fn discretize_exact(model: VehicleModel, z: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
    z + model.rate(z, u) * h
}

/// Discrete affine system of one planning cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DVector<f64>,
    pub h: f64,
}

impl DiscreteDynamics {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b * u + &self.w
    }

    /// `z_next - (A z + B u + w)`.
    pub fn residual(&self, z: &DVector<f64>, u: &DVector<f64>, z_next: &DVector<f64>) -> DVector<f64> {
        z_next - self.step(z, u)
    }

    /// Least-squares control reproducing `z_next` from `z`, with its residual norm.
    pub fn solve_control(&self, z: &DVector<f64>, z_next: &DVector<f64>) -> (DVector<f64>, f64) {
        let rhs = z_next - &self.a * z - &self.w;
        let btb = self.b.transpose() * &self.b;
        let u = btb
            .cholesky()
            .map(|c| c.solve(&(self.b.transpose() * &rhs)))
            .unwrap_or_else(|| DVector::zeros(self.control_dim()));
        let res = (&rhs - &self.b * &u).norm();
        (u, res)
    }
}

/// Linearizes the Euler-discretized model at `z0` with nominal control zero:
/// `A = I + h J`, `B = h f_b(z0)`, `w = h (f_a(z0) - J z0)`, `J = d f_c/d z (z0, 0)`.
pub fn linearize(model: VehicleModel, z0: &DVector<f64>, h: f64) -> Result<DiscreteDynamics, DynamicsError> {
    let n = model.state_dim();
    let u0 = DVector::zeros(model.control_dim());
    let jac = model.state_jacobian(z0, &u0);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite);
    }
    let a = DMatrix::identity(n, n) + &jac * h;
    let b = model.input_matrix(z0) * h;
    let w = (model.drift(z0) - &jac * z0) * h;
    let smallest = b.clone().svd(false, false).singular_values.min();
    if !(smallest > 1e-12 * h.max(1e-300)) {
        return Err(DynamicsError::SingularModel(smallest));
    }
    Ok(DiscreteDynamics { a, b, w, h })
}

/// One-step propagator used by the trajectory searches.
#[derive(Debug, Clone, Copy)]
pub enum Propagator<'a> {
    /// Nonlinear forward Euler on the model.
    Exact { model: VehicleModel, h: f64 },
    /// The planning cycle's linearized system.
    Linear(&'a DiscreteDynamics),
}

impl Propagator<'_> {
    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Propagator::Exact { model, h } => discretize_exact(*model, z, u, *h),
            Propagator::Linear(d) => d.step(z, u),
        }
    }
}

/// Rolls the discrete system forward: `z_{i+1} = A z_i + B u_i + w`.
pub fn rollout(dynamics: &DiscreteDynamics, z1: &DVector<f64>, controls: &[DVector<f64>], t0: f64) -> Trajectory {
    let mut traj = Trajectory::new(t0, dynamics.h, z1.clone());
    for u in controls {
        let next = dynamics.step(traj.last_state(), u);
        traj.push(u.clone(), next);
    }
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn double_integrator_pure_drift() {
        let z = discretize_exact(VehicleModel::DoubleIntegrator, &v(&[0.0, 0.0, 1.0, 0.0]), &v(&[0.0, 0.0]), 0.5);
        assert_eq!(z, v(&[0.5, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn double_integrator_pure_acceleration() {
        let z = discretize_exact(VehicleModel::DoubleIntegrator, &v(&[0.0; 4]), &v(&[2.0, 0.0]), 0.5);
        assert_eq!(z, v(&[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn unicycle_euler_step() {
        let z = discretize_exact(VehicleModel::Unicycle, &v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0]), 0.1);
        assert!((z - v(&[0.1, 0.0, 0.0, 1.0])).norm() < 1e-15);
    }

    #[test]
    fn double_integrator_linearization_matches_closed_form() {
        let h = 0.25;
        let d = linearize(VehicleModel::DoubleIntegrator, &v(&[3.0, -1.0, 2.0, 5.0]), h).unwrap();
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = h;
        a[(1, 3)] = h;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = h;
        b[(3, 1)] = h;
        assert_eq!(d.a, a);
        assert_eq!(d.b, b);
        assert_eq!(d.w, DVector::zeros(4));
    }

    #[test]
    fn linearize_is_deterministic() {
        let z0 = v(&[1.0, 2.0, 0.3, 4.0]);
        let a = linearize(VehicleModel::Unicycle, &z0, 0.2).unwrap();
        let b = linearize(VehicleModel::Unicycle, &z0, 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linearization_is_exact_at_nominal_point() {
        let z0 = v(&[1.0, 2.0, 0.7, 3.0]);
        let d = linearize(VehicleModel::Unicycle, &z0, 0.1).unwrap();
        let u = v(&[0.4, -0.2]);
        let exact = discretize_exact(VehicleModel::Unicycle, &z0, &u, 0.1);
        assert!((d.step(&z0, &u) - exact).norm() < 1e-14);
    }

    #[test]
    fn rollout_constant_with_identity() {
        let d = DiscreteDynamics {
            a: DMatrix::identity(4, 4),
            b: DMatrix::zeros(4, 2),
            w: DVector::zeros(4),
            h: 1.0,
        };
        let z1 = v(&[1.0, 2.0, 3.0, 4.0]);
        let t = rollout(&d, &z1, &vec![v(&[0.0, 0.0]); 5], 0.0);
        assert_eq!(t.states.len(), 6);
        assert!(t.states.iter().all(|z| *z == z1));
    }

    #[test]
    fn rollout_velocity_grows_linearly() {
        let h = 0.25;
        let d = linearize(VehicleModel::DoubleIntegrator, &v(&[0.0; 4]), h).unwrap();
        let t = rollout(&d, &v(&[0.0; 4]), &vec![v(&[1.0, 0.0]); 8], 0.0);
        for (i, z) in t.states.iter().enumerate() {
            assert!((z[2] - h * i as f64).abs() < 1e-14);
            // x_i = h^2 * i (i - 1) / 2
            let x = h * h * (i * i.saturating_sub(1)) as f64 / 2.0;
            assert!((z[0] - x).abs() < 1e-13);
        }
        for i in 0..8 {
            let r = d.residual(&t.states[i], &t.controls[i], &t.states[i + 1]);
            assert_eq!(r.norm(), 0.0);
        }
    }

    #[test]
    fn singular_input_matrix_rejected() {
        let err = linearize(VehicleModel::DoubleIntegrator, &v(&[0.0; 4]), 0.0).unwrap_err();
        assert!(matches!(err, DynamicsError::SingularModel(_)));
    }

    #[test]
    fn unicycle_euler_error_is_second_order() {
        let m = VehicleModel::Unicycle;
        let z = v(&[0.0, 0.0, 0.4, 3.0]);
        let u = v(&[1.5, 0.8]);
        let err = |h: f64| {
            let mut fine = z.clone();
            for _ in 0..100 {
                fine = discretize_exact(m, &fine, &u, h / 100.0);
            }
            (discretize_exact(m, &z, &u, h) - fine).norm()
        };
        let hs: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
        let (lx, ly): (Vec<f64>, Vec<f64>) = hs.iter().map(|&h| (h.ln(), err(h).ln())).unzip();
        let mx = lx.iter().sum::<f64>() / 4.0;
        let my = ly.iter().sum::<f64>() / 4.0;
        let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = num / den;
        assert!((slope - 2.0).abs() <= 0.2, "slope {slope}");
    }

    fn state() -> impl Strategy<Value = DVector<f64>> {
        prop::array::uniform4(-20.0..20.0f64).prop_map(|a| v(&a))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn jacobian_matches_central_differences(z in state(), u in prop::array::uniform2(-5.0..5.0f64), uni in any::<bool>()) {
            let m = if uni { VehicleModel::Unicycle } else { VehicleModel::DoubleIntegrator };
            let u = v(&u);
            let j = m.state_jacobian(&z, &u);
            let eps = 1e-6;
            let mut fd = DMatrix::zeros(4, 4);
            for c in 0..4 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[c] += eps;
                zm[c] -= eps;
                fd.set_column(c, &((m.rate(&zp, &u) - m.rate(&zm, &u)) / (2.0 * eps)));
            }
            prop_assert!((&j - &fd).norm() <= 1e-5 * j.norm().max(1.0), "{j} vs {fd}");
        }

        #[test]
        fn double_integrator_linearization_ignores_the_state(a in state(), b in state()) {
            let m = VehicleModel::DoubleIntegrator;
            prop_assert_eq!(linearize(m, &a, 0.25).unwrap(), linearize(m, &b, 0.25).unwrap());
        }
    }
}
