//! Knot/control sequences.

use nalgebra::DVector;

use crate::geometry::Vec2;

/// Knot states `z_1..z_{N+1}` and controls `u_1..u_N` on a uniform time grid
/// starting at `t0` with step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub h: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(t0: f64, h: f64, first: DVector<f64>) -> Self {
        Self {
            t0,
            h,
            states: vec![first],
            controls: Vec::new(),
        }
    }

    /// Number of controls `N`.
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn position(&self, i: usize) -> Vec2 {
        Vec2::new(self.states[i][0], self.states[i][1])
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.states.iter().map(|z| Vec2::new(z[0], z[1]))
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one knot")
    }

    pub fn push(&mut self, u: DVector<f64>, z_next: DVector<f64>) {
        self.controls.push(u);
        self.states.push(z_next);
    }

    /// Duration `N * h`.
    pub fn duration(&self) -> f64 {
        self.controls.len() as f64 * self.h
    }
}
