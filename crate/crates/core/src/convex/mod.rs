//! Small dense convex programs
//!
//! ```text
//! minimize    1/2 x'Px + q'x + c
//! subject to  a_k'x  = b_k                   (eq)
//!             x_S'Q x_S + l'x <= r           (quad_ineq, Q on a support S)
//!             a_k'x <= b_k                   (lin_ineq)
//! ```
//!
//! solved by presolve, null-space elimination of the equalities and a
//! primal-dual interior point method on the reduced problem.

mod ipm;
mod presolve;
mod text;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

pub use ipm::{solve, solve_with, SolverOptions};
pub use presolve::{presolve, PresolveError};
pub use text::{parse_text, ParseError};

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: f64,
}

/// `a'x = b` or `a'x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub a: DVector<f64>,
    pub b: f64,
}

impl LinearRow {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) - self.b
    }
}

/// `x_S' Q x_S + l'x <= r` where `x_S` selects the `support` indices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub support: Vec<usize>,
    pub q: DMatrix<f64>,
    pub l: DVector<f64>,
    pub r: f64,
}

impl QuadConstraint {
    /// `x_S'Q x_S + l'x - r`; non-positive when satisfied.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let xs = DVector::from_iterator(self.support.len(), self.support.iter().map(|&i| x[i]));
        xs.dot(&(&self.q * &xs)) + self.l.dot(x) - self.r
    }

    /// The quadratic form as a dense `n x n` matrix.
    pub fn dense_q(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[(i, j)] += self.q[(a, b)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProgram {
    pub n: usize,
    pub objective: Objective,
    pub eq: Vec<LinearRow>,
    pub quad_ineq: Vec<QuadConstraint>,
    pub lin_ineq: Vec<LinearRow>,
}

impl ConvexProgram {
    /// Program with zero objective and no constraints.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            objective: Objective {
                p: DMatrix::zeros(n, n),
                q: DVector::zeros(n),
                c: 0.0,
            },
            eq: Vec::new(),
            quad_ineq: Vec::new(),
            lin_ineq: Vec::new(),
        }
    }

    pub fn add_eq(&mut self, a: DVector<f64>, b: f64) {
        debug_assert_eq!(a.len(), self.n);
        self.eq.push(LinearRow { a, b });
    }

    pub fn add_lin_ineq(&mut self, a: DVector<f64>, b: f64) {
        debug_assert_eq!(a.len(), self.n);
        self.lin_ineq.push(LinearRow { a, b });
    }

    /// Sparse-row helpers taking `(index, coefficient)` pairs.
    pub fn add_eq_sparse(&mut self, coeffs: &[(usize, f64)], b: f64) {
        let a = self.sparse_row(coeffs);
        self.add_eq(a, b);
    }

    pub fn add_lin_ineq_sparse(&mut self, coeffs: &[(usize, f64)], b: f64) {
        let a = self.sparse_row(coeffs);
        self.add_lin_ineq(a, b);
    }

    /// `x_S' Q x_S + l'x <= r`; a `None` linear term is zero.
    pub fn add_quad_ineq(&mut self, support: Vec<usize>, q: DMatrix<f64>, l: Option<DVector<f64>>, r: f64) {
        debug_assert_eq!(q.shape(), (support.len(), support.len()));
        let l = l.unwrap_or_else(|| DVector::zeros(self.n));
        self.quad_ineq.push(QuadConstraint { support, q, l, r });
    }

    fn sparse_row(&self, coeffs: &[(usize, f64)]) -> DVector<f64> {
        let mut a = DVector::zeros(self.n);
        for &(i, v) in coeffs {
            a[i] += v;
        }
        a
    }

    pub fn num_constraints(&self) -> usize {
        self.eq.len() + self.quad_ineq.len() + self.lin_ineq.len()
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.objective.p * x)) + self.objective.q.dot(x) + self.objective.c
    }

    /// Largest absolute equality residual.
    pub fn eq_residual(&self, x: &DVector<f64>) -> f64 {
        self.eq.iter().map(|r| r.eval(x).abs()).fold(0.0, f64::max)
    }

    /// Largest inequality violation (zero when all hold).
    pub fn ineq_violation(&self, x: &DVector<f64>) -> f64 {
        let quad = self.quad_ineq.iter().map(|c| c.eval(x));
        let lin = self.lin_ineq.iter().map(|r| r.eval(x));
        quad.chain(lin).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.eq_residual(x) <= tol && self.ineq_violation(x) <= tol
    }

    /// Documented plain-text dump, see [`parse_text`].
    pub fn to_text(&self) -> String {
        text::write_text(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    /// Objective unbounded below on the feasible set, or non-finite data.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KktResiduals {
    /// Largest equality residual of the original program.
    pub primal_eq: f64,
    /// Largest inequality violation of the original program.
    pub primal_ineq: f64,
    /// Stationarity residual of the reduced problem (scaled units).
    pub dual: f64,
    /// `s'lambda` converted to objective units.
    pub duality_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective_value: f64,
    pub kkt_residuals: KktResiduals,
    /// Largest `lambda_j * slack_j` over inequalities, in the solver's scaling.
    pub complementarity: f64,
    /// Phase-one optimum when infeasibility was declared.
    pub infeasibility: Option<f64>,
    pub iterations: usize,
    /// Number of Newton systems that needed diagonal regularization.
    pub regularizations: usize,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("Newton system could not be factorized even with regularization")]
    IllConditioned,
    #[error("tolerance {0:e} outside [1e-12, 1e-2]")]
    BadTolerance(f64),
    #[error("program dimensions are inconsistent: {0}")]
    BadShape(String),
}

#[cfg(test)]
mod tests;
