use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{ConvexProgram, LinearRow, QuadConstraint};

#[derive(Debug, Error, PartialEq)]
pub enum PresolveError {
    #[error("constraints are contradictory (residual {0:e})")]
    ProvablyInfeasible(f64),
}

/// Rows whose coefficients fall below this norm are treated as zero rows.
const ZERO_ROW: f64 = 1e-14;
/// Relative threshold below which a Gram-Schmidt residual marks dependence.
const DEPENDENT: f64 = 1e-9;
/// Tolerance on right-hand sides when checking consistency.
const RHS_TOL: f64 = 1e-9;

/// Returns an equivalent program with:
/// - symmetric objective and constraint matrices, negative eigenvalues clipped;
/// - zero rows removed (or reported as contradictions);
/// - opposite linear inequality pairs with matching bounds turned into
///   equalities (this covers fixed variables, which the null-space step then
///   eliminates) and duplicated inequalities reduced to the tightest one;
/// - dependent equality rows dropped;
/// - linear rows scaled to unit norm and quadratic rows to unit largest
///   coefficient.
pub fn presolve(p: &ConvexProgram) -> Result<ConvexProgram, PresolveError> {
    let mut out = ConvexProgram::new(p.n);
    out.objective.p = clip_psd(&p.objective.p);
    out.objective.q = p.objective.q.clone();
    out.objective.c = p.objective.c;

    let mut eq: Vec<LinearRow> = Vec::new();
    for row in &p.eq {
        if let Some(r) = normalized(row)? {
            eq.push(r);
        }
    }

    let mut lin: Vec<LinearRow> = Vec::new();
    for row in &p.lin_ineq {
        let Some(r) = normalized_ineq(row)? else { continue };
        let mut merged = false;
        for (k, other) in lin.iter().enumerate() {
            if (&r.a - &other.a).amax() <= 1e-12 {
                lin[k].b = other.b.min(r.b);
                merged = true;
                break;
            }
        }
        if !merged {
            lin.push(r);
        }
    }
    let mut used = vec![false; lin.len()];
    let mut kept = Vec::new();
    for i in 0..lin.len() {
        if used[i] {
            continue;
        }
        let mut paired = false;
        for j in i + 1..lin.len() {
            if used[j] || (&lin[i].a + &lin[j].a).amax() > 1e-12 {
                continue;
            }
            let width = lin[i].b + lin[j].b;
            let scale = 1.0 + lin[i].b.abs().max(lin[j].b.abs());
            if width < -RHS_TOL * scale {
                return Err(PresolveError::ProvablyInfeasible(-width));
            }
            if width <= RHS_TOL * scale {
                eq.push(LinearRow {
                    a: lin[i].a.clone(),
                    b: 0.5 * (lin[i].b - lin[j].b),
                });
                used[j] = true;
                paired = true;
                break;
            }
        }
        used[i] = true;
        if !paired {
            kept.push(lin[i].clone());
        }
    }
    out.lin_ineq = kept;
    out.eq = independent_rows(eq)?;

    for c in &p.quad_ineq {
        let q = clip_psd(&c.q);
        let scale = q.amax().max(c.l.amax());
        if scale <= ZERO_ROW {
            if c.r < -RHS_TOL {
                return Err(PresolveError::ProvablyInfeasible(-c.r));
            }
            continue;
        }
        out.quad_ineq.push(QuadConstraint {
            support: c.support.clone(),
            q: q / scale,
            l: &c.l / scale,
            r: c.r / scale,
        });
    }
    Ok(out)
}

fn normalized(row: &LinearRow) -> Result<Option<LinearRow>, PresolveError> {
    let norm = row.a.norm();
    if norm <= ZERO_ROW {
        if row.b.abs() > RHS_TOL {
            return Err(PresolveError::ProvablyInfeasible(row.b.abs()));
        }
        return Ok(None);
    }
    Ok(Some(LinearRow {
        a: &row.a / norm,
        b: row.b / norm,
    }))
}

fn normalized_ineq(row: &LinearRow) -> Result<Option<LinearRow>, PresolveError> {
    let norm = row.a.norm();
    if norm <= ZERO_ROW {
        if row.b < -RHS_TOL {
            return Err(PresolveError::ProvablyInfeasible(-row.b));
        }
        return Ok(None);
    }
    Ok(Some(LinearRow {
        a: &row.a / norm,
        b: row.b / norm,
    }))
}

/// Modified Gram-Schmidt with one reorthogonalization pass over unit rows.
/// A dependent row is dropped when its right-hand side is consistent with the
/// accepted rows and reported as a contradiction otherwise.
fn independent_rows(rows: Vec<LinearRow>) -> Result<Vec<LinearRow>, PresolveError> {
    let mut basis: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut kept = Vec::new();
    for row in rows {
        let mut v = row.a.clone();
        let mut beta = row.b;
        for _ in 0..2 {
            for (q, qb) in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
                beta -= c * qb;
            }
        }
        let norm = v.norm();
        if norm <= DEPENDENT {
            if beta.abs() > RHS_TOL * (1.0 + row.b.abs()) {
                return Err(PresolveError::ProvablyInfeasible(beta.abs()));
            }
            continue;
        }
        basis.push((v / norm, beta / norm));
        kept.push(row);
    }
    Ok(kept)
}

/// Symmetrizes and clips negative eigenvalues to zero. Matrices that are
/// already PSD are returned symmetrized but otherwise untouched.
pub(super) fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 0 || is_diagonal(&sym) {
        let mut out = sym;
        for i in 0..out.nrows() {
            out[(i, i)] = out[(i, i)].max(0.0);
        }
        return out;
    }
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}
