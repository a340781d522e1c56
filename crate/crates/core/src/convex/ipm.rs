//! Primal-dual interior point method with Mehrotra predictor-corrector on the
//! equality-free reduced problem `x = x_p + Z y`.

use nalgebra::{DMatrix, DVector, Dyn};

use super::presolve::{presolve, PresolveError};
use super::{ConvexProgram, KktResiduals, Solution, SolveError, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Fraction-to-boundary factor.
const STEP_FRACTION: f64 = 0.99;
/// A step is halved while the merit grows by more than this factor.
const MERIT_GROWTH: f64 = 1.5;
const MAX_HALVINGS: usize = 8;
/// Iterates beyond this magnitude are taken as an unbounded objective.
const UNBOUNDED: f64 = 1e9;
/// Diagonal added to the Newton matrix of the scaled problem.
const PROXIMAL: f64 = 1e-9;

pub fn solve(p: &ConvexProgram, tol: f64, max_iter: usize) -> Result<Solution, SolveError> {
    solve_with(p, &SolverOptions { tol, max_iter })
}

pub fn solve_with(p: &ConvexProgram, opts: &SolverOptions) -> Result<Solution, SolveError> {
    let tol = opts.tol;
    if !(1e-12..=1e-2).contains(&tol) {
        return Err(SolveError::BadTolerance(tol));
    }
    check_shapes(p)?;
    if !data_finite(p) {
        return Ok(finish(p, DVector::zeros(p.n), SolveStatus::Degenerate, Stats::default()));
    }
    let pre = match presolve(p) {
        Ok(pre) => pre,
        Err(PresolveError::ProvablyInfeasible(r)) => {
            let stats = Stats {
                infeasibility: Some(r),
                ..Stats::default()
            };
            return Ok(finish(p, DVector::zeros(p.n), SolveStatus::Infeasible, stats));
        }
    };
    let red = match Reduced::build(&pre, tol) {
        Ok(r) => r,
        Err(residual) => {
            let stats = Stats {
                infeasibility: Some(residual),
                ..Stats::default()
            };
            return Ok(finish(p, DVector::zeros(p.n), SolveStatus::Infeasible, stats));
        }
    };
    let full_obj = |y: &DVector<f64>| pre.objective_value(&red.lift(y));
    let out = interior_point(&red.problem, &DVector::zeros(red.problem.m), tol, opts.max_iter, &full_obj, red.sigma, false)?;
    let mut stats = Stats {
        iterations: out.iterations,
        regularizations: out.regularizations,
        dual: out.dual,
        gap: out.gap / red.sigma,
        complementarity: out.complementarity,
        infeasibility: None,
    };
    let mut y = out.y.clone();
    let status = match out.end {
        End::Converged => SolveStatus::Optimal,
        End::Unbounded => SolveStatus::Degenerate,
        End::MaxIter => {
            let ph = phase_one(&red.problem, &out.y, tol, opts.max_iter)?;
            stats.iterations += ph.iterations;
            stats.regularizations += ph.regularizations;
            match ph.value {
                Some(t) if t > 10.0 * tol => {
                    stats.infeasibility = Some(t);
                    SolveStatus::Infeasible
                }
                // restart on the strictly feasible point when there is one
                Some(t) if t < -10.0 * tol => {
                    let again = interior_point(&red.problem, &ph.y, tol, opts.max_iter, &full_obj, red.sigma, true)?;
                    stats.iterations += again.iterations;
                    stats.regularizations += again.regularizations;
                    if again.end == End::Converged {
                        stats.dual = again.dual;
                        stats.gap = again.gap / red.sigma;
                        stats.complementarity = again.complementarity;
                        y = again.y;
                        SolveStatus::Optimal
                    } else {
                        SolveStatus::MaxIter
                    }
                }
                _ => SolveStatus::MaxIter,
            }
        }
    };
    Ok(finish(p, red.lift(&y), status, stats))
}

fn check_shapes(p: &ConvexProgram) -> Result<(), SolveError> {
    let n = p.n;
    let bad = |what: &str| Err(SolveError::BadShape(what.to_string()));
    if p.objective.p.shape() != (n, n) || p.objective.q.len() != n {
        return bad("objective");
    }
    if p.eq.iter().chain(&p.lin_ineq).any(|r| r.a.len() != n) {
        return bad("linear row length");
    }
    for c in &p.quad_ineq {
        let k = c.support.len();
        if c.q.shape() != (k, k) || c.l.len() != n || c.support.iter().any(|&i| i >= n) {
            return bad("quadratic constraint");
        }
    }
    Ok(())
}

fn data_finite(p: &ConvexProgram) -> bool {
    let fin = |v: &[f64]| v.iter().all(|x| x.is_finite());
    fin(p.objective.p.as_slice())
        && fin(p.objective.q.as_slice())
        && p.objective.c.is_finite()
        && p.eq.iter().chain(&p.lin_ineq).all(|r| fin(r.a.as_slice()) && r.b.is_finite())
        && p.quad_ineq
            .iter()
            .all(|c| fin(c.q.as_slice()) && fin(c.l.as_slice()) && c.r.is_finite())
}

#[derive(Debug, Default)]
struct Stats {
    iterations: usize,
    regularizations: usize,
    dual: f64,
    gap: f64,
    complementarity: f64,
    infeasibility: Option<f64>,
}

fn finish(p: &ConvexProgram, x: DVector<f64>, status: SolveStatus, stats: Stats) -> Solution {
    Solution {
        status,
        objective_value: p.objective_value(&x),
        kkt_residuals: KktResiduals {
            primal_eq: p.eq_residual(&x),
            primal_ineq: p.ineq_violation(&x),
            dual: stats.dual,
            duality_gap: stats.gap,
        },
        x,
        complementarity: stats.complementarity,
        infeasibility: stats.infeasibility,
        iterations: stats.iterations,
        regularizations: stats.regularizations,
    }
}

/// `g(y) = y'Qy + l'y + c <= 0`; `q` is `None` for affine rows.
#[derive(Debug, Clone)]
struct Constraint {
    q: Option<DMatrix<f64>>,
    l: DVector<f64>,
    c: f64,
}

impl Constraint {
    fn value(&self, y: &DVector<f64>) -> f64 {
        let quad = self.q.as_ref().map_or(0.0, |q| y.dot(&(q * y)));
        quad + self.l.dot(y) + self.c
    }

    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.q {
            Some(q) => q * y * 2.0 + &self.l,
            None => self.l.clone(),
        }
    }
}

/// Inequality-only problem `min 1/2 y'Py + q'y  s.t.  g_j(y) <= 0`.
#[derive(Debug, Clone)]
struct Problem {
    m: usize,
    p: DMatrix<f64>,
    q: DVector<f64>,
    cons: Vec<Constraint>,
}

struct Reduced {
    xp: DVector<f64>,
    z: DMatrix<f64>,
    sigma: f64,
    problem: Problem,
}

impl Reduced {
    /// Eliminates the equalities through the SVD of the (square padded)
    /// equality matrix. `Err` carries the residual of an inconsistent system
    /// or of a constant inequality that cannot hold.
    fn build(pre: &ConvexProgram, tol: f64) -> Result<Self, f64> {
        let n = pre.n;
        let (xp, z) = if pre.eq.is_empty() {
            (DVector::zeros(n), DMatrix::identity(n, n))
        } else {
            let rows = pre.eq.len().max(n);
            let mut a = DMatrix::zeros(rows, n);
            let mut b = DVector::zeros(rows);
            for (i, r) in pre.eq.iter().enumerate() {
                a.set_row(i, &r.a.transpose());
                b[i] = r.b;
            }
            let svd = a.clone().svd(true, true);
            let u = svd.u.as_ref().expect("requested U");
            let vt = svd.v_t.as_ref().expect("requested V^T");
            let smax = svd.singular_values.max();
            let thresh = 1e-10 * smax.max(1e-300);
            let mut xp = DVector::zeros(n);
            let mut null = Vec::new();
            for (k, &s) in svd.singular_values.iter().enumerate() {
                if s > thresh {
                    let coef = u.column(k).dot(&b) / s;
                    xp += vt.row(k).transpose() * coef;
                } else {
                    null.push(vt.row(k).transpose());
                }
            }
            let residual = (&a * &xp - &b).amax();
            if residual > 1e-8 * (1.0 + b.amax()) {
                return Err(residual);
            }
            let z = if null.is_empty() {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_columns(&null)
            };
            (xp, z)
        };
        let m = z.ncols();
        let zt = z.transpose();
        let obj = &pre.objective;
        let p_red = &zt * &obj.p * &z;
        let q_red = &zt * (&obj.p * &xp + &obj.q);
        let sigma = 1.0 / p_red.amax().max(q_red.amax()).max(1.0);

        let mut cons = Vec::with_capacity(pre.quad_ineq.len() + pre.lin_ineq.len());
        // `scale` is the size of the row before elimination; what survives
        // below round-off of it is a constant
        let mut push = |con: Constraint, scale: f64| -> Result<(), f64> {
            let tiny = 1e-10 * scale.max(1e-4);
            let empty = con.l.amax() <= tiny && con.q.as_ref().is_none_or(|q| q.amax() <= tiny);
            if empty {
                if con.c > 10.0 * tol {
                    return Err(con.c);
                }
                return Ok(());
            }
            cons.push(con);
            Ok(())
        };
        for c in &pre.quad_ineq {
            let k = c.support.len();
            let mut zs = DMatrix::zeros(k, m);
            let mut xs = DVector::zeros(k);
            for (a, &i) in c.support.iter().enumerate() {
                zs.set_row(a, &z.row(i));
                xs[a] = xp[i];
            }
            let qz = &c.q * &zs;
            let q_red = zs.transpose() * &qz;
            let l_red = zs.transpose() * (&c.q * &xs) * 2.0 + &zt * &c.l;
            let c0 = xs.dot(&(&c.q * &xs)) + c.l.dot(&xp) - c.r;
            let scale = c.q.amax() * (1.0 + xs.amax()) + c.l.amax();
            push(
                Constraint {
                    q: Some((&q_red + q_red.transpose()) * 0.5),
                    l: l_red,
                    c: c0,
                },
                scale,
            )?;
        }
        for r in &pre.lin_ineq {
            push(
                Constraint {
                    q: None,
                    l: &zt * &r.a,
                    c: r.a.dot(&xp) - r.b,
                },
                r.a.amax(),
            )?;
        }
        Ok(Self {
            xp,
            z,
            sigma,
            problem: Problem {
                m,
                p: (&p_red + p_red.transpose()) * (0.5 * sigma),
                q: q_red * sigma,
                cons,
            },
        })
    }

    fn lift(&self, y: &DVector<f64>) -> DVector<f64> {
        if y.is_empty() {
            self.xp.clone()
        } else {
            &self.xp + &self.z * y
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum End {
    Converged,
    MaxIter,
    Unbounded,
}

struct Outcome {
    y: DVector<f64>,
    end: End,
    iterations: usize,
    regularizations: usize,
    dual: f64,
    gap: f64,
    complementarity: f64,
}

/// Residuals and derivatives at one iterate.
struct Point {
    jac: DMatrix<f64>,
    rd: DVector<f64>,
    rp: DVector<f64>,
    merit: f64,
}

fn evaluate(pr: &Problem, y: &DVector<f64>, s: &DVector<f64>, lam: &DVector<f64>) -> Point {
    let nc = pr.cons.len();
    let mut g = DVector::zeros(nc);
    let mut jac = DMatrix::zeros(nc, pr.m);
    for (j, c) in pr.cons.iter().enumerate() {
        g[j] = c.value(y);
        jac.set_row(j, &c.gradient(y).transpose());
    }
    let rd = &pr.p * y + &pr.q + jac.transpose() * lam;
    let rp = &g + s;
    let merit = rp.norm() + rd.norm() + s.dot(lam);
    Point { jac, rd, rp, merit }
}

/// Newton system of one iteration. Constraints with `s/lam < 1` (near
/// active) stay in the augmented block
///
/// ```text
/// [ H    J_a'  ] [dy    ]   [ -rd - J_i' t_i       ]
/// [ J_a  -D_a  ] [dlam_a] = [ -rp_a + rc_a / lam_a ]
/// ```
///
/// with `D = S / Lambda`, while the others are condensed into
/// `H = H0 + J_i' W_i J_i`, `W = Lambda / S`. Both parts stay bounded as
/// slacks or multipliers vanish; condensing everything loses the curvature
/// of directions orthogonal to active constraints.
struct Newton<'a> {
    lu: nalgebra::LU<f64, Dyn, Dyn>,
    k: DMatrix<f64>,
    active: Vec<usize>,
    inactive: Vec<usize>,
    jac: &'a DMatrix<f64>,
    s: &'a DVector<f64>,
    lam: &'a DVector<f64>,
    m: usize,
}

impl<'a> Newton<'a> {
    fn new(
        h0: &DMatrix<f64>,
        jac: &'a DMatrix<f64>,
        s: &'a DVector<f64>,
        lam: &'a DVector<f64>,
        regs: &mut usize,
    ) -> Result<Self, SolveError> {
        let m = h0.nrows();
        let (active, inactive): (Vec<usize>, Vec<usize>) = (0..s.len()).partition(|&j| s[j] < lam[j]);
        let na = active.len();
        let mut k = DMatrix::zeros(m + na, m + na);
        let mut h = h0.clone();
        for &j in &inactive {
            let row = jac.row(j);
            h.ger(lam[j] / s[j], &row.transpose(), &row.transpose(), 1.0);
        }
        k.view_mut((0, 0), (m, m)).copy_from(&h);
        for (a, &j) in active.iter().enumerate() {
            for c in 0..m {
                k[(m + a, c)] = jac[(j, c)];
                k[(c, m + a)] = jac[(j, c)];
            }
            k[(m + a, m + a)] = -s[j] / lam[j];
        }
        let scale = 1.0 + h.diagonal().amax();
        let mut delta = PROXIMAL * scale;
        for _ in 0..6 {
            let lu = k.clone().lu();
            if lu.is_invertible() && lu.u().diagonal().iter().all(|v| v.is_finite()) {
                return Ok(Self { lu, k, active, inactive, jac, s, lam, m });
            }
            *regs += 1;
            delta *= 100.0;
            for i in 0..m {
                k[(i, i)] += delta;
            }
        }
        Err(SolveError::IllConditioned)
    }

    /// `(dy, ds, dlam)` for complementarity residual `rc`.
    fn step(&self, rd: &DVector<f64>, rp: &DVector<f64>, rc: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let (m, na) = (self.m, self.active.len());
        let mut rhs = DVector::zeros(m + na);
        let mut top = -rd;
        for &j in &self.inactive {
            let t = rp[j] * self.lam[j] / self.s[j] - rc[j] / self.s[j];
            top.axpy(-t, &self.jac.row(j).transpose(), 1.0);
        }
        rhs.rows_mut(0, m).copy_from(&top);
        for (a, &j) in self.active.iter().enumerate() {
            rhs[m + a] = -rp[j] + rc[j] / self.lam[j];
        }
        let nan = || DVector::from_element(m + na, f64::NAN);
        let mut x = self.lu.solve(&rhs).unwrap_or_else(nan);
        let res = &rhs - &self.k * &x;
        x += self.lu.solve(&res).unwrap_or_else(nan);
        let dy = x.rows(0, m).into_owned();
        let jdy = self.jac * &dy;
        let ds = -rp - &jdy;
        let mut dlam = DVector::zeros(self.s.len());
        for (a, &j) in self.active.iter().enumerate() {
            dlam[j] = x[m + a];
        }
        for &j in &self.inactive {
            dlam[j] = (jdy[j] + rp[j]) * self.lam[j] / self.s[j] - rc[j] / self.s[j];
        }
        (dy, ds, dlam)
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Runs the predictor-corrector iteration from `y0`. `full_obj` gives the
/// unscaled objective at `y` (used in the relative gap test) and `sigma` is
/// the objective scale applied to `pr`.
fn interior_point(
    pr: &Problem,
    y0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    full_obj: &dyn Fn(&DVector<f64>) -> f64,
    sigma: f64,
    keep_slack: bool,
) -> Result<Outcome, SolveError> {
    let nc = pr.cons.len();
    let mut regs = 0;
    let mut y = y0.clone();
    if pr.m == 0 {
        return Ok(Outcome {
            y,
            end: End::Converged,
            iterations: 0,
            regularizations: 0,
            dual: 0.0,
            gap: 0.0,
            complementarity: 0.0,
        });
    }
    let g0 = DVector::from_iterator(nc, pr.cons.iter().map(|c| c.value(&y)));
    // a strictly feasible start keeps its slacks so the iteration starts
    // primal feasible
    let interior = keep_slack && g0.iter().all(|&g| g < 0.0);
    let mut s = if interior { -&g0 } else { g0.map(|g| (-g).max(1.0)) };
    let mut lam = DVector::from_element(nc, 1.0);
    let mut pt = evaluate(pr, &y, &s, &lam);
    let mut iterations = 0;
    let mut end = End::MaxIter;
    loop {
        let grad_f = &pr.p * &y + &pr.q;
        let gap = s.dot(&lam);
        let dual_ok = pt.rd.amax() <= tol * (1.0 + grad_f.amax());
        let primal_ok = nc == 0 || pt.rp.amax() <= tol;
        let gap_ok = gap / sigma <= tol * (1.0 + full_obj(&y).abs());
        if dual_ok && primal_ok && gap_ok {
            end = End::Converged;
            break;
        }
        if y.amax() > UNBOUNDED {
            end = End::Unbounded;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut h0 = pr.p.clone();
        for (c, &l) in pr.cons.iter().zip(lam.iter()) {
            if let Some(q) = &c.q {
                h0 += q * (2.0 * l);
            }
        }
        // proximal term: keeps steps bounded along flat directions
        for i in 0..pr.m {
            h0[(i, i)] += PROXIMAL;
        }
        let newton_sys = Newton::new(&h0, &pt.jac, &s, &lam, &mut regs)?;
        let newton = |rc: &DVector<f64>| newton_sys.step(&pt.rd, &pt.rp, rc);

        let (dy, ds, dlam) = if nc == 0 {
            newton(&DVector::zeros(0))
        } else {
            let mu = gap / nc as f64;
            let rc_aff = s.component_mul(&lam);
            let (_, ds_a, dl_a) = newton(&rc_aff);
            let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a)).min(1.0);
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / nc as f64;
            let centering = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let rc = rc_aff + ds_a.component_mul(&dl_a) - DVector::from_element(nc, centering * mu);
            newton(&rc)
        };
        if dy.iter().chain(ds.iter()).chain(dlam.iter()).any(|v| !v.is_finite()) {
            return Err(SolveError::IllConditioned);
        }
        let mut alpha = (STEP_FRACTION * max_step(&s, &ds).min(max_step(&lam, &dlam))).min(1.0);
        let mut next = None;
        let halvings = if interior { 4 * MAX_HALVINGS } else { MAX_HALVINGS };
        for _ in 0..=halvings {
            let yn = &y + &dy * alpha;
            let ln = &lam + &dlam * alpha;
            let sn = if interior {
                // keep the iterate strictly feasible with exact slacks
                let gn = DVector::from_iterator(nc, pr.cons.iter().map(|c| c.value(&yn)));
                if gn.iter().any(|&g| !(g < 0.0)) {
                    alpha *= 0.5;
                    continue;
                }
                -gn
            } else {
                &s + &ds * alpha
            };
            let pn = evaluate(pr, &yn, &sn, &ln);
            let ok = pn.merit <= MERIT_GROWTH * pt.merit;
            next = Some((yn, sn, ln, pn));
            if ok {
                break;
            }
            alpha *= 0.5;
        }
        let Some((yn, sn, ln, pn)) = next else {
            break;
        };
        y = yn;
        s = sn;
        lam = ln;
        pt = pn;
    }
    let complementarity = s.iter().zip(lam.iter()).map(|(a, b)| (a * b).abs()).fold(0.0, f64::max);
    Ok(Outcome {
        dual: pt.rd.amax(),
        gap: s.dot(&lam),
        y,
        end,
        iterations,
        regularizations: regs,
        complementarity,
    })
}

struct PhaseOne {
    value: Option<f64>,
    /// Phase-one iterate without the auxiliary variable.
    y: DVector<f64>,
    iterations: usize,
    regularizations: usize,
}

/// `min t  s.t.  g_j(y) <= t,  t >= -1`, started from `y0`. `value` is the
/// optimal `t` when the iteration converged.
fn phase_one(pr: &Problem, y0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<PhaseOne, SolveError> {
    let m = pr.m;
    let mut cons = Vec::with_capacity(pr.cons.len() + 1);
    for c in &pr.cons {
        let mut l = DVector::zeros(m + 1);
        l.rows_mut(0, m).copy_from(&c.l);
        l[m] = -1.0;
        let q = c.q.as_ref().map(|q| {
            let mut big = DMatrix::zeros(m + 1, m + 1);
            big.view_mut((0, 0), (m, m)).copy_from(q);
            big
        });
        cons.push(Constraint { q, l, c: c.c });
    }
    let mut lt = DVector::zeros(m + 1);
    lt[m] = -1.0;
    cons.push(Constraint { q: None, l: lt, c: -1.0 });
    let mut q = DVector::zeros(m + 1);
    q[m] = 1.0;
    let aux = Problem {
        m: m + 1,
        p: DMatrix::zeros(m + 1, m + 1),
        q,
        cons,
    };
    let worst = pr.cons.iter().map(|c| c.value(y0)).fold(f64::NEG_INFINITY, f64::max);
    let mut start = DVector::zeros(m + 1);
    start.rows_mut(0, m).copy_from(y0);
    start[m] = worst.max(-1.0) + 1.0;
    let objective = |v: &DVector<f64>| v[m];
    let out = interior_point(&aux, &start, tol, max_iter, &objective, 1.0, false)?;
    Ok(PhaseOne {
        value: (out.end == End::Converged).then(|| out.y[m]),
        y: out.y.rows(0, m).into_owned(),
        iterations: out.iterations,
        regularizations: out.regularizations,
    })
}
