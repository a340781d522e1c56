//! Plain-text program dump.
//!
//! ```text
//! convex-program 1
//! n <n>
//! c <c>
//! q <n values>
//! P <i> <j> <value>              one line per nonzero
//! eq <b> <n values>
//! lin <b> <n values>
//! quad <r> <k> <k support indices> <n values of l> <k*k values of Q, row-major>
//! end
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so parsing a dump
//! reproduces the program bit for bit.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{ConvexProgram, LinearRow, QuadConstraint};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
}

pub(super) fn write_text(p: &ConvexProgram) -> String {
    let mut s = String::new();
    let join = |v: &DVector<f64>| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "convex-program 1");
    let _ = writeln!(s, "n {}", p.n);
    let _ = writeln!(s, "c {:?}", p.objective.c);
    let _ = writeln!(s, "q {}", join(&p.objective.q));
    for i in 0..p.n {
        for j in 0..p.n {
            let v = p.objective.p[(i, j)];
            if v != 0.0 {
                let _ = writeln!(s, "P {i} {j} {v:?}");
            }
        }
    }
    for r in &p.eq {
        let _ = writeln!(s, "eq {:?} {}", r.b, join(&r.a));
    }
    for r in &p.lin_ineq {
        let _ = writeln!(s, "lin {:?} {}", r.b, join(&r.a));
    }
    for c in &p.quad_ineq {
        let support = c.support.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        let q = c.q.transpose().iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "quad {:?} {} {} {} {}", c.r, c.support.len(), support, join(&c.l), q);
    }
    s.push_str("end\n");
    s
}

/// Parses the output of [`ConvexProgram::to_text`].
pub fn parse_text(text: &str) -> Result<ConvexProgram, ParseError> {
    let mut prog: Option<ConvexProgram> = None;
    let mut saw_header = false;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let err = |msg: &str| ParseError::Syntax {
            line,
            msg: msg.to_string(),
        };
        let mut tok = raw.split_whitespace();
        let Some(head) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let nums = |xs: &[&str]| -> Result<Vec<f64>, ParseError> {
            xs.iter().map(|t| t.parse::<f64>().map_err(|_| err("bad number"))).collect()
        };
        match head {
            "convex-program" => {
                if rest != ["1"] {
                    return Err(err("unsupported format version"));
                }
                saw_header = true;
            }
            "n" => {
                let n = rest.first().and_then(|t| t.parse().ok()).ok_or_else(|| err("bad n"))?;
                prog = Some(ConvexProgram::new(n));
            }
            "end" => break,
            _ => {
                let p = prog.as_mut().ok_or_else(|| err("n must come first"))?;
                let n = p.n;
                match head {
                    "c" => p.objective.c = *nums(&rest)?.first().ok_or_else(|| err("missing c"))?,
                    "q" => {
                        let v = nums(&rest)?;
                        if v.len() != n {
                            return Err(err("q has wrong length"));
                        }
                        p.objective.q = DVector::from_vec(v);
                    }
                    "P" => {
                        if rest.len() != 3 {
                            return Err(err("P needs i j value"));
                        }
                        let i: usize = rest[0].parse().map_err(|_| err("bad index"))?;
                        let j: usize = rest[1].parse().map_err(|_| err("bad index"))?;
                        if i >= n || j >= n {
                            return Err(err("index out of range"));
                        }
                        p.objective.p[(i, j)] = nums(&rest[2..])?[0];
                    }
                    "eq" | "lin" => {
                        let v = nums(&rest)?;
                        if v.len() != n + 1 {
                            return Err(err("row has wrong length"));
                        }
                        let row = LinearRow {
                            a: DVector::from_column_slice(&v[1..]),
                            b: v[0],
                        };
                        if head == "eq" {
                            p.eq.push(row);
                        } else {
                            p.lin_ineq.push(row);
                        }
                    }
                    "quad" => {
                        if rest.len() < 2 {
                            return Err(err("quad needs r and k"));
                        }
                        let r = nums(&rest[..1])?[0];
                        let ks: usize = rest[1].parse().map_err(|_| err("bad support size"))?;
                        if rest.len() != 2 + ks + n + ks * ks {
                            return Err(err("quad has wrong length"));
                        }
                        let support: Vec<usize> = rest[2..2 + ks]
                            .iter()
                            .map(|t| t.parse().map_err(|_| err("bad index")))
                            .collect::<Result<_, _>>()?;
                        if support.iter().any(|&i| i >= n) {
                            return Err(err("index out of range"));
                        }
                        let l = nums(&rest[2 + ks..2 + ks + n])?;
                        let q = nums(&rest[2 + ks + n..])?;
                        p.quad_ineq.push(QuadConstraint {
                            support,
                            q: DMatrix::from_row_slice(ks, ks, &q),
                            l: DVector::from_vec(l),
                            r,
                        });
                    }
                    _ => return Err(err("unknown record")),
                }
            }
        }
    }
    if !saw_header {
        return Err(ParseError::Syntax {
            line: 1,
            msg: "missing header".into(),
        });
    }
    prog.ok_or(ParseError::Syntax {
        line: 1,
        msg: "missing n".into(),
    })
}
