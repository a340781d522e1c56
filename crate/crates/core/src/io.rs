//! File formats shared with the command line tool. Every format carries a
//! version; this module writes and reads version 1.
//!
//! - Scenario: a JSON document, see [`ScenarioFile`].
//! - Trajectory, clearance and batch tables: CSV with a `#` header line
//!   holding `format=1` and, for trajectories, `model`, `t0` and `h`.
//! - Run metrics: a JSON object, see [`MetricsFile`].

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleModel;
use crate::geometry::Vec2;
use crate::scenario::{Obstacle, ObstacleMotion, Scenario};
use crate::sim::{Aggregate, BatchReport, ClearancePoint, RunMetrics};
use crate::trajectory::Trajectory;

pub const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

fn bad(msg: impl Into<String>) -> IoError {
    IoError::Format(msg.into())
}

fn check_version(found: u32) -> Result<(), IoError> {
    if found != FORMAT {
        return Err(bad(format!("unsupported format {found}, expected {FORMAT}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleFile {
    pub id: usize,
    /// Center at `t = 0`, meters.
    pub center: [f64; 2],
    pub radius: f64,
    pub motion: ObstacleMotion,
}

/// On-disk scenario. Matrices are lists of rows; positions in meters, times
/// in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub format: u32,
    pub model: VehicleModel,
    pub obstacles: Vec<ObstacleFile>,
    pub z0: Vec<f64>,
    pub zf: Vec<f64>,
    pub gamma: f64,
    pub q0: Vec<Vec<f64>>,
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub v_max: f64,
    pub a_max: f64,
    pub omega_max: f64,
    pub clearance_ell: f64,
    pub h: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub bounds: [f64; 4],
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, IoError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(bad(format!("{name} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        Self {
            format: FORMAT,
            model: s.model,
            obstacles: s
                .obstacles
                .iter()
                .map(|o| ObstacleFile {
                    id: o.id,
                    center: [o.center0.x, o.center0.y],
                    radius: o.radius,
                    motion: o.motion,
                })
                .collect(),
            z0: s.z0.iter().copied().collect(),
            zf: s.zf.iter().copied().collect(),
            gamma: s.gamma,
            q0: rows(&s.q0),
            q1: rows(&s.q1),
            q2: rows(&s.q2),
            v_max: s.v_max,
            a_max: s.a_max,
            omega_max: s.omega_max,
            clearance_ell: s.clearance_ell,
            h: s.h,
            n_min: s.n_min,
            n_max: s.n_max,
            bounds: s.bounds,
        }
    }
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario, IoError> {
        check_version(self.format)?;
        let (n, m) = (self.model.state_dim(), self.model.control_dim());
        if self.z0.len() != n || self.zf.len() != n {
            return Err(bad(format!("z0 and zf must have {n} components")));
        }
        Ok(Scenario {
            model: self.model,
            obstacles: self
                .obstacles
                .into_iter()
                .map(|o| Obstacle::new(o.id, Vec2::new(o.center[0], o.center[1]), o.radius, o.motion))
                .collect(),
            z0: DVector::from_vec(self.z0),
            zf: DVector::from_vec(self.zf),
            gamma: self.gamma,
            q0: matrix("q0", &self.q0, n)?,
            q1: matrix("q1", &self.q1, n)?,
            q2: matrix("q2", &self.q2, m)?,
            v_max: self.v_max,
            a_max: self.a_max,
            omega_max: self.omega_max,
            clearance_ell: self.clearance_ell,
            h: self.h,
            n_min: self.n_min,
            n_max: self.n_max,
            bounds: self.bounds,
        })
    }
}

pub fn scenario_to_json(s: &Scenario) -> String {
    serde_json::to_string_pretty(&ScenarioFile::from(s)).expect("scenario serializes")
}

pub fn scenario_from_json(text: &str) -> Result<Scenario, IoError> {
    serde_json::from_str::<ScenarioFile>(text)?.into_scenario()
}

pub fn write_scenario(path: &Path, s: &Scenario) -> Result<(), IoError> {
    Ok(fs::write(path, scenario_to_json(s) + "\n")?)
}

pub fn read_scenario(path: &Path) -> Result<Scenario, IoError> {
    scenario_from_json(&fs::read_to_string(path)?)
}

/// Column names of the state and control for `model`.
pub fn column_names(model: VehicleModel) -> (&'static [&'static str], &'static [&'static str]) {
    match model {
        VehicleModel::DoubleIntegrator => (&["x", "y", "vx", "vy"], &["ax", "ay"]),
        VehicleModel::Unicycle => (&["x", "y", "theta", "v"], &["a", "omega"]),
    }
}

fn header_line(fields: &[(&str, String)]) -> String {
    let mut s = format!("# format={FORMAT}");
    for (k, v) in fields {
        s.push_str(&format!(" {k}={v}"));
    }
    s + "\n"
}

/// Splits off the `#` header and returns its `key=value` pairs and the rest.
fn split_header(text: &str) -> Result<(Vec<(String, String)>, &str), IoError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let Some(h) = first.strip_prefix('#') else {
        return Err(bad("missing `# format=` header line"));
    };
    let pairs: Vec<(String, String)> = h
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let version = lookup(&pairs, "format")?.parse::<u32>().map_err(|_| bad("bad format version"))?;
    check_version(version)?;
    Ok((pairs, rest))
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str, IoError> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| bad(format!("header lacks `{key}`")))
}

fn parse_f64(s: &str, what: &str) -> Result<f64, IoError> {
    s.trim().parse().map_err(|_| bad(format!("bad number `{s}` in {what}")))
}

/// Columns `k, t`, the state, then the control (empty on the last knot).
pub fn trajectory_csv(traj: &Trajectory, model: VehicleModel) -> String {
    let (sn, cn) = column_names(model);
    let mut w = csv::Writer::from_writer(Vec::new());
    let head: Vec<&str> = ["k", "t"].iter().chain(sn).chain(cn).copied().collect();
    w.write_record(&head).expect("in-memory write");
    for (k, z) in traj.states.iter().enumerate() {
        let mut rec = vec![k.to_string(), traj.knot_time(k).to_string()];
        rec.extend(z.iter().map(f64::to_string));
        match traj.controls.get(k) {
            Some(u) => rec.extend(u.iter().map(f64::to_string)),
            None => rec.extend(cn.iter().map(|_| String::new())),
        }
        w.write_record(&rec).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv");
    let model_name = serde_json::to_value(model).expect("model serializes");
    header_line(&[
        ("model", model_name.as_str().unwrap_or_default().to_string()),
        ("t0", traj.t0.to_string()),
        ("h", traj.h.to_string()),
    ]) + &body
}

pub fn parse_trajectory_csv(text: &str) -> Result<(VehicleModel, Trajectory), IoError> {
    let (pairs, body) = split_header(text)?;
    let model: VehicleModel = serde_json::from_value(serde_json::Value::String(lookup(&pairs, "model")?.to_string()))
        .map_err(|_| bad("unknown model in header"))?;
    let t0 = parse_f64(lookup(&pairs, "t0")?, "header")?;
    let h = parse_f64(lookup(&pairs, "h")?, "header")?;
    let (n, m) = (model.state_dim(), model.control_dim());
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut traj: Option<Trajectory> = None;
    let mut pending: Option<DVector<f64>> = None;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 + n + m {
            return Err(bad(format!("expected {} columns, found {}", 2 + n + m, rec.len())));
        }
        let z = (2..2 + n).map(|i| parse_f64(&rec[i], "state")).collect::<Result<Vec<_>, _>>()?;
        let z = DVector::from_vec(z);
        match (traj.as_mut(), pending.take()) {
            (None, _) => traj = Some(Trajectory::new(t0, h, z)),
            (Some(t), Some(u)) => t.push(u, z),
            (Some(_), None) => return Err(bad("control missing before the last knot")),
        }
        if !rec[2 + n].is_empty() {
            let u = (2 + n..2 + n + m).map(|i| parse_f64(&rec[i], "control")).collect::<Result<Vec<_>, _>>()?;
            pending = Some(DVector::from_vec(u));
        }
    }
    if pending.is_some() {
        return Err(bad("last knot carries a control"));
    }
    let traj = traj.ok_or_else(|| bad("no knots"))?;
    Ok((model, traj))
}

/// Columns `k, t, clearance`; the clearance is empty on an obstacle-free map.
pub fn clearance_csv(trace: &[ClearancePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "t", "clearance"]).expect("in-memory write");
    for (k, p) in trace.iter().enumerate() {
        let c = if p.clearance.is_finite() { p.clearance.to_string() } else { String::new() };
        w.write_record([k.to_string(), p.t.to_string(), c]).expect("in-memory write");
    }
    header_line(&[]) + &String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn parse_clearance_csv(text: &str) -> Result<Vec<ClearancePoint>, IoError> {
    let (_, body) = split_header(text)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t = parse_f64(&rec[1], "t")?;
        let clearance = if rec[2].is_empty() { f64::INFINITY } else { parse_f64(&rec[2], "clearance")? };
        out.push(ClearancePoint { t, clearance });
    }
    Ok(out)
}

/// One line of the batch table. Per-seed rows have `row = "run"` and are
/// aggregates of one run; the last line has `row = "aggregate"` and no seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCsvRow {
    pub row: String,
    pub seed: Option<u64>,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub t_f_mean: Option<f64>,
    pub cycles: usize,
    pub compute_time_avg: f64,
    pub compute_time_median: f64,
    pub compute_time_worst: f64,
    pub theorem4_rate: f64,
    /// Empty on obstacle-free maps.
    pub min_clearance: Option<f64>,
    /// Failure reason, or the generator error for a seed without a map.
    pub failure: Option<String>,
}

impl BatchCsvRow {
    fn new(row: &str, seed: Option<u64>, a: &Aggregate, failure: Option<String>) -> Self {
        Self {
            row: row.into(),
            seed,
            runs: a.runs,
            successes: a.successes,
            success_rate: a.success_rate,
            t_f_mean: a.t_f_mean,
            cycles: a.cycles,
            compute_time_avg: a.compute_time_avg,
            compute_time_median: a.compute_time_median,
            compute_time_worst: a.compute_time_worst,
            theorem4_rate: a.theorem4_rate,
            min_clearance: a.min_clearance.is_finite().then_some(a.min_clearance),
            failure,
        }
    }

    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            runs: self.runs,
            successes: self.successes,
            success_rate: self.success_rate,
            t_f_mean: self.t_f_mean,
            cycles: self.cycles,
            compute_time_avg: self.compute_time_avg,
            compute_time_median: self.compute_time_median,
            compute_time_worst: self.compute_time_worst,
            theorem4_rate: self.theorem4_rate,
            min_clearance: self.min_clearance.unwrap_or(f64::INFINITY),
        }
    }
}

fn reason_name(m: &RunMetrics) -> Option<String> {
    m.failure_reason.map(|r| serde_json::to_value(r).expect("reason serializes").as_str().unwrap_or_default().to_string())
}

pub fn batch_rows(report: &BatchReport) -> Vec<BatchCsvRow> {
    let mut out: Vec<BatchCsvRow> = report
        .rows
        .iter()
        .map(|r| match &r.metrics {
            Ok(m) => BatchCsvRow::new("run", Some(r.seed), &Aggregate::of([Some(m)]), reason_name(m)),
            Err(e) => BatchCsvRow::new("run", Some(r.seed), &Aggregate::of([None]), Some(format!("generation: {e}"))),
        })
        .collect();
    out.push(BatchCsvRow::new("aggregate", None, &report.aggregate, None));
    out
}

pub fn batch_csv(report: &BatchReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in batch_rows(report) {
        w.serialize(row).expect("in-memory write");
    }
    header_line(&[]) + &String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn parse_batch_csv(text: &str) -> Result<Vec<BatchCsvRow>, IoError> {
    let (_, body) = split_header(text)?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<BatchCsvRow>, _>>()?)
}

/// `metrics.json` of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format: u32,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub failure_detail: Option<String>,
}

impl MetricsFile {
    pub fn new(metrics: RunMetrics, failure_detail: Option<String>) -> Self {
        Self {
            format: FORMAT,
            metrics,
            failure_detail,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let f: Self = serde_json::from_str(text)?;
        check_version(f.format)?;
        Ok(f)
    }
}
