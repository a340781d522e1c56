//! `cycleplan`: generate maps, run the planner, benchmark seeds, export data.
//!
//! Exit codes: 0 success, 1 the run failed (the reason is in metrics.json),
//! 2 usage error or unusable input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cycleplan::io::{
    batch_csv, clearance_csv, parse_trajectory_csv, read_scenario, trajectory_csv, write_scenario, MetricsFile,
};
use cycleplan::scenario::{generate_scenario, validate_scenario, GenParams, ObstacleMotion};
use cycleplan::search::SearchBackend;
use cycleplan::sim::{batch, clearance_trace, simulate};
use cycleplan::{PlannerConfig, Scenario};

#[derive(Parser, Debug)]
#[command(name = "cycleplan", version, about = "Time-optimal trajectory generation with convex planning cycles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded obstacle map.
    Gen(GenArgs),
    /// Plan against the obstacles frozen at t = 0.
    Plan(RunArgs),
    /// Plan with obstacles moving in lockstep with the vehicle.
    Simulate(RunArgs),
    /// Simulate one generated map per seed and write the batch table.
    Bench(BenchArgs),
    /// Write plot-ready CSV from a run directory.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Generator seed.
    #[arg(long)]
    seed: u64,
    /// Number of obstacles.
    #[arg(long, default_value_t = 20)]
    obstacles: usize,
    /// Moving obstacles with the slower vehicle limits.
    #[arg(long)]
    dynamic: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Search {
    Cvapf,
    Cdwa,
}

impl From<Search> for SearchBackend {
    fn from(s: Search) -> Self {
        match s {
            Search::Cvapf => SearchBackend::Cvapf,
            Search::Cdwa => SearchBackend::Cdwa,
        }
    }
}

#[derive(Args, Debug)]
struct PlannerArgs {
    /// Trajectory search.
    #[arg(long, value_enum, default_value_t = Search::Cvapf)]
    search: Search,
    /// Planner configuration as JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximal number of planning cycles.
    #[arg(long)]
    cycle_limit: Option<usize>,
    /// Extra obstacle radius kept by the search and the convex regions, in meters.
    #[arg(long)]
    safety_margin: Option<f64>,
    /// Compute the next cycle while the current one executes.
    #[arg(long)]
    pipelined: bool,
    /// Fail a run whose cycle computes longer than the time it applies.
    #[arg(long)]
    deadline: bool,
}

impl PlannerArgs {
    fn config(&self) -> Result<PlannerConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => PlannerConfig::default(),
        };
        cfg.backend = self.search.into();
        if let Some(n) = self.cycle_limit {
            cfg.cycle_limit = n;
        }
        if let Some(m) = self.safety_margin {
            cfg.safety_margin = m;
        }
        cfg.pipelined |= self.pipelined;
        cfg.deadline |= self.deadline;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Run directory to create or overwrite.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    planner: PlannerArgs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("seed_source").required(true).args(["seeds", "count"]))]
struct BenchArgs {
    /// File of seeds separated by whitespace or commas.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Use seeds first-seed .. first-seed + count.
    #[arg(long)]
    count: Option<u64>,
    /// First seed for --count.
    #[arg(long, default_value_t = 1)]
    first_seed: u64,
    /// Obstacles per map.
    #[arg(long, default_value_t = 20)]
    obstacles: usize,
    /// Moving obstacles with the slower vehicle limits.
    #[arg(long)]
    dynamic: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    planner: PlannerArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum What {
    Clearance,
    Trajectory,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory written by plan or simulate.
    #[arg(long)]
    run: PathBuf,
    /// Series to export.
    #[arg(long, value_enum)]
    what: What,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_params(seed: u64, obstacles: usize, dynamic: bool) -> GenParams {
    let mut p = if dynamic {
        GenParams::table5(seed, obstacles)
    } else {
        GenParams::table1(seed)
    };
    p.n_obs = obstacles;
    p
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen(a: &GenArgs) -> Result<bool> {
    let s = match generate_scenario(&gen_params(a.seed, a.obstacles, a.dynamic)) {
        Ok(s) => s,
        Err(e) => bail!("{e}"),
    };
    emit(a.out.as_deref(), &(cycleplan::io::scenario_to_json(&s) + "\n"))?;
    Ok(true)
}

fn load_valid(path: &Path) -> Result<Scenario> {
    let s = match read_scenario(path) {
        Ok(s) => s,
        Err(e) => bail!("{}: {e}", path.display()),
    };
    let report = validate_scenario(&s);
    if !report.is_valid() {
        bail!("{}: invalid scenario\n{report}", path.display());
    }
    Ok(s)
}

fn cmd_run(a: &RunArgs, moving: bool) -> Result<bool> {
    let mut s = load_valid(&a.scenario)?;
    if !moving {
        for o in &mut s.obstacles {
            o.motion = ObstacleMotion::Static;
        }
    }
    let cfg = a.planner.config()?;
    if let Err(e) = cfg.validate(&s) {
        bail!("invalid planner configuration: {e}");
    }
    let sim = simulate(&s, &cfg);
    let dir = &a.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_scenario(&dir.join("scenario.json"), &s)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&sim.run.trajectory, s.model))?;
    fs::write(dir.join("cycles.log"), sim.run.cycle_log())?;
    let metrics = MetricsFile::new(sim.metrics.clone(), sim.run.failure_detail.clone());
    fs::write(dir.join("metrics.json"), metrics.to_json() + "\n")?;
    let m = &sim.metrics;
    if m.success {
        eprintln!("success: t_f = {} s, {} cycles, min clearance {}", m.t_f, m.cycles, m.min_clearance);
    } else {
        eprintln!(
            "failed: {:?} after {} cycles: {}",
            m.failure_reason,
            m.cycles,
            sim.run.failure_detail.as_deref().unwrap_or("")
        );
    }
    Ok(m.success)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u64>().with_context(|| format!("bad seed `{t}`")))
        .collect()
}

fn cmd_bench(a: &BenchArgs) -> Result<bool> {
    let seeds = match (&a.seeds, a.count) {
        (Some(p), _) => parse_seeds(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some(k)) => (a.first_seed..a.first_seed + k).collect(),
        (None, None) => unreachable!("clap requires one seed source"),
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        bail!("seeds must be distinct");
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let params = gen_params(0, a.obstacles, a.dynamic);
    let cfg = a.planner.config()?;
    let report = batch(&seeds, &params, &cfg);
    emit(a.out.as_deref(), &batch_csv(&report))?;
    let g = &report.aggregate;
    eprintln!(
        "{} runs, success rate {:.3}, compute avg {:.4} s, median {:.4} s, worst {:.4} s, theorem-4 rate {:.3}",
        g.runs, g.success_rate, g.compute_time_avg, g.compute_time_median, g.compute_time_worst, g.theorem4_rate
    );
    Ok(true)
}

fn cmd_export(a: &ExportArgs) -> Result<bool> {
    let traj_path = a.run.join("trajectory.csv");
    let text = match fs::read_to_string(&traj_path) {
        Ok(t) => t,
        Err(e) => bail!("{}: {e}", traj_path.display()),
    };
    let (model, traj) = match parse_trajectory_csv(&text) {
        Ok(v) => v,
        Err(e) => bail!("{}: {e}", traj_path.display()),
    };
    let out = match a.what {
        What::Trajectory => trajectory_csv(&traj, model),
        What::Clearance => {
            let path = a.run.join("scenario.json");
            let s = match read_scenario(&path) {
                Ok(s) => s,
                Err(e) => bail!("{}: {e}", path.display()),
            };
            clearance_csv(&clearance_trace(&traj, &s))
        }
    };
    emit(a.out.as_deref(), &out)?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Plan(a) => cmd_run(a, false),
        Command::Simulate(a) => cmd_run(a, true),
        Command::Bench(a) => cmd_bench(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seeds_split_on_commas_and_space() {
        assert_eq!(parse_seeds("1, 2\n3,4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_seeds("1 x").is_err());
    }
}
