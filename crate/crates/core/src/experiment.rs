//! Experiment runner: presets, trajectory metrics, CSV files and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleetsim::{run, AgentStats, ConfigError, RunError, RunOutput, ScenarioConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no overlapping samples")]
    Empty,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Metrics

/// RMSE of the translational error; no alignment is applied.
pub fn ate(estimate: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64, ExperimentError> {
    if estimate.len() != truth.len() {
        return Err(ExperimentError::LengthMismatch(estimate.len(), truth.len()));
    }
    if estimate.is_empty() {
        return Err(ExperimentError::Empty);
    }
    let sum: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t).norm_squared()).sum();
    Ok((sum / estimate.len() as f64).sqrt())
}

/// RMSE over steps of `‖(p̂_A − p̂_B) − (p_A − p_B)‖`.
pub fn relative_error(
    est_a: &[Vector3<f64>],
    est_b: &[Vector3<f64>],
    truth_a: &[Vector3<f64>],
    truth_b: &[Vector3<f64>],
) -> Result<f64, ExperimentError> {
    let n = est_a.len();
    for len in [est_b.len(), truth_a.len(), truth_b.len()] {
        if len != n {
            return Err(ExperimentError::LengthMismatch(n, len));
        }
    }
    let est: Vec<Vector3<f64>> = est_a.iter().zip(est_b).map(|(a, b)| a - b).collect();
    let truth: Vec<Vector3<f64>> = truth_a.iter().zip(truth_b).map(|(a, b)| a - b).collect();
    ate(&est, &truth)
}

/// One line of a trajectory file. Estimates are NaN where the computing
/// agent holds no pose for that robot and step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u32,
    pub robot: u8,
    pub est_x: f64,
    pub est_y: f64,
    pub est_z: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub true_z: f64,
    pub computing_agent: u8,
}

impl TrajectoryRow {
    pub fn estimate(&self) -> Option<Vector3<f64>> {
        let v = Vector3::new(self.est_x, self.est_y, self.est_z);
        v.iter().all(|x| x.is_finite()).then_some(v)
    }

    pub fn truth(&self) -> Vector3<f64> {
        Vector3::new(self.true_x, self.true_y, self.true_z)
    }
}

/// Rows of one computing agent's file, ordered by step then robot.
pub fn trajectory_rows(out: &RunOutput, agent: usize) -> Vec<TrajectoryRow> {
    let mut rows = Vec::new();
    for step in 0..out.truth.steps() {
        for robot in 0..out.truth.robots() {
            let t = out.truth.pose(robot, step as u32).translation();
            let e = out.estimates[agent][robot][step].unwrap_or(Vector3::repeat(f64::NAN));
            rows.push(TrajectoryRow {
                step: step as u32,
                robot: robot as u8,
                est_x: e.x,
                est_y: e.y,
                est_z: e.z,
                true_x: t.x,
                true_y: t.y,
                true_z: t.z,
                computing_agent: agent as u8,
            });
        }
    }
    rows
}

/// Per-agent solver and channel counters, as written to `stats.csv`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub agent: u8,
    pub solves: u64,
    pub iterations: u64,
    pub divergences: u64,
    pub deliveries: u64,
    pub outliers: u64,
    pub bearing_factors: u64,
    pub skipped: u64,
}

impl StatsRow {
    pub fn new(agent: u8, s: &AgentStats) -> Self {
        Self {
            agent,
            solves: s.solves,
            iterations: s.iterations,
            divergences: s.divergences.len() as u64,
            deliveries: s.deliveries,
            outliers: s.outliers,
            bearing_factors: s.bearing_factors,
            skipped: s.skipped,
        }
    }
}

/// Metrics of one computing agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent: u8,
    /// Own trajectory RMSE, metres.
    pub ate: f64,
    /// Own position error at the last step, metres.
    pub final_error: f64,
    /// RMSE over every estimated pose of every robot, metres.
    pub fleet_ate: f64,
    /// Mean over the other robots of the relative error against the agent
    /// itself, metres; zero when nothing was heard.
    pub relative_error: f64,
    pub deliveries: u64,
    pub outliers: u64,
    pub iterations: u64,
    pub divergences: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub agents: Vec<AgentMetrics>,
}

impl MetricsReport {
    fn mean(&self, f: impl Fn(&AgentMetrics) -> f64) -> f64 {
        self.agents.iter().map(f).sum::<f64>() / self.agents.len().max(1) as f64
    }

    pub fn mean_ate(&self) -> f64 {
        self.mean(|a| a.ate)
    }

    pub fn mean_fleet_ate(&self) -> f64 {
        self.mean(|a| a.fleet_ate)
    }

    pub fn mean_final_error(&self) -> f64 {
        self.mean(|a| a.final_error)
    }

    pub fn mean_relative_error(&self) -> f64 {
        self.mean(|a| a.relative_error)
    }

    pub fn divergences(&self) -> u64 {
        self.agents.iter().map(|a| a.divergences).sum()
    }
}

/// Own position error of `agent` at `step`, if estimated.
pub fn error_at(rows: &[TrajectoryRow], agent: u8, step: u32) -> Option<f64> {
    rows.iter().find(|r| r.robot == agent && r.step == step).and_then(|r| Some((r.estimate()? - r.truth()).norm()))
}

/// Metrics of one computing agent from its trajectory rows.
pub fn agent_metrics(rows: &[TrajectoryRow], stats: &StatsRow) -> Result<AgentMetrics, ExperimentError> {
    let agent = stats.agent;
    let robots = rows.iter().map(|r| r.robot as usize + 1).max().unwrap_or(0);
    let steps = rows.iter().map(|r| r.step as usize + 1).max().unwrap_or(0);
    let mut grid: Vec<Vec<Option<&TrajectoryRow>>> = vec![vec![None; steps]; robots];
    for r in rows {
        if r.computing_agent != agent {
            return Err(ExperimentError::Format(format!("row for agent {} in agent {agent}'s file", r.computing_agent)));
        }
        grid[r.robot as usize][r.step as usize] = Some(r);
    }
    let own = grid.get(agent as usize).ok_or(ExperimentError::Empty)?;
    let own_pairs: Vec<(Vector3<f64>, Vector3<f64>)> =
        own.iter().flatten().filter_map(|r| Some((r.estimate()?, r.truth()))).collect();
    let (est, truth): (Vec<_>, Vec<_>) = own_pairs.iter().copied().unzip();
    let final_row = own.iter().rev().flatten().next().ok_or(ExperimentError::Empty)?;
    let final_error = (final_row.estimate().ok_or(ExperimentError::Empty)? - final_row.truth()).norm();
    let all: Vec<(Vector3<f64>, Vector3<f64>)> = rows.iter().filter_map(|r| Some((r.estimate()?, r.truth()))).collect();
    let (all_est, all_truth): (Vec<_>, Vec<_>) = all.into_iter().unzip();
    let mut rel = Vec::new();
    for (robot, track) in grid.iter().enumerate() {
        if robot == agent as usize {
            continue;
        }
        let mut cols: [Vec<Vector3<f64>>; 4] = Default::default();
        for (mine, theirs) in own.iter().zip(track) {
            if let (Some(m), Some(t)) = (mine, theirs) {
                if let (Some(em), Some(et)) = (m.estimate(), t.estimate()) {
                    for (c, v) in cols.iter_mut().zip([em, et, m.truth(), t.truth()]) {
                        c.push(v);
                    }
                }
            }
        }
        if !cols[0].is_empty() {
            rel.push(relative_error(&cols[0], &cols[1], &cols[2], &cols[3])?);
        }
    }
    Ok(AgentMetrics {
        agent,
        ate: ate(&est, &truth)?,
        final_error,
        fleet_ate: ate(&all_est, &all_truth)?,
        relative_error: if rel.is_empty() { 0.0 } else { rel.iter().sum::<f64>() / rel.len() as f64 },
        deliveries: stats.deliveries,
        outliers: stats.outliers,
        iterations: stats.iterations,
        divergences: stats.divergences,
    })
}

pub fn report(out: &RunOutput) -> Result<MetricsReport, ExperimentError> {
    let agents = (0..out.truth.robots())
        .map(|c| agent_metrics(&trajectory_rows(out, c), &StatsRow::new(c as u8, &out.stats[c])))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport { agents })
}

// ---------------------------------------------------------------------------
// Presets

/// The three reproduction conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// No inter-agent factors.
    DeadReckoning,
    /// Bearing factors, 10° noise, no outliers.
    Bearing,
    /// Bearing factors with 5% outliers offset by 40°–120°.
    BearingOutliers,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::DeadReckoning, Preset::Bearing, Preset::BearingOutliers];

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "a" | "dead-reckoning" => Some(Self::DeadReckoning),
            "b" | "bearing" => Some(Self::Bearing),
            "c" | "bearing-outliers" => Some(Self::BearingOutliers),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::DeadReckoning => "dead-reckoning",
            Self::Bearing => "bearing",
            Self::BearingOutliers => "bearing-outliers",
        }
    }

    pub fn config(self) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.channel.bearing_sigma_deg = 10.0;
        cfg.channel.outlier_min_deg = 40.0;
        cfg.channel.outlier_max_deg = 120.0;
        match self {
            Self::DeadReckoning => cfg.bearing_factors = false,
            Self::Bearing => cfg.channel.outlier_probability = 0.0,
            Self::BearingOutliers => cfg.channel.outlier_probability = 0.05,
        }
        cfg
    }
}

// ---------------------------------------------------------------------------
// Files

pub const STATS_FILE: &str = "stats.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const PLOT_FILE: &str = "trajectories.svg";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn trajectory_file(agent: usize) -> String {
    format!("trajectory_agent{agent}.csv")
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

/// Writes trajectories, counters, metrics, the scenario and a plot to `dir`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<MetricsReport, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for c in 0..out.truth.robots() {
        write_csv(&dir.join(trajectory_file(c)), &trajectory_rows(out, c))?;
    }
    let stats: Vec<StatsRow> = out.stats.iter().enumerate().map(|(c, s)| StatsRow::new(c as u8, s)).collect();
    write_csv(&dir.join(STATS_FILE), &stats)?;
    let metrics = report(out)?;
    write_csv(&dir.join(METRICS_FILE), &metrics.agents)?;
    let cfg = dir.join(CONFIG_FILE);
    fs::write(&cfg, out.config.to_toml()).map_err(io_err(&cfg))?;
    let plot = dir.join(PLOT_FILE);
    fs::write(&plot, plot_svg(&trajectory_rows(out, 0))).map_err(io_err(&plot))?;
    Ok(metrics)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>, ExperimentError> {
    read_csv(path)
}

/// Recomputes the report of one run directory from its CSV files.
pub fn metrics_from_dir(dir: &Path) -> Result<MetricsReport, ExperimentError> {
    let stats: Vec<StatsRow> = read_csv(&dir.join(STATS_FILE))?;
    let agents = stats
        .iter()
        .map(|s| agent_metrics(&read_trajectory(&dir.join(trajectory_file(s.agent as usize)))?, s))
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport { agents })
}

/// Directories holding a single run: `dir` itself or its `seed_*` children.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    if dir.join(STATS_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(STATS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_ate: f64,
    pub mean_fleet_ate: f64,
    pub mean_final_error: f64,
    pub mean_relative_error: f64,
    pub divergences: u64,
}

impl SeedSummary {
    pub fn new(seed: u64, m: &MetricsReport) -> Self {
        Self {
            seed,
            mean_ate: m.mean_ate(),
            mean_fleet_ate: m.mean_fleet_ate(),
            mean_final_error: m.mean_final_error(),
            mean_relative_error: m.mean_relative_error(),
            divergences: m.divergences(),
        }
    }
}

pub struct SeedRun {
    pub seed: u64,
    pub output: RunOutput,
    pub metrics: MetricsReport,
}

/// Runs `cfg` under each seed in parallel. With `out`, each seed writes to
/// `out/seed_<n>` and a merged `summary.csv` is written last.
pub fn run_seeds(cfg: &ScenarioConfig, seeds: &[u64], out: Option<&Path>) -> Result<Vec<SeedRun>, ExperimentError> {
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ScenarioConfig { seed, ..cfg.clone() };
            let output = run(&cfg)?;
            let metrics = match out {
                Some(dir) => write_run(&output, &dir.join(format!("seed_{seed}")))?,
                None => report(&output)?,
            };
            Ok(SeedRun { seed, output, metrics })
        })
        .collect::<Result<_, ExperimentError>>()?;
    if let Some(dir) = out {
        let summary: Vec<SeedSummary> = runs.iter().map(|r| SeedSummary::new(r.seed, &r.metrics)).collect();
        write_csv(&dir.join(SUMMARY_FILE), &summary)?;
    }
    Ok(runs)
}

/// Scenario from an optional preset, an optional TOML file and overrides,
/// applied in that order.
pub fn build_config(preset: Option<Preset>, file: Option<&str>, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let base = match (file, preset) {
        (Some(text), _) => text.to_string(),
        (None, Some(p)) => p.config().to_toml(),
        (None, None) => String::new(),
    };
    let mut sets = Vec::new();
    if let (Some(_), Some(p)) = (file, preset) {
        let c = p.config();
        sets.push(format!("bearing_factors={}", c.bearing_factors));
        sets.push(format!("channel.outlier_probability={:?}", c.channel.outlier_probability));
    }
    sets.extend_from_slice(overrides);
    ScenarioConfig::from_toml_with_overrides(&base, &sets)
}

// ---------------------------------------------------------------------------
// Plot

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Top-down view: true paths solid, estimates dashed, one colour per robot.
pub fn plot_svg(rows: &[TrajectoryRow]) -> String {
    let (w, h, pad) = (800.0, 800.0, 40.0);
    let pts = rows.iter().flat_map(|r| [Some(r.truth()), r.estimate()]).flatten();
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in pts {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    if !lo.x.is_finite() {
        lo = Vector3::zeros();
        hi = Vector3::repeat(1.0);
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-9);
    let scale = (w - 2.0 * pad) / span;
    let map = |p: Vector3<f64>| (pad + (p.x - lo.x) * scale, h - pad - (p.y - lo.y) * scale);
    let robots = rows.iter().map(|r| r.robot as usize + 1).max().unwrap_or(0);
    let agent = rows.first().map_or(0, |r| r.computing_agent);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="16">agent {agent}: truth (solid) and estimate (dashed), {span:.1} m across</text>"#
    );
    for robot in 0..robots {
        let colour = PALETTE[robot % PALETTE.len()];
        let mine: Vec<&TrajectoryRow> = rows.iter().filter(|r| r.robot as usize == robot).collect();
        let path = |points: Vec<Vector3<f64>>| {
            points
                .iter()
                .map(|p| {
                    let (x, y) = map(*p);
                    format!("{x:.2},{y:.2}")
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let truth = path(mine.iter().map(|r| r.truth()).collect());
        let est = path(mine.iter().filter_map(|r| r.estimate()).collect());
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{truth}"/>"#);
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" stroke-dasharray="4 3" points="{est}"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" fill="{colour}">robot {robot}</text>"#,
            w - pad - 80.0,
            pad + 20.0 * (robot + 1) as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
