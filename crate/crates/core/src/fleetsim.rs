//! Deterministic multi-AUV world: analytic ground truth, simulated sensors,
//! and the per-agent loop that maintains the single- and multi-agent graphs.
//!
//! Every robot's local frame shares the global orientation and depth datum and
//! is offset horizontally to its deployment point, so an anchor is a pure
//! horizontal translation and the local origin is the identity.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{self, decode, encode, AcousticMessage, ChannelConfig, Delivery, Frame};
use crate::factors::{BearingMeasurement, FactorRecord, NoiseModel};
use crate::liegroups::{LieGroup, Pose3, Rot3, Tangent6};
use crate::osm::{self, ChainSummary, CovarianceMode, UnaryPayload};
use crate::solver::{FactorGraph, LmParams, VariableKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown or malformed scenario key: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Scenario configuration

/// How a summary crosses the channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    /// Through the 31-byte frame codec.
    #[default]
    Frame,
    /// The summary itself, unquantised and with its full covariance.
    Lossless,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMode {
    #[default]
    Tuned,
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceSettings {
    pub mode: RecoveryMode,
    /// Per-step σ for tuned mode, radians.
    pub rotation_sigma: f64,
    /// Per-step σ for tuned mode, metres.
    pub translation_sigma: f64,
}

impl Default for CovarianceSettings {
    fn default() -> Self {
        Self { mode: RecoveryMode::Tuned, rotation_sigma: 0.005, translation_sigma: 0.02 }
    }
}

impl CovarianceSettings {
    pub fn mode(&self) -> CovarianceMode {
        match self.mode {
            RecoveryMode::Tuned => {
                CovarianceMode::Tuned { rotation_sigma: self.rotation_sigma, translation_sigma: self.translation_sigma }
            }
            RecoveryMode::FirstOrder => CovarianceMode::FirstOrder,
        }
    }
}

/// Standard deviations of the simulated sensors, or of the noise models the
/// agents assume for them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorNoise {
    /// Radians per step, each axis.
    pub odometry_rotation_sigma: f64,
    /// Metres per step, each axis.
    pub odometry_translation_sigma: f64,
    pub orientation_sigma: f64,
    pub depth_sigma: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { odometry_rotation_sigma: 0.002, odometry_translation_sigma: 0.02, orientation_sigma: 0.01, depth_sigma: 0.05 }
    }
}

impl SensorNoise {
    pub fn zero() -> Self {
        Self { odometry_rotation_sigma: 0.0, odometry_translation_sigma: 0.0, orientation_sigma: 0.0, depth_sigma: 0.0 }
    }

    fn sigmas(&self) -> [f64; 4] {
        [self.odometry_rotation_sigma, self.odometry_translation_sigma, self.orientation_sigma, self.depth_sigma]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSettings {
    pub dropout: f64,
    pub bearing_sigma_deg: f64,
    pub outlier_probability: f64,
    pub outlier_min_deg: f64,
    pub outlier_max_deg: f64,
}

impl Default for ChannelSettings {
    fn default() -> Self {
        Self { dropout: 0.5, bearing_sigma_deg: 10.0, outlier_probability: 0.0, outlier_min_deg: 40.0, outlier_max_deg: 120.0 }
    }
}

impl ChannelSettings {
    pub fn channel_config(&self, seed: u64) -> ChannelConfig {
        ChannelConfig {
            dropout: self.dropout,
            bearing_sigma: self.bearing_sigma_deg.to_radians(),
            outlier_probability: self.outlier_probability,
            outlier_min: self.outlier_min_deg.to_radians(),
            outlier_max: self.outlier_max_deg.to_radians(),
            seed,
        }
    }
}

/// Noise models the agents assume when building factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub sensors: SensorNoise,
    pub bearing_sigma_deg: f64,
    /// σ of the own start-pose prior, radians and metres.
    pub start_sigma: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { sensors: SensorNoise::default(), bearing_sigma_deg: 10.0, start_sigma: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSettings {
    /// σ of the computing agent's own anchor prior, every axis.
    pub own_sigma: f64,
    pub remote_translation_sigma: f64,
    pub remote_rotation_sigma_deg: f64,
    /// σ of the horizontal error in each agent's knowledge of the other
    /// robots' deployment points.
    pub guess_sigma: f64,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        Self { own_sigma: 1e-6, remote_translation_sigma: 10.0, remote_rotation_sigma_deg: 30.0, guess_sigma: 10.0 }
    }
}

/// Analytic path; `depth` is the z coordinate of the path's start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySpec {
    Circle {
        center: [f64; 2],
        radius: f64,
        /// Metres per second.
        speed: f64,
        #[serde(default)]
        phase_deg: f64,
        depth: f64,
        #[serde(default)]
        clockwise: bool,
    },
    Helix {
        center: [f64; 2],
        radius: f64,
        speed: f64,
        #[serde(default)]
        phase_deg: f64,
        depth: f64,
        /// Metres of descent per step.
        pitch: f64,
    },
    Lawnmower {
        origin: [f64; 2],
        #[serde(default)]
        heading_deg: f64,
        leg_length: f64,
        spacing: f64,
        speed: f64,
        depth: f64,
    },
}

impl TrajectorySpec {
    pub fn depth(&self) -> f64 {
        match self {
            Self::Circle { depth, .. } | Self::Helix { depth, .. } | Self::Lawnmower { depth, .. } => *depth,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match self {
            Self::Circle { radius, speed, .. } => *radius > 0.0 && *speed >= 0.0,
            Self::Helix { radius, speed, pitch, .. } => *radius > 0.0 && *speed >= 0.0 && pitch.is_finite(),
            Self::Lawnmower { leg_length, spacing, speed, .. } => *leg_length > 0.0 && *spacing > 0.0 && *speed >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad trajectory parameters: {self:?}"))
        }
    }

    /// Global pose at `step`, body x along the direction of travel.
    pub fn pose(&self, step: u32, dt: f64) -> Pose3 {
        let t = step as f64 * dt;
        match *self {
            Self::Circle { center, radius, speed, phase_deg, depth, clockwise } => {
                let sign = if clockwise { -1.0 } else { 1.0 };
                let theta = phase_deg.to_radians() + sign * speed * t / radius;
                let p = Vector3::new(center[0] + radius * theta.cos(), center[1] + radius * theta.sin(), depth);
                Pose3::new(Rot3::rz(theta + sign * FRAC_PI_2), p)
            }
            Self::Helix { center, radius, speed, phase_deg, depth, pitch } => {
                let theta = phase_deg.to_radians() + speed * t / radius;
                let z = depth - pitch * step as f64;
                let p = Vector3::new(center[0] + radius * theta.cos(), center[1] + radius * theta.sin(), z);
                let climb = (pitch / dt).atan2(speed);
                Pose3::new(Rot3::from_euler(0.0, climb, theta + FRAC_PI_2), p)
            }
            Self::Lawnmower { origin, heading_deg, leg_length, spacing, speed, depth } => {
                let (x, y, yaw) = lawnmower(speed * t, leg_length, spacing);
                let h = heading_deg.to_radians();
                let (s, c) = h.sin_cos();
                let p = Vector3::new(origin[0] + c * x - s * y, origin[1] + s * x + c * y, depth);
                Pose3::new(Rot3::rz(h + yaw), p)
            }
        }
    }
}

/// Boustrophedon in its own frame: legs along x, semicircular turns, each
/// cycle shifted by two spacings along y.
fn lawnmower(s: f64, leg: f64, spacing: f64) -> (f64, f64, f64) {
    let rho = spacing / 2.0;
    let turn = PI * rho;
    let period = 2.0 * leg + 2.0 * turn;
    let cycle = (s / period).floor();
    let u = s - cycle * period;
    let base = cycle * 2.0 * spacing;
    let (x, y, yaw) = if u < leg {
        (u, 0.0, 0.0)
    } else if u < leg + turn {
        let phi = (u - leg) / rho;
        (leg + rho * phi.sin(), rho - rho * phi.cos(), phi)
    } else if u < 2.0 * leg + turn {
        (leg - (u - leg - turn), 2.0 * rho, PI)
    } else {
        let phi = (u - 2.0 * leg - turn) / rho;
        (-rho * phi.sin(), 3.0 * rho - rho * phi.cos(), PI - phi)
    };
    (x, base + y, yaw)
}

/// Default fleet: circles, lawnmowers and helices around a 40 m ring, each
/// robot 6 m deeper than the previous one.
pub fn default_trajectories(robots: usize) -> Vec<TrajectorySpec> {
    (0..robots)
        .map(|r| {
            let a = TAU * r as f64 / robots.max(1) as f64;
            let c = [40.0 * a.cos(), 40.0 * a.sin()];
            let depth = -5.0 - 6.0 * r as f64;
            match r % 3 {
                0 => TrajectorySpec::Circle { center: c, radius: 20.0, speed: 0.8, phase_deg: 0.0, depth, clockwise: false },
                1 => TrajectorySpec::Lawnmower {
                    origin: c,
                    heading_deg: a.to_degrees() + 90.0,
                    leg_length: 40.0,
                    spacing: 12.0,
                    speed: 1.0,
                    depth,
                },
                _ => TrajectorySpec::Helix { center: c, radius: 15.0, speed: 0.7, phase_deg: 90.0, depth, pitch: 0.005 },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub robots: usize,
    /// Number of poses per robot, including the start pose.
    pub steps: u32,
    /// Seconds per step.
    pub dt: f64,
    pub seed: u64,
    /// Steps per TDMA slot.
    pub slot_length: u64,
    /// Re-optimize the multi-agent graphs every this many steps.
    pub solve_every: u32,
    pub bearing_factors: bool,
    pub transport: Transport,
    pub covariance: CovarianceSettings,
    /// Noise actually applied to the simulated sensors.
    pub noise: SensorNoise,
    pub model: ModelSettings,
    pub channel: ChannelSettings,
    pub anchors: AnchorSettings,
    /// One per robot; empty selects [`default_trajectories`].
    pub trajectories: Vec<TrajectorySpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            robots: 5,
            steps: 600,
            dt: 1.0,
            seed: 0,
            slot_length: 1,
            solve_every: 5,
            bearing_factors: true,
            transport: Transport::Frame,
            covariance: CovarianceSettings::default(),
            noise: SensorNoise::default(),
            model: ModelSettings::default(),
            channel: ChannelSettings::default(),
            anchors: AnchorSettings::default(),
            trajectories: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    /// Parses TOML text. Unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses TOML text after applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to bare strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn trajectories(&self) -> Vec<TrajectorySpec> {
        if self.trajectories.is_empty() {
            default_trajectories(self.robots)
        } else {
            self.trajectories.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.robots == 0 || self.robots > 255 {
            return bad(format!("robots must be in 1..=255, got {}", self.robots));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive".into());
        }
        if self.slot_length == 0 || self.solve_every == 0 {
            return bad("slot_length and solve_every must be positive".into());
        }
        if self.noise.sigmas().iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sensor noise must be finite and non-negative".into());
        }
        let m = &self.model;
        if m.sensors.sigmas().iter().chain([&m.bearing_sigma_deg, &m.start_sigma]).any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("model sigmas must be positive".into());
        }
        let a = &self.anchors;
        if [a.own_sigma, a.remote_translation_sigma, a.remote_rotation_sigma_deg].iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || !(a.guess_sigma >= 0.0 && a.guess_sigma.is_finite())
        {
            return bad("anchor sigmas must be positive".into());
        }
        let c = &self.covariance;
        if !(c.rotation_sigma > 0.0 && c.translation_sigma > 0.0) {
            return bad("tuned covariance sigmas must be positive".into());
        }
        self.channel.channel_config(self.seed).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Models::new(self).map_err(|e| ConfigError::Invalid(format!("noise model: {e}")))?;
        let traj = self.trajectories();
        if traj.len() != self.robots {
            return bad(format!("{} trajectories for {} robots", traj.len(), self.robots));
        }
        for t in &traj {
            t.validate().map_err(ConfigError::Invalid)?;
        }
        let mut depths: Vec<f64> = traj.iter().map(TrajectorySpec::depth).collect();
        depths.sort_by(f64::total_cmp);
        if depths.windows(2).any(|w| w[1] - w[0] < 1e-6) {
            return bad("robots need distinct depth offsets".into());
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) =
        assignment.split_once('=').ok_or_else(|| ConfigError::Parse(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = path.trim().split('.').collect();
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Parse(format!("override path `{path}` crosses a non-table value"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

// ---------------------------------------------------------------------------
// Ground truth and sensors

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `poses[robot][step]`, global frame.
    pub poses: Vec<Vec<Pose3>>,
}

impl GroundTruth {
    pub fn robots(&self) -> usize {
        self.poses.len()
    }

    pub fn steps(&self) -> usize {
        self.poses.first().map_or(0, Vec::len)
    }

    pub fn pose(&self, robot: usize, step: u32) -> &Pose3 {
        &self.poses[robot][step as usize]
    }

    /// The robot's anchor: a horizontal translation to its start position.
    pub fn anchor(&self, robot: usize) -> Pose3 {
        let t = self.poses[robot][0].translation();
        Pose3::from_translation(t.x, t.y, 0.0)
    }

    /// Pose in the robot's own local frame.
    pub fn local(&self, robot: usize, step: u32) -> Pose3 {
        self.anchor(robot).inverse() * self.poses[robot][step as usize]
    }

    /// All robots at one step.
    pub fn fleet_at(&self, step: u32) -> Vec<Pose3> {
        self.poses.iter().map(|p| p[step as usize]).collect()
    }
}

pub fn generate_truth(cfg: &ScenarioConfig) -> GroundTruth {
    let poses = cfg.trajectories().iter().map(|t| (0..cfg.steps).map(|s| t.pose(s, cfg.dt)).collect()).collect();
    GroundTruth { poses }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sensors {
    /// Relative motion since the previous step; absent at step 0.
    pub odometry: Option<Pose3>,
    pub orientation: Rot3,
    pub depth: f64,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    sigma * n
}

/// Simulated readings for `robot` at `step`. A fixed number of variates is
/// drawn whatever the noise levels.
pub fn sense<R: Rng + ?Sized>(truth: &GroundTruth, robot: usize, step: u32, noise: &SensorNoise, rng: &mut R) -> Sensors {
    let x = truth.pose(robot, step);
    let mut eta = Tangent6::zeros();
    for i in 0..6 {
        eta[i] = gaussian(rng, if i < 3 { noise.odometry_rotation_sigma } else { noise.odometry_translation_sigma });
    }
    let odometry = (step > 0).then(|| {
        let truth_step = truth.pose(robot, step - 1).between(x);
        Pose3::exp(&(truth_step.log() + eta))
    });
    let w = Vector3::from_fn(|_, _| gaussian(rng, noise.orientation_sigma));
    let orientation = *x.rotation() * Rot3::exp(&w);
    let depth = x.translation().z + gaussian(rng, noise.depth_sigma);
    Sensors { odometry, orientation, depth }
}

// ---------------------------------------------------------------------------
// Agents

/// What crosses the channel.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Frame(Frame),
    Summary(ChainSummary),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentStats {
    pub solves: u64,
    pub iterations: u64,
    /// Steps at which the multi-agent solve diverged or failed.
    pub divergences: Vec<u32>,
    pub deliveries: u64,
    pub outliers: u64,
    pub bearing_factors: u64,
    /// Deliveries skipped as stale, corrupt or unusable.
    pub skipped: u64,
}

#[derive(Clone, Debug)]
struct Models {
    odometry: NoiseModel,
    orientation: NoiseModel,
    depth: NoiseModel,
    bearing: NoiseModel,
    start: NoiseModel,
    own_anchor: NoiseModel,
    remote_anchor: NoiseModel,
    mode: CovarianceMode,
    bearing_factors: bool,
}

impl Models {
    fn new(cfg: &ScenarioConfig) -> Result<Self, crate::factors::FactorError> {
        let s = &cfg.model.sensors;
        let (r, t) = (s.odometry_rotation_sigma, s.odometry_translation_sigma);
        let a = &cfg.anchors;
        let ar = a.remote_rotation_sigma_deg.to_radians();
        let at = a.remote_translation_sigma;
        Ok(Self {
            odometry: NoiseModel::from_sigmas(&[r, r, r, t, t, t])?,
            orientation: NoiseModel::isotropic(3, s.orientation_sigma)?,
            depth: NoiseModel::isotropic(1, s.depth_sigma)?,
            bearing: NoiseModel::isotropic(2, cfg.model.bearing_sigma_deg.to_radians())?,
            start: NoiseModel::isotropic(6, cfg.model.start_sigma)?,
            own_anchor: NoiseModel::isotropic(6, a.own_sigma)?,
            remote_anchor: NoiseModel::from_sigmas(&[ar, ar, ar, at, at, at])?,
            mode: cfg.covariance.mode(),
            bearing_factors: cfg.bearing_factors,
        })
    }
}

/// One robot's estimator: its odometry chain and its view of the fleet.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: u8,
    /// Own chain without anchor; ToL poses carry no unary factors.
    pub single: FactorGraph,
    /// Own trajectory plus every remote robot heard from.
    pub multi: FactorGraph,
    /// Last accepted summary per sender.
    pub history: BTreeMap<u8, ChainSummary>,
    /// Prior mean of each robot's anchor.
    pub anchor_guess: Vec<Pose3>,
    pub stats: AgentStats,
    models: Models,
    transmissions: u32,
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

impl AgentState {
    /// Fresh agent with known start attitude and depth.
    pub fn new(cfg: &ScenarioConfig, id: u8, start: Pose3, anchor_guess: Vec<Pose3>) -> Result<Self, ConfigError> {
        let models = Models::new(cfg).map_err(|e| ConfigError::Invalid(format!("noise model: {e}")))?;
        let x0 = VariableKey::pose(id, 0);
        let a = VariableKey::anchor(id);
        let mut single = FactorGraph::new();
        let mut multi = FactorGraph::new();
        let built = "fresh graph";
        for g in [&mut single, &mut multi] {
            g.add_variable(x0, start).expect(built);
            g.add_factor(FactorRecord::pose_prior(x0, start, models.start.clone()).expect(built)).expect(built);
        }
        let own = anchor_guess[id as usize];
        multi.add_variable(a, own).expect(built);
        multi.add_factor(FactorRecord::anchor_prior(a, own, models.own_anchor.clone()).expect(built)).expect(built);
        Ok(Self { id, single, multi, history: BTreeMap::new(), anchor_guess, stats: AgentStats::default(), models, transmissions: 0 })
    }

    /// Adds the step's own pose and factors. When `tol` the forwarded unaries
    /// are kept out of the single-agent chain.
    pub fn observe(&mut self, step: u32, sensors: &Sensors, tol: bool) -> Result<(), String> {
        let id = self.id;
        let key = VariableKey::pose(id, step);
        let anchor = VariableKey::anchor(id);
        let m = &self.models;
        if step > 0 {
            let prev = VariableKey::pose(id, step - 1);
            let u = sensors.odometry.ok_or("odometry missing")?;
            for g in [&mut self.single, &mut self.multi] {
                let init = *g.value(&prev).ok_or("previous pose missing")? * u;
                g.add_variable(key, init).map_err(fail)?;
                g.add_factor(FactorRecord::odometry(prev, key, u, m.odometry.clone()).map_err(fail)?).map_err(fail)?;
            }
        }
        let orientation = |anchor| FactorRecord::orientation(key, anchor, sensors.orientation, m.orientation.clone());
        let depth = |anchor| FactorRecord::depth(key, anchor, sensors.depth, m.depth.clone());
        if !tol {
            self.single.add_factor(orientation(None).map_err(fail)?).map_err(fail)?;
            self.single.add_factor(depth(None).map_err(fail)?).map_err(fail)?;
        }
        self.multi.add_factor(orientation(Some(anchor)).map_err(fail)?).map_err(fail)?;
        self.multi.add_factor(depth(Some(anchor)).map_err(fail)?).map_err(fail)?;
        Ok(())
    }

    /// Optimizes the single-agent chain and summarizes its newest pose.
    pub fn summarize(&mut self, sensors: &Sensors, params: &LmParams) -> Result<ChainSummary, String> {
        self.single.optimize(params).map_err(fail)?;
        let payload = UnaryPayload { orientation: sensors.orientation, depth: sensors.depth };
        osm::summarize(&self.single, self.id, payload).map_err(fail)
    }

    /// Summarizes and packs for the channel.
    pub fn broadcast(&mut self, sensors: &Sensors, transport: Transport, params: &LmParams) -> Result<Payload, String> {
        let summary = self.summarize(sensors, params)?;
        let sequence = (self.transmissions % 256) as u8;
        self.transmissions += 1;
        Ok(match transport {
            Transport::Lossless => Payload::Summary(summary),
            Transport::Frame => Payload::Frame(encode(&AcousticMessage::from_summary(&summary, sequence)).map_err(fail)?),
        })
    }

    /// Integrates one delivery of a summary launched at `step`. Unusable
    /// deliveries are counted and skipped.
    pub fn receive(&mut self, step: u32, delivery: &Delivery<Payload>) {
        self.stats.deliveries += 1;
        self.stats.outliers += delivery.outlier as u64;
        if let Err(_reason) = self.try_receive(step, delivery) {
            self.stats.skipped += 1;
        }
    }

    fn try_receive(&mut self, step: u32, delivery: &Delivery<Payload>) -> Result<(), String> {
        let summary = match &delivery.message {
            Payload::Summary(s) => s.clone(),
            Payload::Frame(f) => decode(f).map_err(fail)?.to_summary(step),
        };
        let s = summary.sender;
        if s == self.id || s as usize >= self.anchor_guess.len() {
            return Err(format!("unexpected sender {s}"));
        }
        let key = VariableKey::pose(s, summary.index);
        let anchor = VariableKey::anchor(s);
        let m = self.models.clone();
        match self.history.get(&s) {
            None => {
                let inv = summary.transform.inverse().adjoint();
                let right = osm::project_psd(&(inv * summary.covariance * inv.transpose()));
                let prior = NoiseModel::from_covariance6(&right).map_err(fail)?;
                let guess = self.anchor_guess[s as usize];
                self.multi.add_variable(anchor, guess).map_err(fail)?;
                self.multi.add_factor(FactorRecord::anchor_prior(anchor, guess, m.remote_anchor).map_err(fail)?).map_err(fail)?;
                self.multi.add_variable(key, summary.transform).map_err(fail)?;
                self.multi.add_factor(FactorRecord::pose_prior(key, summary.transform, prior).map_err(fail)?).map_err(fail)?;
            }
            Some(prev) => {
                let link = osm::decompose(prev, &summary, m.mode).map_err(fail)?;
                let noise = NoiseModel::from_covariance6(&osm::odometry_covariance(&link, m.mode)).map_err(fail)?;
                let prev_key = VariableKey::pose(s, prev.index);
                let init = *self.multi.value(&prev_key).ok_or("remote pose missing")? * link.relative;
                let odometry = FactorRecord::odometry(prev_key, key, link.relative, noise).map_err(fail)?;
                self.multi.add_variable(key, init).map_err(fail)?;
                self.multi.add_factor(odometry).map_err(fail)?;
            }
        }
        self.multi
            .add_factor(FactorRecord::orientation(key, Some(anchor), summary.orientation, m.orientation).map_err(fail)?)
            .map_err(fail)?;
        self.multi.add_factor(FactorRecord::depth(key, Some(anchor), summary.depth, m.depth).map_err(fail)?).map_err(fail)?;
        if m.bearing_factors {
            let c = BearingMeasurement {
                azimuth: delivery.azimuth,
                elevation: delivery.elevation,
                transmitter: s,
                receiver: self.id,
            };
            let own = VariableKey::pose(self.id, step);
            let f = FactorRecord::bearing(own, key, VariableKey::anchor(self.id), anchor, c, m.bearing).map_err(fail)?;
            self.multi.add_factor(f).map_err(fail)?;
            self.stats.bearing_factors += 1;
        }
        self.history.insert(s, summary);
        Ok(())
    }

    /// Re-optimizes the multi-agent graph; failures are recorded, not raised.
    pub fn solve(&mut self, step: u32, params: &LmParams) {
        self.stats.solves += 1;
        match self.multi.optimize(params) {
            Ok(report) => {
                self.stats.iterations += report.iterations as u64;
                if report.diverged() {
                    self.stats.divergences.push(step);
                }
            }
            Err(_) => self.stats.divergences.push(step),
        }
    }

    /// Own sensing, then the step's deliveries, then a solve.
    pub fn agent_step(
        &mut self,
        step: u32,
        sensors: &Sensors,
        deliveries: &[Delivery<Payload>],
        params: &LmParams,
    ) -> Result<(), String> {
        self.observe(step, sensors, false)?;
        for d in deliveries {
            self.receive(step, d);
        }
        self.solve(step, params);
        Ok(())
    }

    /// Global position estimates `[robot][step]` from the multi-agent graph.
    pub fn estimates(&self, robots: usize, steps: usize) -> Vec<Vec<Option<Vector3<f64>>>> {
        let mut out = vec![vec![None; steps]; robots];
        for (key, value) in self.multi.values() {
            let (Some(index), Some(anchor)) = (key.index(), self.multi.value(&VariableKey::anchor(key.robot))) else {
                continue;
            };
            if let Some(slot) = out.get_mut(key.robot as usize).and_then(|r| r.get_mut(index as usize)) {
                *slot = Some(anchor.transform_point(value.translation()));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// World loop

/// One launched broadcast as seen by one receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct DeliveryRecord {
    pub step: u32,
    pub sender: u8,
    pub receiver: u8,
    pub azimuth: f64,
    pub elevation: f64,
    pub outlier: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub truth: GroundTruth,
    /// `estimates[agent][robot][step]`, global positions.
    pub estimates: Vec<Vec<Vec<Option<Vector3<f64>>>>>,
    pub stats: Vec<AgentStats>,
    pub deliveries: Vec<DeliveryRecord>,
    pub transmissions: u64,
    /// Broadcasts that could not be produced, e.g. an encode overflow.
    pub failed_transmissions: u64,
}

impl RunOutput {
    pub fn divergences(&self) -> usize {
        self.stats.iter().map(|s| s.divergences.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("agent {agent} at step {step}: {reason}")]
    Agent { agent: u8, step: u32, reason: String },
}

/// Random stream `stream` of a scenario seed.
fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const CHANNEL_STREAM: u64 = 0;
const GUESS_STREAM: u64 = 1;
const SENSOR_STREAM: u64 = 16;

/// Each agent's belief about every robot's anchor: exact for itself, a
/// horizontal guess for the others.
fn anchor_guesses(cfg: &ScenarioConfig, truth: &GroundTruth) -> Vec<Vec<Pose3>> {
    let mut rng = stream(cfg.seed, GUESS_STREAM);
    (0..cfg.robots)
        .map(|agent| {
            (0..cfg.robots)
                .map(|r| {
                    let a = truth.anchor(r);
                    let dx = gaussian(&mut rng, cfg.anchors.guess_sigma);
                    let dy = gaussian(&mut rng, cfg.anchors.guess_sigma);
                    if r == agent {
                        a
                    } else {
                        Pose3::from_translation(a.translation().x + dx, a.translation().y + dy, 0.0)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    cfg.validate()?;
    let truth = generate_truth(cfg);
    let params = LmParams::default();
    let channel = cfg.channel.channel_config(cfg.seed);
    let mut channel_rng = stream(cfg.seed, CHANNEL_STREAM);
    let mut sensor_rngs: Vec<ChaCha8Rng> = (0..cfg.robots).map(|r| stream(cfg.seed, SENSOR_STREAM + r as u64)).collect();
    let guesses = anchor_guesses(cfg, &truth);
    let mut agents: Vec<AgentState> = (0..cfg.robots)
        .map(|r| AgentState::new(cfg, r as u8, truth.local(r, 0), guesses[r].clone()))
        .collect::<Result<_, _>>()?;
    let mut log = Vec::new();
    let (mut transmissions, mut failed) = (0, 0);
    for step in 0..cfg.steps {
        let sensors: Vec<Sensors> =
            (0..cfg.robots).map(|r| sense(&truth, r, step, &cfg.noise, &mut sensor_rngs[r])).collect();
        let sender = acoustic::is_slot_start(step as u64, cfg.slot_length)
            .then(|| acoustic::next_transmitter(step as u64, cfg.robots, cfg.slot_length) as usize)
            .filter(|_| cfg.robots > 1);
        for (r, agent) in agents.iter_mut().enumerate() {
            agent
                .observe(step, &sensors[r], sender == Some(r))
                .map_err(|reason| RunError::Agent { agent: r as u8, step, reason })?;
        }
        let mut inbox: Vec<Vec<Delivery<Payload>>> = vec![Vec::new(); cfg.robots];
        if let Some(s) = sender {
            transmissions += 1;
            match agents[s].broadcast(&sensors[s], cfg.transport, &params) {
                Ok(payload) => {
                    for d in acoustic::transmit(&channel, &truth.fleet_at(step), s as u8, &payload, &mut channel_rng) {
                        log.push(DeliveryRecord {
                            step,
                            sender: s as u8,
                            receiver: d.receiver,
                            azimuth: d.azimuth,
                            elevation: d.elevation,
                            outlier: d.outlier,
                        });
                        inbox[d.receiver as usize].push(d);
                    }
                }
                Err(_) => failed += 1,
            }
        }
        let solve = (step + 1) % cfg.solve_every == 0 || step + 1 == cfg.steps;
        agents.par_iter_mut().zip(inbox.par_iter()).for_each(|(agent, deliveries)| {
            for d in deliveries {
                agent.receive(step, d);
            }
            if solve {
                agent.solve(step, &params);
            }
        });
    }
    let steps = cfg.steps as usize;
    Ok(RunOutput {
        config: cfg.clone(),
        estimates: agents.iter().map(|a| a.estimates(cfg.robots, steps)).collect(),
        stats: agents.into_iter().map(|a| a.stats).collect(),
        truth,
        deliveries: log,
        transmissions,
        failed_transmissions: failed,
    })
}
