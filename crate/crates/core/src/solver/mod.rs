//! Nonlinear least squares over pose variables.
//!
//! [`FactorGraph`] holds SE(3) variables and factors and minimises
//! `Σ eᵀ Σ⁻¹ e` with damped Gauss-Newton (Levenberg-Marquardt). The normal
//! equations are solved with a block-sparse Cholesky factorization whose
//! elimination order is chosen by minimum degree on the variable graph.

mod sparse;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use nalgebra::{Matrix6, Vector6};
use thiserror::Error;

use crate::factors::{FactorError, FactorRecord, Measurement};
use crate::liegroups::{LieGroup, Pose3};
use sparse::{BlockSystem, Symbolic};

/// Identifies a variable: a pose of a robot's trajectory or a robot's anchor.
///
/// Ordering is deterministic: all poses (by robot, then index) precede all
/// anchors (by robot).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VariableKey {
    pub robot: u8,
    pub kind: VariableKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariableKind {
    Pose(u32),
    Anchor,
}

impl VariableKey {
    pub fn pose(robot: u8, index: u32) -> Self {
        Self { robot, kind: VariableKind::Pose(index) }
    }

    pub fn anchor(robot: u8) -> Self {
        Self { robot, kind: VariableKind::Anchor }
    }

    pub fn is_anchor(&self) -> bool {
        self.kind == VariableKind::Anchor
    }

    /// Pose index, or `None` for an anchor.
    pub fn index(&self) -> Option<u32> {
        match self.kind {
            VariableKind::Pose(i) => Some(i),
            VariableKind::Anchor => None,
        }
    }

    fn sort_key(&self) -> (bool, u8, u32) {
        match self.kind {
            VariableKind::Pose(i) => (false, self.robot, i),
            VariableKind::Anchor => (true, self.robot, 0),
        }
    }
}

impl Ord for VariableKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for VariableKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::Pose(i) => write!(f, "x{}.{}", self.robot, i),
            VariableKind::Anchor => write!(f, "a{}", self.robot),
        }
    }
}

pub type Values = BTreeMap<VariableKey, Pose3>;

const COST_ROUNDING: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("variable {0} already exists")]
    DuplicateVariable(VariableKey),
    #[error("unbound variable {0}")]
    UnboundVariable(VariableKey),
    #[error("initial value for {0} is not finite")]
    NonFiniteValue(VariableKey),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("information matrix is singular; the graph is underdetermined")]
    Underdetermined,
    #[error("unbound variable {0}")]
    UnboundVariable(VariableKey),
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub min_lambda: f64,
    pub max_lambda: f64,
    pub lambda_factor: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop once the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop once the largest step component falls below this.
    pub step_tolerance: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-6,
            min_lambda: 1e-12,
            max_lambda: 1e6,
            lambda_factor: 10.0,
            relative_tolerance: 1e-9,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// No step lowered the cost even at maximum damping.
    Stalled,
    /// The damped system could not be factored even at maximum damping.
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_lambda: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn diverged(&self) -> bool {
        self.status == SolveStatus::Diverged
    }
}

#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    index: BTreeMap<VariableKey, usize>,
    keys: Vec<VariableKey>,
    values: Vec<Pose3>,
    factors: Vec<FactorRecord>,
    factor_slots: Vec<Vec<usize>>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, key: VariableKey, initial: Pose3) -> Result<(), GraphError> {
        if self.index.contains_key(&key) {
            return Err(GraphError::DuplicateVariable(key));
        }
        if !initial.is_finite() {
            return Err(GraphError::NonFiniteValue(key));
        }
        self.index.insert(key, self.keys.len());
        self.keys.push(key);
        self.values.push(initial);
        Ok(())
    }

    /// Appends a factor and returns its index. Every key must already exist.
    pub fn add_factor(&mut self, factor: FactorRecord) -> Result<usize, GraphError> {
        let slots = factor
            .keys()
            .iter()
            .map(|k| self.index.get(k).copied().ok_or(GraphError::UnboundVariable(*k)))
            .collect::<Result<Vec<_>, _>>()?;
        self.factors.push(factor);
        self.factor_slots.push(slots);
        Ok(self.factors.len() - 1)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn value(&self, key: &VariableKey) -> Option<&Pose3> {
        self.index.get(key).map(|&i| &self.values[i])
    }

    pub fn set_value(&mut self, key: &VariableKey, value: Pose3) -> Result<(), GraphError> {
        let &i = self.index.get(key).ok_or(GraphError::UnboundVariable(*key))?;
        self.values[i] = value;
        Ok(())
    }

    pub fn values(&self) -> Values {
        self.index.iter().map(|(k, &i)| (*k, self.values[i])).collect()
    }

    /// Keys in deterministic order.
    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.index.keys()
    }

    pub fn factors(&self) -> &[FactorRecord] {
        &self.factors
    }

    pub fn num_variables(&self) -> usize {
        self.keys.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    fn bound_poses(&self, f: usize, values: &[Pose3]) -> Vec<Pose3> {
        self.factor_slots[f].iter().map(|&i| values[i]).collect()
    }

    /// `Σ eᵀ Σ⁻¹ e` over all factors at the current values.
    pub fn total_cost(&self) -> Result<f64, FactorError> {
        self.cost_at(&self.values)
    }

    fn cost_at(&self, values: &[Pose3]) -> Result<f64, FactorError> {
        let mut total = 0.0;
        for (f, factor) in self.factors.iter().enumerate() {
            total += factor.cost(&self.bound_poses(f, values))?;
        }
        Ok(total)
    }

    fn symbolic(&self) -> Symbolic {
        let mut edges = Vec::new();
        for slots in &self.factor_slots {
            for (i, &a) in slots.iter().enumerate() {
                for &b in &slots[i + 1..] {
                    edges.push((a, b));
                }
            }
        }
        let mut rank = vec![0; self.keys.len()];
        for (r, &i) in self.index.values().enumerate() {
            rank[i] = r;
        }
        Symbolic::analyze(self.keys.len(), &edges, &rank)
    }

    /// Whitened normal equations `H = Σ JᵀJ`, `b = -Σ Jᵀe` at `values`.
    fn normal_equations<'s>(&self, symbolic: &'s Symbolic, values: &[Pose3]) -> Result<BlockSystem<'s>, FactorError> {
        let mut system = BlockSystem::new(symbolic);
        for (f, factor) in self.factors.iter().enumerate() {
            let lin = factor.linearize(&self.bound_poses(f, values))?;
            let w = factor.noise().sqrt_information();
            let r = w * lin.residual;
            let slots = &self.factor_slots[f];
            let jw: Vec<Matrix6<f64>> = (0..slots.len()).map(|i| w * lin.jacobians[i]).collect();
            for (i, &a) in slots.iter().enumerate() {
                system.add_rhs(a, &(-jw[i].transpose() * r));
                for (j, &b) in slots.iter().enumerate().skip(i) {
                    let block = jw[i].transpose() * jw[j];
                    if a == b && i != j {
                        system.add_block(a, b, &(block + block.transpose()));
                    } else {
                        system.add_block(a, b, &block);
                    }
                }
            }
        }
        Ok(system)
    }

    /// Minimises the total cost in place.
    ///
    /// A failed factorization or a rejected step raises the damping by
    /// `lambda_factor`; an accepted step lowers it. Values are left at the best
    /// point found, also when the report says `Diverged` or `Stalled`.
    pub fn optimize(&mut self, params: &LmParams) -> Result<SolveReport, SolveError> {
        let symbolic = self.symbolic();
        let mut cost = self.total_cost()?;
        let mut report = SolveReport {
            status: SolveStatus::MaxIterations,
            iterations: 0,
            initial_cost: cost,
            final_cost: cost,
            final_lambda: params.initial_lambda,
        };
        if self.keys.is_empty() {
            report.status = SolveStatus::Converged;
            return Ok(report);
        }
        let mut lambda = params.initial_lambda;
        'outer: while report.iterations < params.max_iterations {
            report.iterations += 1;
            let system = self.normal_equations(&symbolic, &self.values)?;
            let gradient = (0..self.keys.len()).map(|v| system.rhs(v).amax()).fold(0.0, f64::max);
            if gradient < params.gradient_tolerance {
                report.status = SolveStatus::Converged;
                break;
            }
            loop {
                let Some(chol) = system.factor(lambda) else {
                    if lambda >= params.max_lambda {
                        report.status = SolveStatus::Diverged;
                        break 'outer;
                    }
                    lambda = (lambda * params.lambda_factor).min(params.max_lambda);
                    continue;
                };
                let step = chol.solve_system(&system);
                // damping shrinks the step by at most a factor 1 + λ
                let tiny_step = step.iter().all(|d| d.amax() * (1.0 + lambda) < params.step_tolerance);
                let trial: Vec<Pose3> = self.values.iter().zip(&step).map(|(x, d)| x.retract(d)).collect();
                let trial_cost = match self.cost_at(&trial) {
                    Ok(c) if c.is_finite() => c,
                    _ => f64::INFINITY,
                };
                // whitened residuals carry rounding error, so the cost is only
                // resolved to a relative COST_ROUNDING
                if trial_cost <= cost + COST_ROUNDING * cost {
                    let decrease = cost - trial_cost;
                    self.values = trial;
                    lambda = (lambda / params.lambda_factor).max(params.min_lambda);
                    let converged = tiny_step || (0.0..=params.relative_tolerance * cost).contains(&decrease);
                    cost = trial_cost;
                    if converged {
                        report.status = SolveStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                if lambda >= params.max_lambda {
                    report.status = SolveStatus::Stalled;
                    break 'outer;
                }
                lambda = (lambda * params.lambda_factor).min(params.max_lambda);
            }
        }
        report.final_cost = cost;
        report.final_lambda = lambda;
        Ok(report)
    }

    /// Marginal covariance of one variable in its right (body) tangent,
    /// `[(JᵀΣ⁻¹J)⁻¹]_vv` at the current values.
    pub fn marginal_covariance(&self, key: &VariableKey) -> Result<Matrix6<f64>, SolveError> {
        let &v = self.index.get(key).ok_or(SolveError::UnboundVariable(*key))?;
        let symbolic = self.symbolic();
        let system = self.normal_equations(&symbolic, &self.values)?;
        let chol = system.factor(0.0).ok_or(SolveError::Underdetermined)?;
        let n = self.keys.len();
        let mut cov = Matrix6::zeros();
        for c in 0..6 {
            let mut e = vec![Vector6::zeros(); n];
            e[v][c] = 1.0;
            let x = chol.solve(&e);
            cov.set_column(c, &x[v]);
        }
        let cov = (cov + cov.transpose()) * 0.5;
        if !cov.iter().all(|x| x.is_finite()) || (0..6).any(|i| cov[(i, i)] <= 0.0) {
            return Err(SolveError::Underdetermined);
        }
        Ok(cov)
    }

    /// Line-oriented text rendering of the graph, stable across runs.
    ///
    /// Variables are listed in key order as translation then rotation vector;
    /// factors in insertion order with keys, measurement and noise covariance.
    pub fn dump(&self) -> String {
        let mut out = String::from("# bedd factor graph dump v1\n");
        for (key, &i) in &self.index {
            let x = &self.values[i];
            let w = x.rotation().log();
            let t = x.translation();
            let _ = writeln!(out, "VAR {key} {}", join(&[t.x, t.y, t.z, w.x, w.y, w.z]));
        }
        for (f, factor) in self.factors.iter().enumerate() {
            let keys: Vec<String> = factor.keys().iter().map(|k| k.to_string()).collect();
            let meas = match factor.measurement() {
                Measurement::Pose(p) => {
                    let (t, w) = (p.translation(), p.rotation().log());
                    join(&[t.x, t.y, t.z, w.x, w.y, w.z])
                }
                Measurement::Rotation(r) => {
                    let w = r.log();
                    join(&[w.x, w.y, w.z])
                }
                Measurement::Depth(d) => join(&[*d]),
                Measurement::Bearing(b) => {
                    format!("{} tx={} rx={}", join(&[b.azimuth, b.elevation]), b.transmitter, b.receiver)
                }
            };
            let cov = factor.noise().covariance();
            let cov: Vec<f64> = cov.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
            let _ = writeln!(out, "FAC {f} {} {} | {meas} | {}", factor.kind(), keys.join(","), join_sci(&cov));
        }
        out
    }
}

fn clean(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{:.9}", clean(*v))).map(|s| if s == "-0.000000000" { "0.000000000".into() } else { s }).collect::<Vec<_>>().join(" ")
}

fn join_sci(values: &[f64]) -> String {
    values.iter().map(|v| format!("{:.6e}", clean(*v))).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::NoiseModel;
    use crate::liegroups::Rot3;
    use nalgebra::Vector3;

    #[test]
    fn key_order_puts_anchors_last() {
        let mut keys = vec![
            VariableKey::anchor(0),
            VariableKey::pose(1, 0),
            VariableKey::pose(0, 2),
            VariableKey::anchor(1),
            VariableKey::pose(0, 1),
        ];
        keys.sort();
        let names: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
        assert_eq!(names, ["x0.1", "x0.2", "x1.0", "a0", "a1"]);
    }

    #[test]
    fn add_errors() {
        let mut g = FactorGraph::new();
        let k = VariableKey::pose(0, 0);
        g.add_variable(k, Pose3::identity()).unwrap();
        assert_eq!(g.add_variable(k, Pose3::identity()), Err(GraphError::DuplicateVariable(k)));
        let noise = NoiseModel::isotropic(6, 1.0).unwrap();
        let f = FactorRecord::odometry(k, VariableKey::pose(0, 1), Pose3::identity(), noise).unwrap();
        assert_eq!(g.add_factor(f), Err(GraphError::UnboundVariable(VariableKey::pose(0, 1))));
        let bad = Pose3::new(Rot3::identity(), Vector3::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(g.add_variable(VariableKey::pose(0, 5), bad), Err(GraphError::NonFiniteValue(_))));
    }

    #[test]
    fn prior_and_odometry_chain_solves_exactly() {
        let mut g = FactorGraph::new();
        let noise = NoiseModel::from_sigmas(&[0.01, 0.01, 0.01, 0.1, 0.1, 0.1]).unwrap();
        let p = Pose3::new(Rot3::from_euler(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, -3.0));
        let u = Pose3::new(Rot3::rz(0.05), Vector3::new(1.0, 0.0, 0.1));
        for i in 0..20 {
            g.add_variable(VariableKey::pose(0, i), Pose3::identity()).unwrap();
        }
        g.add_factor(FactorRecord::pose_prior(VariableKey::pose(0, 0), p, noise.clone()).unwrap()).unwrap();
        for i in 1..20 {
            let f = FactorRecord::odometry(VariableKey::pose(0, i - 1), VariableKey::pose(0, i), u, noise.clone()).unwrap();
            g.add_factor(f).unwrap();
        }
        let report = g.optimize(&LmParams::default()).unwrap();
        assert!(report.converged(), "{report:?}");
        assert!(report.final_cost < 1e-16);
        let mut expect = p;
        for i in 0..20 {
            let got = g.value(&VariableKey::pose(0, i)).unwrap();
            assert!(crate::liegroups::group_error(got, &expect).amax() < 1e-8);
            expect = expect * u;
        }
    }

    #[test]
    fn marginal_of_prior_is_prior_covariance() {
        let mut g = FactorGraph::new();
        let k = VariableKey::pose(0, 0);
        g.add_variable(k, Pose3::identity()).unwrap();
        let sig = [0.01, 0.02, 0.03, 0.1, 0.2, 0.3];
        let noise = NoiseModel::from_sigmas(&sig).unwrap();
        g.add_factor(FactorRecord::pose_prior(k, Pose3::identity(), noise).unwrap()).unwrap();
        let cov = g.marginal_covariance(&k).unwrap();
        for i in 0..6 {
            assert!((cov[(i, i)] - sig[i] * sig[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn unconstrained_graph_is_underdetermined() {
        let mut g = FactorGraph::new();
        let a = VariableKey::pose(0, 0);
        let b = VariableKey::pose(0, 1);
        g.add_variable(a, Pose3::identity()).unwrap();
        g.add_variable(b, Pose3::identity()).unwrap();
        let noise = NoiseModel::isotropic(6, 1.0).unwrap();
        g.add_factor(FactorRecord::odometry(a, b, Pose3::identity(), noise).unwrap()).unwrap();
        assert_eq!(g.marginal_covariance(&a), Err(SolveError::Underdetermined));
    }

    #[test]
    fn dump_normalizes_negative_zero() {
        assert_eq!(join(&[-0.0, -1e-12, 1.5]), "0.000000000 0.000000000 1.500000000");
    }
}
