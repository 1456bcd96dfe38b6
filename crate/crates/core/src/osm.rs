//! Origin state method.
//!
//! A sender compresses its whole dead-reckoning chain into the transform from
//! its local origin to the current pose (the time of launch, ToL) plus that
//! pose's covariance. A receiver turns any two successively *received*
//! summaries into one relative-motion factor, so lost messages cost only
//! resolution, never consistency.
//!
//! Summary covariances live in the left (origin-frame) tangent of `x_ik`:
//! `x_ik = exp(ε) · x̄_ik`. In that convention chain covariances simply add,
//! which is what the marginal-difference recovery relies on.

use nalgebra::{Matrix6, SymmetricEigen};
use thiserror::Error;

use crate::liegroups::{LieGroup, Pose3, Rot3};
use crate::solver::{FactorGraph, SolveError, VariableKind};

/// Smallest eigenvalue kept by the PSD projection.
pub const PSD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OsmError {
    #[error("stale summary: index {curr} does not follow {prev}")]
    StaleSummary { prev: u32, curr: u32 },
    #[error("summaries come from different senders ({prev} and {curr})")]
    SenderMismatch { prev: u8, curr: u8 },
    #[error("robot {0} has no poses in the graph")]
    EmptyChain(u8),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Broadcast content of one transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSummary {
    pub sender: u8,
    /// ToL pose index `k`.
    pub index: u32,
    /// `x_ik`, local origin to ToL pose.
    pub transform: Pose3,
    /// Covariance of `x_ik` in its left tangent.
    pub covariance: Matrix6<f64>,
    /// Orientation measured at `k`, global frame.
    pub orientation: Rot3,
    /// Depth measured at `k`.
    pub depth: f64,
}

/// How the receiver assigns noise to a decomposed odometry factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CovarianceMode {
    /// `diag(σ_r², σ_r², σ_r², σ_t², σ_t², σ_t²) · (k − j)`.
    Tuned { rotation_sigma: f64, translation_sigma: f64 },
    /// Marginal difference transported into the frame of `x_ij`.
    FirstOrder,
}

impl Default for CovarianceMode {
    fn default() -> Self {
        Self::Tuned { rotation_sigma: 0.005, translation_sigma: 0.02 }
    }
}

/// A decomposed link `z_jk = x_ij⁻¹ x_ik` with its recovered covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposed {
    pub relative: Pose3,
    pub covariance: Matrix6<f64>,
    /// Number of sender steps spanned, `k − j`.
    pub span: u32,
}

/// Orientation and depth measured at the ToL, forwarded with the summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnaryPayload {
    pub orientation: Rot3,
    pub depth: f64,
}

/// Summarizes robot `robot`'s single-agent chain at its newest pose.
///
/// The local origin is the identity by construction, so `x_ik` is the current
/// estimate of pose `k`. The marginal comes back in the right tangent and is
/// re-expressed in the left tangent. The forwarded `payload` must not also
/// appear as factors in `single_graph`; the receiver adds it separately.
pub fn summarize(single_graph: &FactorGraph, robot: u8, payload: UnaryPayload) -> Result<ChainSummary, OsmError> {
    let key = single_graph
        .keys()
        .filter(|k| k.robot == robot)
        .filter_map(|k| match k.kind {
            VariableKind::Pose(i) => Some((i, *k)),
            VariableKind::Anchor => None,
        })
        .max()
        .ok_or(OsmError::EmptyChain(robot))?;
    let (index, key) = key;
    let transform = *single_graph.value(&key).expect("key taken from graph");
    let marginal = single_graph.marginal_covariance(&key)?;
    let ad = transform.adjoint();
    Ok(ChainSummary {
        sender: robot,
        index,
        transform,
        covariance: symmetrize(&(ad * marginal * ad.transpose())),
        orientation: payload.orientation,
        depth: payload.depth,
    })
}

/// `z_jk = x_ij⁻¹ · x_ik` and its covariance under `mode`.
pub fn decompose(prev: &ChainSummary, curr: &ChainSummary, mode: CovarianceMode) -> Result<Decomposed, OsmError> {
    if prev.sender != curr.sender {
        return Err(OsmError::SenderMismatch { prev: prev.sender, curr: curr.sender });
    }
    if curr.index <= prev.index {
        return Err(OsmError::StaleSummary { prev: prev.index, curr: curr.index });
    }
    Ok(Decomposed {
        relative: prev.transform.between(&curr.transform),
        covariance: recover_covariance(prev, curr, mode),
        span: curr.index - prev.index,
    })
}

/// Covariance of the decomposed link.
///
/// `FirstOrder` yields `Π_PSD(Ad(x_ij⁻¹)(Σ_ik − Σ_ij)Ad(x_ij⁻¹)ᵀ)`, the
/// covariance of `η` in `x_ik = x_ij · exp(η) · z̄_jk`. Cross-covariance between
/// the two summaries is not transmitted and is ignored.
pub fn recover_covariance(prev: &ChainSummary, curr: &ChainSummary, mode: CovarianceMode) -> Matrix6<f64> {
    match mode {
        CovarianceMode::Tuned { rotation_sigma, translation_sigma } => {
            let steps = curr.index.saturating_sub(prev.index) as f64;
            let (r2, t2) = (rotation_sigma * rotation_sigma * steps, translation_sigma * translation_sigma * steps);
            Matrix6::from_diagonal(&nalgebra::Vector6::new(r2, r2, r2, t2, t2, t2))
        }
        CovarianceMode::FirstOrder => {
            let ad = prev.transform.inverse().adjoint();
            project_psd(&(ad * (curr.covariance - prev.covariance) * ad.transpose()))
        }
    }
}

/// Noise covariance for an odometry factor carrying `decomposed`, expressed in
/// the right tangent of `z_jk` as the odometry error requires.
pub fn odometry_covariance(decomposed: &Decomposed, mode: CovarianceMode) -> Matrix6<f64> {
    match mode {
        CovarianceMode::Tuned { .. } => decomposed.covariance,
        CovarianceMode::FirstOrder => {
            let ad = decomposed.relative.inverse().adjoint();
            symmetrize(&(ad * decomposed.covariance * ad.transpose()))
        }
    }
}

/// First-order covariance of `T_a · T_b` in the left tangent.
pub fn compound_covariance(sigma_a: &Matrix6<f64>, sigma_b: &Matrix6<f64>, t_a: &Pose3) -> Matrix6<f64> {
    let ad = t_a.adjoint();
    symmetrize(&(ad * sigma_b * ad.transpose() + sigma_a))
}

/// Symmetrizes and clamps eigenvalues to at least [`PSD_FLOOR`].
pub fn project_psd(m: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clamped = eig.eigenvalues.map(|v| v.max(PSD_FLOOR));
    symmetrize(&(eig.eigenvectors * Matrix6::from_diagonal(&clamped) * eig.eigenvectors.transpose()))
}

fn symmetrize(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}
