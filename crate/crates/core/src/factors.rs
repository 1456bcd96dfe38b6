//! Factor residuals and their analytic Jacobians.
//!
//! Every pose variable is perturbed on the right, `X · exp(δ)`, with
//! `δ = (rotation, translation)`. A factor with `k` attached variables yields a
//! residual of dimension `dim` and `k` Jacobian blocks of shape `dim × 6`.
//! Residuals and Jacobian blocks are stored zero-padded to six rows so that the
//! solver can work entirely with stack-allocated 6×6 blocks.

use std::fmt;

use nalgebra::{DMatrix, Matrix3, Matrix6, RowVector3, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::liegroups::{group_error, hat, se3_left_jacobian_inv, so3_left_jacobian_inv, wrap_angle, LieGroup, Pose3, Rot2, Rot3, Tangent6};
use crate::solver::{Values, VariableKey};

/// Horizontal range below which the azimuth is treated as undefined.
const VERTICAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error("unbound variable {0}")]
    UnboundVariable(VariableKey),
    #[error("degenerate geometry: transmitter and receiver positions coincide")]
    DegenerateGeometry,
    #[error("{kind} factor expects {expected} keys, got {got}")]
    Arity { kind: FactorKind, expected: &'static str, got: usize },
    #[error("{kind} factor has a {expected}-dimensional residual, noise model is {got}-dimensional")]
    DimensionMismatch { kind: FactorKind, expected: usize, got: usize },
    #[error("{kind} factor given a mismatched measurement payload")]
    MeasurementMismatch { kind: FactorKind },
    #[error("noise covariance is not symmetric")]
    NotSymmetric,
    #[error("noise covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("noise covariance must be 1 to 6 dimensional, got {0}")]
    BadNoiseDimension(usize),
}

// ---------------------------------------------------------------------------
// Noise

/// Gaussian noise on a residual of dimension 1 to 6.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    dim: usize,
    covariance: Matrix6<f64>,
    /// `W` with `WᵀW = Σ⁻¹`, zero outside the leading `dim × dim` block.
    sqrt_information: Matrix6<f64>,
}

impl NoiseModel {
    pub fn from_covariance(covariance: &DMatrix<f64>) -> Result<Self, FactorError> {
        let dim = covariance.nrows();
        if dim == 0 || dim > 6 || covariance.ncols() != dim {
            return Err(FactorError::BadNoiseDimension(dim));
        }
        let scale = covariance.amax().max(1.0);
        if (covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(FactorError::NotSymmetric);
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(FactorError::NotPositiveDefinite);
        }
        let chol = covariance.clone().cholesky().ok_or(FactorError::NotPositiveDefinite)?;
        let l = chol.l();
        let w = l
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or(FactorError::NotPositiveDefinite)?;
        let mut padded_cov = Matrix6::zeros();
        let mut padded_w = Matrix6::zeros();
        padded_cov.view_mut((0, 0), (dim, dim)).copy_from(covariance);
        padded_w.view_mut((0, 0), (dim, dim)).copy_from(&w);
        Ok(Self { dim, covariance: padded_cov, sqrt_information: padded_w })
    }

    /// Independent components with the given standard deviations.
    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self, FactorError> {
        let diag: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
        Self::from_covariance(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, FactorError> {
        Self::from_sigmas(&vec![sigma; dim])
    }

    pub fn from_covariance6(covariance: &Matrix6<f64>) -> Result<Self, FactorError> {
        Self::from_covariance(&DMatrix::from_column_slice(6, 6, covariance.as_slice()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.covariance.view((0, 0), (self.dim, self.dim)).into_owned()
    }

    pub fn sqrt_information(&self) -> &Matrix6<f64> {
        &self.sqrt_information
    }

    pub fn whiten(&self, residual: &Vector6<f64>) -> Vector6<f64> {
        self.sqrt_information * residual
    }

    /// `eᵀ Σ⁻¹ e` for a zero-padded residual.
    pub fn mahalanobis_sq(&self, residual: &Vector6<f64>) -> f64 {
        self.whiten(residual).norm_squared()
    }
}

// ---------------------------------------------------------------------------
// Factor records

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    PosePrior,
    AnchorPrior,
    Odometry,
    Orientation,
    Depth,
    Bearing,
}

impl FactorKind {
    pub fn residual_dim(self) -> usize {
        match self {
            Self::PosePrior | Self::AnchorPrior | Self::Odometry => 6,
            Self::Orientation => 3,
            Self::Depth => 1,
            Self::Bearing => 2,
        }
    }

    /// Orientation and depth factors attach an anchor in the multi-agent graph
    /// and stand alone in the single-agent graph.
    pub fn accepts_arity(self, n: usize) -> bool {
        match self {
            Self::PosePrior | Self::AnchorPrior => n == 1,
            Self::Odometry => n == 2,
            Self::Orientation | Self::Depth => n == 1 || n == 2,
            Self::Bearing => n == 4,
        }
    }

    fn arity_label(self) -> &'static str {
        match self {
            Self::PosePrior | Self::AnchorPrior => "1",
            Self::Odometry => "2",
            Self::Orientation | Self::Depth => "1 or 2",
            Self::Bearing => "4",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PosePrior => "PosePrior",
            Self::AnchorPrior => "AnchorPrior",
            Self::Odometry => "Odometry",
            Self::Orientation => "Orientation",
            Self::Depth => "Depth",
            Self::Bearing => "Bearing",
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Azimuth and elevation of an incoming acoustic signal, in the global frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BearingMeasurement {
    /// Radians, `(-π, π]`, counter-clockwise from +x.
    pub azimuth: f64,
    /// Radians, `[0, π]`, measured from +z (up).
    pub elevation: f64,
    pub transmitter: u8,
    pub receiver: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Measurement {
    Pose(Pose3),
    Rotation(Rot3),
    Depth(f64),
    Bearing(BearingMeasurement),
}

/// One cost term of the MAP objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorRecord {
    kind: FactorKind,
    keys: Vec<VariableKey>,
    measurement: Measurement,
    noise: NoiseModel,
}

impl FactorRecord {
    pub fn new(
        kind: FactorKind,
        keys: Vec<VariableKey>,
        measurement: Measurement,
        noise: NoiseModel,
    ) -> Result<Self, FactorError> {
        if !kind.accepts_arity(keys.len()) {
            return Err(FactorError::Arity { kind, expected: kind.arity_label(), got: keys.len() });
        }
        if noise.dim() != kind.residual_dim() {
            return Err(FactorError::DimensionMismatch { kind, expected: kind.residual_dim(), got: noise.dim() });
        }
        let payload_ok = matches!(
            (kind, &measurement),
            (FactorKind::PosePrior | FactorKind::AnchorPrior | FactorKind::Odometry, Measurement::Pose(_))
                | (FactorKind::Orientation, Measurement::Rotation(_))
                | (FactorKind::Depth, Measurement::Depth(_))
                | (FactorKind::Bearing, Measurement::Bearing(_))
        );
        if !payload_ok {
            return Err(FactorError::MeasurementMismatch { kind });
        }
        Ok(Self { kind, keys, measurement, noise })
    }

    pub fn pose_prior(key: VariableKey, prior: Pose3, noise: NoiseModel) -> Result<Self, FactorError> {
        Self::new(FactorKind::PosePrior, vec![key], Measurement::Pose(prior), noise)
    }

    pub fn anchor_prior(key: VariableKey, prior: Pose3, noise: NoiseModel) -> Result<Self, FactorError> {
        Self::new(FactorKind::AnchorPrior, vec![key], Measurement::Pose(prior), noise)
    }

    pub fn odometry(from: VariableKey, to: VariableKey, relative: Pose3, noise: NoiseModel) -> Result<Self, FactorError> {
        Self::new(FactorKind::Odometry, vec![from, to], Measurement::Pose(relative), noise)
    }

    pub fn orientation(
        pose: VariableKey,
        anchor: Option<VariableKey>,
        measured: Rot3,
        noise: NoiseModel,
    ) -> Result<Self, FactorError> {
        let keys = std::iter::once(pose).chain(anchor).collect();
        Self::new(FactorKind::Orientation, keys, Measurement::Rotation(measured), noise)
    }

    pub fn depth(pose: VariableKey, anchor: Option<VariableKey>, depth: f64, noise: NoiseModel) -> Result<Self, FactorError> {
        let keys = std::iter::once(pose).chain(anchor).collect();
        Self::new(FactorKind::Depth, keys, Measurement::Depth(depth), noise)
    }

    /// Keys are `[receiver pose, transmitter pose, receiver anchor, transmitter anchor]`.
    pub fn bearing(
        receiver: VariableKey,
        transmitter: VariableKey,
        receiver_anchor: VariableKey,
        transmitter_anchor: VariableKey,
        measured: BearingMeasurement,
        noise: NoiseModel,
    ) -> Result<Self, FactorError> {
        Self::new(
            FactorKind::Bearing,
            vec![receiver, transmitter, receiver_anchor, transmitter_anchor],
            Measurement::Bearing(measured),
            noise,
        )
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn dim(&self) -> usize {
        self.kind.residual_dim()
    }

    /// Residual for the poses bound to `keys()`, in key order, zero-padded.
    pub fn residual(&self, poses: &[Pose3]) -> Result<Vector6<f64>, FactorError> {
        Ok(self.evaluate(poses, false)?.residual)
    }

    /// Residual and Jacobians for the poses bound to `keys()`, in key order.
    pub fn linearize(&self, poses: &[Pose3]) -> Result<Linearization, FactorError> {
        self.evaluate(poses, true)
    }

    /// `‖e‖²_Σ` at the given poses.
    pub fn cost(&self, poses: &[Pose3]) -> Result<f64, FactorError> {
        Ok(self.noise.mahalanobis_sq(&self.residual(poses)?))
    }

    fn evaluate(&self, poses: &[Pose3], jacobians: bool) -> Result<Linearization, FactorError> {
        debug_assert_eq!(poses.len(), self.keys.len());
        let mut out = Linearization::new(self.dim(), self.keys.len());
        match (self.kind, &self.measurement) {
            (FactorKind::PosePrior | FactorKind::AnchorPrior, Measurement::Pose(p)) => {
                let e = prior_error(&poses[0], p);
                out.residual = e;
                if jacobians {
                    out.jacobians[0] = -se3_left_jacobian_inv(&e);
                }
            }
            (FactorKind::Odometry, Measurement::Pose(u)) => {
                let predicted = poses[0].between(&poses[1]);
                let e = group_error(&predicted, u);
                out.residual = e;
                if jacobians {
                    let jinv = se3_left_jacobian_inv(&e);
                    out.jacobians[0] = jinv * predicted.inverse().adjoint();
                    out.jacobians[1] = -jinv;
                }
            }
            (FactorKind::Orientation, Measurement::Rotation(xi)) => {
                let anchor = poses.get(1);
                let e = orientation_error(&poses[0], anchor, xi);
                out.residual.fixed_rows_mut::<3>(0).copy_from(&e);
                if jacobians {
                    let jinv = so3_left_jacobian_inv(&e);
                    out.jacobians[0].fixed_view_mut::<3, 3>(0, 0).copy_from(&-jinv);
                    if anchor.is_some() {
                        let rx_t = poses[0].rotation().matrix().transpose();
                        out.jacobians[1].fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jinv * rx_t));
                    }
                }
            }
            (FactorKind::Depth, Measurement::Depth(d)) => {
                let anchor = poses.get(1);
                out.residual[0] = depth_error(&poses[0], anchor, *d);
                if jacobians {
                    let ez = RowVector3::new(0.0, 0.0, 1.0);
                    let ra = anchor.map_or_else(Matrix3::identity, |a| *a.rotation().matrix());
                    let rx = poses[0].rotation().matrix();
                    out.jacobians[0].fixed_view_mut::<1, 3>(0, 3).copy_from(&(ez * ra * rx));
                    if anchor.is_some() {
                        let t = poses[0].translation();
                        out.jacobians[1].fixed_view_mut::<1, 3>(0, 0).copy_from(&(-ez * ra * hat(t)));
                        out.jacobians[1].fixed_view_mut::<1, 3>(0, 3).copy_from(&(ez * ra));
                    }
                }
            }
            (FactorKind::Bearing, Measurement::Bearing(c)) => {
                let (rx, tx, arx, atx) = (&poses[0], &poses[1], &poses[2], &poses[3]);
                let g_rx = arx.transform_point(rx.translation());
                let g_tx = atx.transform_point(tx.translation());
                let delta = g_tx - g_rx;
                let (az, el) = bearing_from_offset(&delta)?;
                out.residual[0] = Rot2::from_angle(az).between(&Rot2::from_angle(c.azimuth)).log();
                out.residual[1] = Rot2::from_angle(el).between(&Rot2::from_angle(c.elevation)).log();
                if jacobians {
                    // rows: ∂(α̂, ε̂)/∂δ
                    let grad = bearing_gradient(&delta);
                    // e = measured − predicted, δ = g_tx − g_rx
                    let de_dgtx = -grad;
                    let de_dgrx = grad;
                    let blocks = [
                        (0, de_dgrx, position_wrt_pose(rx, arx)),
                        (1, de_dgtx, position_wrt_pose(tx, atx)),
                        (2, de_dgrx, position_wrt_anchor(rx, arx)),
                        (3, de_dgtx, position_wrt_anchor(tx, atx)),
                    ];
                    for (slot, de_dg, dg) in blocks {
                        out.jacobians[slot].fixed_view_mut::<2, 6>(0, 0).copy_from(&(de_dg * dg));
                    }
                }
            }
            _ => return Err(FactorError::MeasurementMismatch { kind: self.kind }),
        }
        Ok(out)
    }
}

/// Residual and Jacobian blocks of one factor, zero-padded to six rows.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub dim: usize,
    pub arity: usize,
    pub residual: Vector6<f64>,
    pub jacobians: [Matrix6<f64>; 4],
}

impl Linearization {
    fn new(dim: usize, arity: usize) -> Self {
        Self { dim, arity, residual: Vector6::zeros(), jacobians: [Matrix6::zeros(); 4] }
    }
}

/// Residual and Jacobians of `factor` with its variables looked up in `values`.
pub fn factor_jacobian(factor: &FactorRecord, values: &Values) -> Result<Linearization, FactorError> {
    let poses = factor
        .keys()
        .iter()
        .map(|k| values.get(k).copied().ok_or(FactorError::UnboundVariable(*k)))
        .collect::<Result<Vec<_>, _>>()?;
    factor.linearize(&poses)
}

// ---------------------------------------------------------------------------
// Error functions

/// Pose prior: `E(x0, p)`.
pub fn prior_error(x0: &Pose3, prior: &Pose3) -> Tangent6 {
    group_error(x0, prior)
}

/// Anchor prior: `E(Δ, a)`; the same formula as the pose prior.
pub fn anchor_prior_error(anchor: &Pose3, prior: &Pose3) -> Tangent6 {
    group_error(anchor, prior)
}

/// Dead reckoning: `E(x_prev⁻¹ x_next, u)`.
pub fn odometry_error(prev: &Pose3, next: &Pose3, measured: &Pose3) -> Tangent6 {
    group_error(&prev.between(next), measured)
}

/// Orientation: `E(R(Δ·x), ξ)` in SO(3); without an anchor `Δ = I`.
pub fn orientation_error(x: &Pose3, anchor: Option<&Pose3>, measured: &Rot3) -> Vector3<f64> {
    let predicted = match anchor {
        Some(a) => *a.rotation() * *x.rotation(),
        None => *x.rotation(),
    };
    group_error(&predicted, measured)
}

/// Depth: predicted z minus measured depth (z up, depth negative).
pub fn depth_error(x: &Pose3, anchor: Option<&Pose3>, depth: f64) -> f64 {
    let z = match anchor {
        Some(a) => a.transform_point(x.translation()).z,
        None => x.translation().z,
    };
    z - depth
}

/// Azimuth and elevation of the transmitter as seen from the receiver, both
/// given in the global frame.
///
/// Azimuth uses the four-quadrant arctangent; elevation is measured from +z.
/// Directly above or below the receiver the azimuth is reported as 0.
pub fn predict_bearing(receiver_global: &Pose3, transmitter_global: &Pose3) -> Result<(f64, f64), FactorError> {
    bearing_from_offset(&(transmitter_global.translation() - receiver_global.translation()))
}

fn bearing_from_offset(delta: &Vector3<f64>) -> Result<(f64, f64), FactorError> {
    let r = delta.norm();
    if !(r > 0.0) || !r.is_finite() {
        return Err(FactorError::DegenerateGeometry);
    }
    let horizontal = delta.x.hypot(delta.y);
    let azimuth = if horizontal < VERTICAL_EPS { 0.0 } else { wrap_angle(delta.y.atan2(delta.x)) };
    let elevation = (delta.z / r).clamp(-1.0, 1.0).acos();
    Ok((azimuth, elevation))
}

/// `∂(α̂, ε̂)/∂δ`; both rows vanish on the vertical axis, where neither angle
/// is differentiable.
fn bearing_gradient(delta: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let rho2 = delta.x * delta.x + delta.y * delta.y;
    let rho = rho2.sqrt();
    if rho < VERTICAL_EPS {
        return nalgebra::Matrix2x3::zeros();
    }
    let r2 = rho2 + delta.z * delta.z;
    let k = 1.0 / (rho * r2);
    nalgebra::Matrix2x3::new(
        -delta.y / rho2,
        delta.x / rho2,
        0.0,
        delta.x * delta.z * k,
        delta.y * delta.z * k,
        -rho2 * k,
    )
}

/// `∂(Δ·t_x)/∂δ_x` for a right perturbation of the local pose.
fn position_wrt_pose(x: &Pose3, anchor: &Pose3) -> nalgebra::Matrix3x6<f64> {
    let mut out = nalgebra::Matrix3x6::zeros();
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(anchor.rotation().matrix() * x.rotation().matrix()));
    out
}

/// `∂(Δ·t_x)/∂δ_Δ` for a right perturbation of the anchor.
fn position_wrt_anchor(x: &Pose3, anchor: &Pose3) -> nalgebra::Matrix3x6<f64> {
    let ra = anchor.rotation().matrix();
    let mut out = nalgebra::Matrix3x6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-ra * hat(x.translation())));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(ra);
    out
}

/// Inter-robot bearing residual: per angle `ln(R_β̂ᵀ R_β)`, each in `(-π, π]`.
///
/// Both local poses are first mapped to the global frame through their anchors.
pub fn bearing_error(
    receiver: &Pose3,
    transmitter: &Pose3,
    receiver_anchor: &Pose3,
    transmitter_anchor: &Pose3,
    measured: &BearingMeasurement,
) -> Result<Vector2<f64>, FactorError> {
    let (az, el) = predict_bearing(&(*receiver_anchor * *receiver), &(*transmitter_anchor * *transmitter))?;
    Ok(Vector2::new(
        group_error(&Rot2::from_angle(az), &Rot2::from_angle(measured.azimuth)),
        group_error(&Rot2::from_angle(el), &Rot2::from_angle(measured.elevation)),
    ))
}
