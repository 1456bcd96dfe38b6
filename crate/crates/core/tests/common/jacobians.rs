//! Analytic factor Jacobians against central finite differences.

use bedd::factors::{BearingMeasurement, FactorKind, FactorRecord, NoiseModel};
use bedd::liegroups::{wrap_angle, LieGroup, Pose3, Rot3, Tangent6};
use bedd::solver::VariableKey;
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tangent step of the central differences.
pub const STEP: f64 = 1e-6;
/// Largest accepted relative Frobenius error.
pub const TOL: f64 = 1e-5;
/// Configurations per factor type.
pub const CONFIGS: usize = 100;

pub const KINDS: [FactorKind; 6] = [
    FactorKind::PosePrior,
    FactorKind::AnchorPrior,
    FactorKind::Odometry,
    FactorKind::Orientation,
    FactorKind::Depth,
    FactorKind::Bearing,
];

fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose3 {
    let w = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 1.2;
    let t = Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
    Pose3::new(Rot3::exp(&w), t)
}

fn random_rot(rng: &mut ChaCha8Rng) -> Rot3 {
    Rot3::exp(&(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * 1.2))
}

pub fn bearing_keys() -> [VariableKey; 4] {
    [VariableKey::pose(0, 0), VariableKey::pose(1, 0), VariableKey::anchor(0), VariableKey::anchor(1)]
}

fn residual_diff(kind: FactorKind, a: &Tangent6, b: &Tangent6) -> Tangent6 {
    let mut d = a - b;
    if kind == FactorKind::Bearing {
        d[0] = wrap_angle(d[0]);
        d[1] = wrap_angle(d[1]);
    }
    d
}

/// Largest relative error over the factor's Jacobian blocks; infinite if a
/// padding row is non-zero.
pub fn jacobian_error(factor: &FactorRecord, poses: &[Pose3]) -> f64 {
    let dim = factor.dim();
    let lin = factor.linearize(poses).unwrap();
    let mut worst: f64 = 0.0;
    for (slot, analytic) in lin.jacobians.iter().take(poses.len()).enumerate() {
        let mut numeric = DMatrix::zeros(dim, 6);
        for c in 0..6 {
            let mut delta = Tangent6::zeros();
            delta[c] = STEP;
            let mut plus = poses.to_vec();
            let mut minus = poses.to_vec();
            plus[slot] = poses[slot].retract(&delta);
            minus[slot] = poses[slot].retract(&-delta);
            let d = residual_diff(factor.kind(), &factor.residual(&plus).unwrap(), &factor.residual(&minus).unwrap());
            for r in 0..dim {
                numeric[(r, c)] = d[r] / (2.0 * STEP);
            }
        }
        let block = analytic.view((0, 0), (dim, 6)).into_owned();
        worst = worst.max((&block - &numeric).norm() / block.norm().max(1.0));
        if (dim..6).any(|r| analytic.row(r).iter().any(|v| *v != 0.0)) {
            return f64::INFINITY;
        }
    }
    worst
}

/// Worst error over [`CONFIGS`] seeded configurations of one factor type.
/// Orientation and depth are checked both with and without an anchor.
pub fn worst_case(kind: FactorKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + kind as u64);
    let unit = |d| NoiseModel::isotropic(d, 1.0).unwrap();
    let (x0, x1, a1) = (VariableKey::pose(0, 0), VariableKey::pose(0, 1), VariableKey::anchor(1));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < CONFIGS {
        let e = match kind {
            FactorKind::PosePrior => {
                let f = FactorRecord::pose_prior(x0, random_pose(&mut rng, 10.0), unit(6)).unwrap();
                jacobian_error(&f, &[random_pose(&mut rng, 10.0)])
            }
            FactorKind::AnchorPrior => {
                let f = FactorRecord::anchor_prior(a1, random_pose(&mut rng, 100.0), unit(6)).unwrap();
                jacobian_error(&f, &[random_pose(&mut rng, 100.0)])
            }
            FactorKind::Odometry => {
                let f = FactorRecord::odometry(x0, x1, random_pose(&mut rng, 3.0), unit(6)).unwrap();
                jacobian_error(&f, &[random_pose(&mut rng, 10.0), random_pose(&mut rng, 10.0)])
            }
            FactorKind::Orientation => {
                let xi = random_rot(&mut rng);
                let anchored = FactorRecord::orientation(x0, Some(a1), xi, unit(3)).unwrap();
                let single = FactorRecord::orientation(x0, None, xi, unit(3)).unwrap();
                jacobian_error(&anchored, &[random_pose(&mut rng, 10.0), random_pose(&mut rng, 10.0)])
                    .max(jacobian_error(&single, &[random_pose(&mut rng, 10.0)]))
            }
            FactorKind::Depth => {
                let d = rng.random_range(-50.0..0.0);
                let anchored = FactorRecord::depth(x0, Some(a1), d, unit(1)).unwrap();
                let single = FactorRecord::depth(x0, None, d, unit(1)).unwrap();
                jacobian_error(&anchored, &[random_pose(&mut rng, 10.0), random_pose(&mut rng, 10.0)])
                    .max(jacobian_error(&single, &[random_pose(&mut rng, 10.0)]))
            }
            FactorKind::Bearing => {
                let poses: [Pose3; 4] = std::array::from_fn(|_| random_pose(&mut rng, 20.0));
                let d = poses[3].transform_point(poses[1].translation()) - poses[2].transform_point(poses[0].translation());
                // keep away from the vertical axis, where azimuth is not differentiable
                if d.x.hypot(d.y) < 1.0 {
                    continue;
                }
                let c = BearingMeasurement {
                    azimuth: rng.random_range(-3.1..3.1),
                    elevation: rng.random_range(0.0..3.1),
                    transmitter: 1,
                    receiver: 0,
                };
                let k = bearing_keys();
                jacobian_error(&FactorRecord::bearing(k[0], k[1], k[2], k[3], c, unit(2)).unwrap(), &poses)
            }
        };
        worst = worst.max(e);
        checked += 1;
    }
    worst
}
