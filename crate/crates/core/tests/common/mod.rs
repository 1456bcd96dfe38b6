//! Shared fixtures: small multi-robot graphs and a dense Gauss-Newton oracle
//! that never touches the analytic Jacobians.
#![allow(dead_code)]

pub mod chains;
pub mod codec;
pub mod jacobians;
pub mod scenarios;

use std::collections::BTreeMap;

use bedd::factors::{predict_bearing, BearingMeasurement, FactorKind, FactorRecord, NoiseModel};
use bedd::liegroups::{wrap_angle, LieGroup, Pose3, Rot3, Tangent6};
use bedd::solver::{FactorGraph, VariableKey};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn jitter(rng: &mut ChaCha8Rng, x: &Pose3, rot: f64, trans: f64) -> Pose3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let d = Tangent6::from_fn(|i, _| n.sample(rng) * if i < 3 { rot } else { trans });
    x.retract(&d)
}

/// `robots` robots with `poses` poses each; every sensor type represented.
pub fn build(seed: u64, robots: u8, poses: u32) -> (FactorGraph, BTreeMap<VariableKey, Pose3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = FactorGraph::new();
    let mut truth = BTreeMap::new();
    let odo = NoiseModel::from_sigmas(&[0.01, 0.01, 0.01, 0.05, 0.05, 0.05]).unwrap();
    let att = NoiseModel::isotropic(3, 0.02).unwrap();
    let dep = NoiseModel::isotropic(1, 0.1).unwrap();
    let brg = NoiseModel::isotropic(2, 0.05).unwrap();
    for r in 0..robots {
        let anchor = Pose3::new(Rot3::identity(), Vector3::new(30.0 * r as f64, -10.0 * r as f64, 0.0));
        let a_key = VariableKey::anchor(r);
        truth.insert(a_key, anchor);
        let (sig, init) = if r == 0 { (1e-4, anchor) } else { (5.0, jitter(&mut rng, &anchor, 0.0, 3.0)) };
        g.add_variable(a_key, init).unwrap();
        let prior_noise = NoiseModel::from_sigmas(&[0.5, 0.5, 0.5, sig, sig, sig]).unwrap();
        g.add_factor(FactorRecord::anchor_prior(a_key, anchor, prior_noise).unwrap()).unwrap();
        let mut x = Pose3::new(Rot3::from_euler(0.05, -0.03, 0.4 * r as f64), Vector3::new(0.0, 0.0, -5.0 * r as f64));
        for i in 0..poses {
            let key = VariableKey::pose(r, i);
            truth.insert(key, x);
            g.add_variable(key, jitter(&mut rng, &x, 0.05, 0.5)).unwrap();
            if i == 0 {
                let n = NoiseModel::from_sigmas(&[0.01, 0.01, 0.01, 0.01, 0.01, 0.01]).unwrap();
                g.add_factor(FactorRecord::pose_prior(key, x, n).unwrap()).unwrap();
            }
            let global = anchor * x;
            g.add_factor(FactorRecord::orientation(key, Some(a_key), *global.rotation(), att.clone()).unwrap()).unwrap();
            g.add_factor(FactorRecord::depth(key, Some(a_key), global.translation().z, dep.clone()).unwrap()).unwrap();
            let u = Pose3::new(Rot3::from_euler(0.01, 0.02, 0.1), Vector3::new(2.0, 0.3, -0.2));
            if i > 0 {
                let k0 = VariableKey::pose(r, i - 1);
                g.add_factor(FactorRecord::odometry(k0, key, jitter(&mut rng, &u, 0.005, 0.02), odo.clone()).unwrap())
                    .unwrap();
            }
            x = x * u;
        }
    }
    let pairs = [(0u8, 1u8, 1u32, 2u32), (1, 2, 3, 0), (2, 0, 2, 3), (0, 2, 3, 1), (1, 0, 0, 3), (1, 0, 1, 1)];
    for (rx, tx, i, j) in pairs.into_iter().filter(|&(a, b, i, j)| a < robots && b < robots && i < poses && j < poses) {
        let (xr, xt) = (VariableKey::pose(rx, i), VariableKey::pose(tx, j));
        let (ar, at) = (VariableKey::anchor(rx), VariableKey::anchor(tx));
        let (az, el) = predict_bearing(&(truth[&ar] * truth[&xr]), &(truth[&at] * truth[&xt])).unwrap();
        let c = BearingMeasurement {
            azimuth: wrap_angle(az + rng.random_range(-0.02..0.02)),
            elevation: el + rng.random_range(-0.02..0.02),
            transmitter: tx,
            receiver: rx,
        };
        g.add_factor(FactorRecord::bearing(xr, xt, ar, at, c, brg.clone()).unwrap()).unwrap();
    }
    (g, truth)
}

/// Whitened stacked residual with bearing angles already wrapped.
pub fn stacked(g: &FactorGraph, values: &BTreeMap<VariableKey, Pose3>) -> DVector<f64> {
    let mut out = Vec::new();
    for f in g.factors() {
        let poses: Vec<Pose3> = f.keys().iter().map(|k| values[k]).collect();
        let r = f.noise().whiten(&f.residual(&poses).unwrap());
        out.extend(r.iter().take(f.dim()));
    }
    DVector::from_vec(out)
}

/// `a − b` with bearing rows wrapped to (−π, π] in unwhitened units.
fn wrapped_diff(g: &FactorGraph, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut d = a - b;
    let mut row = 0;
    for f in g.factors() {
        if f.kind() == FactorKind::Bearing {
            let w = f.noise().sqrt_information();
            for i in 0..2 {
                d[row + i] = wrap_angle(d[row + i] / w[(i, i)]) * w[(i, i)];
            }
        }
        row += f.dim();
    }
    d
}

pub fn numeric_jacobian(g: &FactorGraph, values: &BTreeMap<VariableKey, Pose3>, keys: &[VariableKey]) -> DMatrix<f64> {
    let h = 3e-3;
    let centre = stacked(g, values);
    let mut j = DMatrix::zeros(centre.len(), 6 * keys.len());
    for (v, key) in keys.iter().enumerate() {
        for c in 0..6 {
            let mut d = Tangent6::zeros();
            d[c] = h;
            let at = |scale: f64| {
                let mut moved = values.clone();
                moved.insert(*key, values[key].retract(&(d * scale)));
                wrapped_diff(g, &stacked(g, &moved), &centre)
            };
            // fourth-order central stencil
            let col = (at(-2.0) - at(2.0)) + (at(1.0) - at(-1.0)) * 8.0;
            j.set_column(6 * v + c, &(col / (12.0 * h)));
        }
    }
    j
}

pub fn dense_gauss_newton(g: &FactorGraph) -> (BTreeMap<VariableKey, Pose3>, DMatrix<f64>) {
    let mut values: BTreeMap<VariableKey, Pose3> = g.values();
    let keys: Vec<VariableKey> = values.keys().copied().collect();
    for _ in 0..50 {
        let r = stacked(g, &values);
        let j = numeric_jacobian(g, &values, &keys);
        let h = j.transpose() * &j;
        let step = h.cholesky().unwrap().solve(&(-j.transpose() * r));
        for (v, key) in keys.iter().enumerate() {
            let d = Tangent6::from_iterator(step.rows(6 * v, 6).iter().copied());
            values.insert(*key, values[key].retract(&d));
        }
        if step.amax() < 1e-14 {
            break;
        }
    }
    let j = numeric_jacobian(g, &values, &keys);
    let cov = (j.transpose() * &j).try_inverse().unwrap();
    (values, cov)
}


/// LM parameters that run to the limit of floating point precision.
pub fn tight_params() -> bedd::solver::LmParams {
    bedd::solver::LmParams {
        relative_tolerance: 0.0,
        gradient_tolerance: 1e-13,
        step_tolerance: 1e-14,
        ..Default::default()
    }
}

/// Largest absolute state gap (tangent components) and largest relative
/// marginal-covariance gap between the solver and the dense oracle.
pub fn oracle_gap(g: &mut FactorGraph) -> (f64, f64) {
    let (oracle, oracle_cov) = dense_gauss_newton(g);
    let report = g.optimize(&tight_params()).unwrap();
    assert!(!report.diverged(), "{report:?}");
    let mut state_gap: f64 = 0.0;
    let mut cov_gap: f64 = 0.0;
    for (v, (k, expect)) in oracle.iter().enumerate() {
        let got = g.value(k).unwrap();
        state_gap = state_gap.max(bedd::liegroups::group_error(got, expect).amax());
        let expect_cov = oracle_cov.view((6 * v, 6 * v), (6, 6));
        let got_cov = g.marginal_covariance(k).unwrap();
        cov_gap = cov_gap.max((got_cov - expect_cov).amax() / expect_cov.amax());
    }
    (state_gap, cov_gap)
}

/// The small graphs used for oracle comparisons, each with at most ten variables.
pub fn oracle_graphs() -> Vec<(String, FactorGraph)> {
    let mut out = Vec::new();
    for seed in 0..4 {
        for (robots, poses) in [(2u8, 4u32), (3, 2), (1, 9)] {
            let (g, _) = build(seed, robots, poses);
            assert!(g.num_variables() <= 10);
            out.push((format!("seed {seed}, {robots}x{poses}"), g));
        }
    }
    out
}
