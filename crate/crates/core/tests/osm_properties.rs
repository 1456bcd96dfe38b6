//! Origin-state reconstruction and covariance recovery.

mod common;

use bedd::liegroups::{group_error, LieGroup, Pose3, Rot3};
use bedd::osm::{decompose, recover_covariance, ChainSummary, CovarianceMode};
use common::chains::{
    compound_gaps, dropout_worst_gap, first_order_gaps, random_step, reconstruct, summary, COMPOUND_TOL, DROPOUT_TOL,
    FIRST_ORDER_TOL,
};
use nalgebra::{Matrix6, SymmetricEigen, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_dropout_pattern_reconstructs_the_chain() {
    let gap = dropout_worst_gap(0..5);
    assert!(gap < DROPOUT_TOL, "{gap:e}");
}

#[test]
fn noiseless_chain_decomposes_into_its_own_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let steps: Vec<Pose3> = (0..20).map(|_| random_step(&mut rng)).collect();
    let mut x = Pose3::identity();
    let mut summaries = vec![summary(0, x, Matrix6::zeros())];
    for (i, u) in steps.iter().enumerate() {
        x = x * *u;
        summaries.push(summary(i as u32 + 1, x, Matrix6::zeros()));
    }
    let refs: Vec<&ChainSummary> = summaries.iter().collect();
    assert!(group_error(&reconstruct(&refs), &x).amax() < 1e-9);
    for (pair, u) in summaries.windows(2).zip(&steps) {
        let z = decompose(&pair[0], &pair[1], CovarianceMode::default()).unwrap().relative;
        assert!(group_error(&z, u).amax() < 1e-12);
    }
}

#[test]
fn first_order_recovery_matches_monte_carlo() {
    for (seed, gap) in first_order_gaps(0..10).into_iter().enumerate() {
        assert!(gap < FIRST_ORDER_TOL, "seed {seed}: {gap}");
    }
}

#[test]
fn compound_covariance_matches_monte_carlo() {
    for (seed, gap) in compound_gaps(0..10).into_iter().enumerate() {
        assert!(gap < COMPOUND_TOL, "seed {seed}: {gap}");
    }
}

fn arb_pose() -> impl Strategy<Value = Pose3> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-50.0..50.0f64))
        .prop_map(|(w, t)| Pose3::new(Rot3::exp(&Vector3::from(w)), Vector3::from(t)))
}

fn arb_cov() -> impl Strategy<Value = Matrix6<f64>> {
    prop::collection::vec(-1.0..1.0f64, 36).prop_map(|v| {
        let a = Matrix6::from_column_slice(&v);
        a * a.transpose()
    })
}

proptest! {
    #[test]
    fn recovered_covariance_is_always_psd(a in arb_pose(), b in arb_pose(), ca in arb_cov(), cb in arb_cov()) {
        let out = recover_covariance(&summary(1, a, ca), &summary(2, b, cb), CovarianceMode::FirstOrder);
        prop_assert!((out - out.transpose()).amax() <= 1e-12 * out.amax().max(1.0));
        let eig = SymmetricEigen::new(out);
        let floor = -1e-12 * out.amax().max(1.0);
        prop_assert!(eig.eigenvalues.iter().all(|v| *v >= floor));
    }

    #[test]
    fn tuned_covariance_scales_with_span(a in arb_pose(), j in 0u32..1000, span in 1u32..200) {
        let mode = CovarianceMode::Tuned { rotation_sigma: 0.005, translation_sigma: 0.02 };
        let out = recover_covariance(&summary(j, a, Matrix6::zeros()), &summary(j + span, a, Matrix6::zeros()), mode);
        prop_assert!((out[(0, 0)] - 2.5e-5 * span as f64).abs() < 1e-15 * span as f64);
        prop_assert!((out[(5, 5)] - 4e-4 * span as f64).abs() < 1e-15 * span as f64);
    }
}
