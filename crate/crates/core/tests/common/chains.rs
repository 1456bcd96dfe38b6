//! Seeded odometry chains for the origin-state checks.

use bedd::liegroups::{group_error, LieGroup, Pose3, Rot3, Tangent6};
use bedd::osm::{compound_covariance, decompose, recover_covariance, ChainSummary, CovarianceMode};
use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const MC_SAMPLES: usize = 100_000;
pub const FIRST_ORDER_TOL: f64 = 0.15;
pub const COMPOUND_TOL: f64 = 0.10;
pub const DROPOUT_TOL: f64 = 1e-9;

pub fn random_step(rng: &mut ChaCha8Rng) -> Pose3 {
    let w = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.4..0.4));
    let t = Vector3::new(rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
    Pose3::new(Rot3::exp(&w), t)
}

pub fn summary(index: u32, transform: Pose3, covariance: Matrix6<f64>) -> ChainSummary {
    ChainSummary { sender: 2, index, transform, covariance, orientation: Rot3::identity(), depth: 0.0 }
}

/// Five summaries taken every few steps along a seeded chain.
pub fn five_summaries(seed: u64) -> Vec<ChainSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Pose3::new(Rot3::from_euler(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, -3.0));
    let mut out = Vec::new();
    for s in 0..5u32 {
        for _ in 0..rng.random_range(1..6) {
            x = x * random_step(&mut rng);
        }
        out.push(summary(3 * s + 1, x, Matrix6::identity() * (s + 1) as f64));
    }
    out
}

/// What a receiver reconstructs: the first delivered summary bootstraps the
/// remote pose, every later one contributes a decomposed link.
pub fn reconstruct(delivered: &[&ChainSummary]) -> Pose3 {
    let mut x = delivered[0].transform;
    for pair in delivered.windows(2) {
        x = x * decompose(pair[0], pair[1], CovarianceMode::FirstOrder).unwrap().relative;
    }
    x
}

/// Largest gap over every non-empty delivered subset of a five-summary chain,
/// both for the reconstructed ToL pose and for the first-to-last link.
pub fn dropout_worst_gap(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let chain = five_summaries(seed);
        for mask in 1u32..32 {
            let delivered: Vec<&ChainSummary> = (0..5).filter(|i| mask & (1 << i) != 0).map(|i| &chain[i]).collect();
            let first = delivered[0];
            let last = delivered[delivered.len() - 1];
            let rebuilt = reconstruct(&delivered);
            let relative = first.transform.inverse() * rebuilt;
            let direct = first.transform.between(&last.transform);
            worst = worst.max(group_error(&rebuilt, &last.transform).amax()).max(group_error(&relative, &direct).amax());
        }
    }
    worst
}

fn sample_cov(samples: &[Tangent6]) -> Matrix6<f64> {
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Tangent6::zeros(), |a, s| a + s) / n;
    samples.iter().fold(Matrix6::zeros(), |a, s| a + (s - mean) * (s - mean).transpose()) / (n - 1.0)
}

fn frobenius_rel(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Chain with right-perturbed noisy increments.
pub struct NoisyChain {
    steps: Vec<Pose3>,
    step_cov: Matrix6<f64>,
    sigmas: Vector6<f64>,
}

impl NoisyChain {
    /// Rotation σ in [0.02, 0.05) rad, translation σ in [0.05, 0.2) m.
    pub fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let rot = rng.random_range(0.02..0.05);
        let trans = rng.random_range(0.05..0.2);
        let sigmas = Vector6::new(rot, rot, rot, trans, trans, trans);
        Self { steps: (0..n).map(|_| random_step(rng)).collect(), step_cov: Matrix6::from_diagonal(&sigmas.component_mul(&sigmas)), sigmas }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Vec<Pose3> {
        let mut x = Pose3::identity();
        let mut out = vec![x];
        for u in &self.steps {
            let eta = Tangent6::from_fn(|i, _| normal.sample(rng) * self.sigmas[i]);
            x = x * u.retract(&eta);
            out.push(x);
        }
        out
    }

    pub fn nominal(&self) -> Vec<Pose3> {
        let mut x = Pose3::identity();
        let mut out = vec![x];
        for u in &self.steps {
            x = x * *u;
            out.push(x);
        }
        out
    }

    /// First-order left-tangent covariance of every chain pose.
    pub fn propagated(&self) -> Vec<Matrix6<f64>> {
        let nominal = self.nominal();
        let mut cov = Matrix6::zeros();
        let mut out = vec![cov];
        for (i, u) in self.steps.iter().enumerate() {
            // a right-perturbed increment has left covariance Ad(u)·Σ·Ad(u)ᵀ
            let ad = u.adjoint();
            cov = compound_covariance(&cov, &(ad * self.step_cov * ad.transpose()), &nominal[i]);
            out.push(cov);
        }
        out
    }
}

/// Relative Frobenius gap between first-order recovery of the link 2 → 6 and
/// its Monte Carlo covariance, one entry per seed.
pub fn first_order_gaps(seeds: std::ops::Range<u64>) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    seeds
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let chain = NoisyChain::new(&mut rng, 6);
            let nominal = chain.nominal();
            let (j, k) = (2usize, 6usize);
            let z_bar = nominal[j].between(&nominal[k]);
            let samples: Vec<Tangent6> = (0..MC_SAMPLES)
                .map(|_| {
                    let xs = chain.sample(&mut rng, &normal);
                    // z = exp(η)·z̄
                    (xs[j].between(&xs[k]) * z_bar.inverse()).log()
                })
                .collect();
            let prop = chain.propagated();
            let recovered = recover_covariance(
                &summary(j as u32, nominal[j], prop[j]),
                &summary(k as u32, nominal[k], prop[k]),
                CovarianceMode::FirstOrder,
            );
            frobenius_rel(&recovered, &sample_cov(&samples))
        })
        .collect()
}

/// Relative Frobenius gap between compounded and Monte Carlo covariance of
/// the chain's end pose, one entry per seed.
pub fn compound_gaps(seeds: std::ops::Range<u64>) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    seeds
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let chain = NoisyChain::new(&mut rng, 6);
            let last = chain.nominal()[6];
            let samples: Vec<Tangent6> =
                (0..MC_SAMPLES).map(|_| (chain.sample(&mut rng, &normal)[6] * last.inverse()).log()).collect();
            frobenius_rel(&chain.propagated()[6], &sample_cov(&samples))
        })
        .collect()
}
