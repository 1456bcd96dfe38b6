//! Fleet scenarios with known answers.

use bedd::fleetsim::{RunOutput, ScenarioConfig, SensorNoise, Transport};

/// Five robots, 600 steps, exact sensors and bearings, half the frames lost.
pub fn noiseless(transport: Transport) -> ScenarioConfig {
    let mut cfg = ScenarioConfig { transport, ..Default::default() };
    cfg.noise = SensorNoise::zero();
    cfg.channel.dropout = 0.5;
    cfg.channel.bearing_sigma_deg = 0.0;
    cfg.channel.outlier_probability = 0.0;
    cfg.anchors.guess_sigma = 0.0;
    cfg
}

/// Largest position error over every estimate, and the number of estimates.
pub fn worst_error(out: &RunOutput) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for per_agent in &out.estimates {
        for (robot, track) in per_agent.iter().enumerate() {
            for (step, est) in track.iter().enumerate() {
                if let Some(p) = est {
                    worst = worst.max((p - out.truth.pose(robot, step as u32).translation()).norm());
                    count += 1;
                }
            }
        }
    }
    (worst, count)
}

/// Whether every agent holds at least one estimate of every robot.
pub fn sees_whole_fleet(out: &RunOutput) -> bool {
    out.estimates.iter().all(|per_agent| per_agent.iter().all(|track| track.iter().any(Option::is_some)))
}
