//! Golden frames and roundtrip bounds for the acoustic codec.

use std::f64::consts::{PI, TAU};

use bedd::acoustic::{decode, encode, AcousticMessage};
use bedd::liegroups::{wrap_angle, Pose3, Rot3};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GOLDEN: &str = include_str!("../data/golden_frames.hex");

type Spec = (u8, u8, f64, [f64; 3], [f64; 3], [f64; 6]);

/// Mirrors the messages in `data/golden_frames.py`.
pub const MESSAGES: [Spec; 5] = [
    (0, 0, 0.0, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1e-3; 6]),
    (1, 7, -12.3451, [103.2171, -48.0049, -12.3451], [0.1, -0.2, 1.3], [0.01, 0.012, 0.05, 0.5, 0.7, 0.2]),
    (4, 255, -250.0, [-1999.991, 3210.4563, -250.0], [-3.0, 1.2, -2.9], [2.0, 0.3, 0.0004, 12.0, 3000.0, 1.0]),
    (2, 42, 3.2174, [0.0049, -0.0049, 3.2174], [0.7, 0.0, 3.1], [0.1; 6]),
    (3, 128, -8000.1234, [21474.83, -21474.83, -8000.1234], [-0.5, -1.5, 0.25], [0.031, 0.032, 0.033, 4.1, 4.2, 4.3]),
];

pub fn message((sender, sequence, depth, t, e, sigmas): Spec) -> AcousticMessage {
    AcousticMessage {
        sender,
        sequence,
        depth,
        pose: Pose3::new(Rot3::from_euler(e[0], e[1], e[2]), Vector3::from(t)),
        sigmas,
    }
}

pub fn hex(frame: &[u8]) -> String {
    frame.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unhex(line: &str) -> Vec<u8> {
    (0..line.len()).step_by(2).map(|i| u8::from_str_radix(&line[i..i + 2], 16).unwrap()).collect()
}

/// Number of golden messages whose encoding differs from the stored bytes.
pub fn golden_mismatches() -> usize {
    let lines: Vec<&str> = GOLDEN.lines().collect();
    assert_eq!(lines.len(), MESSAGES.len());
    MESSAGES.into_iter().zip(lines).filter(|(spec, line)| encode(&message(*spec)).map(|f| hex(&f)).ok().as_deref() != Some(*line)).count()
}

pub fn random_message(rng: &mut ChaCha8Rng) -> AcousticMessage {
    let t = Vector3::from_fn(|_, _| rng.random_range(-5000.0..5000.0));
    let r = Rot3::from_euler(rng.random_range(-PI..PI), rng.random_range(-1.5..1.5), rng.random_range(-PI..PI));
    AcousticMessage {
        sender: rng.random(),
        sequence: rng.random(),
        depth: rng.random_range(-8000.0..8000.0),
        pose: Pose3::new(r, t),
        sigmas: std::array::from_fn(|_| 10f64.powf(rng.random_range(-3.0..3.3))),
    }
}

/// Why a roundtrip left its quantisation bounds, if it did.
pub fn roundtrip_violation(m: &AcousticMessage) -> Option<String> {
    let frame = match encode(m) {
        Ok(f) => f,
        Err(e) => return Some(format!("encode: {e}")),
    };
    let d = match decode(&frame) {
        Ok(d) => d,
        Err(e) => return Some(format!("decode: {e}")),
    };
    if (d.sender, d.sequence) != (m.sender, m.sequence) {
        return Some("header".into());
    }
    if (d.depth - m.depth).abs() > 5e-4 + 1e-9 {
        return Some(format!("depth {} vs {}", d.depth, m.depth));
    }
    if (d.pose.translation() - m.pose.translation()).amax() > 5e-3 + 1e-9 {
        return Some("position".into());
    }
    let (a, b) = (m.pose.rotation().euler(), d.pose.rotation().euler());
    for (x, y) in [(a.0, b.0), (a.1, b.1), (a.2, b.2)] {
        if wrap_angle(x - y).abs() > TAU / 65536.0 / 2.0 + 1e-9 {
            return Some(format!("angle {x} vs {y}"));
        }
    }
    for (s, q) in m.sigmas.iter().zip(d.sigmas) {
        // half a byte step in log10 space
        if (s.log10() - q.log10()).abs() > 1.0 / 80.0 + 1e-12 {
            return Some(format!("sigma {s} vs {q}"));
        }
    }
    // re-encoding a decoded frame is a fixed point
    (encode(&d).ok() != Some(frame)).then(|| "re-encode".into())
}

/// Seeded roundtrips; returns the first violation.
pub fn roundtrips(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        if let Some(why) = roundtrip_violation(&random_message(&mut rng)) {
            return Err(format!("roundtrip {i}: {why}"));
        }
    }
    Ok(())
}
