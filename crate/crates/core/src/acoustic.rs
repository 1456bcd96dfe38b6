//! Acoustic broadcast: a 31-byte message frame and a lossy bearing channel.
//!
//! Frame layout, big-endian:
//!
//! | bytes  | field                                        |
//! |--------|----------------------------------------------|
//! | 0      | sender id                                    |
//! | 1      | sequence number                              |
//! | 2..5   | depth, i24 millimetres                       |
//! | 5..17  | position x, y, z, i32 centimetres            |
//! | 17..23 | roll, pitch, yaw, i16 in units of 2π/65536   |
//! | 23..29 | six σ bytes, `v = round(40·(log10 σ + 3))`   |
//! | 29..31 | CRC-16/CCITT-FALSE over bytes 0..29          |

use std::f64::consts::{PI, TAU};

use crc::{Crc, CRC_16_IBM_3740};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::factors::predict_bearing;
use nalgebra::{Matrix6, Vector6};

use crate::liegroups::{wrap_angle, LieGroup, Pose3, Rot3};
use crate::osm::ChainSummary;

pub const FRAME_LEN: usize = 31;
pub type Frame = [u8; FRAME_LEN];

const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);
const I24_MAX: i64 = (1 << 23) - 1;
const ANGLE_UNITS: f64 = 65536.0 / TAU;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("encode overflow: {0} out of range")]
    EncodeOverflow(&'static str),
    #[error("bad frame length {0}, expected 31")]
    BadLength(usize),
    #[error("corrupt frame: CRC mismatch")]
    CorruptFrame,
}

/// Payload of one broadcast.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticMessage {
    pub sender: u8,
    pub sequence: u8,
    /// Metres, z up.
    pub depth: f64,
    /// Origin-to-ToL transform of the sender's chain.
    pub pose: Pose3,
    /// Standard deviations of the pose marginal in its body tangent,
    /// `(roll, pitch, yaw axes, x, y, z)`.
    pub sigmas: [f64; 6],
}

impl AcousticMessage {
    /// Packs a chain summary; σ are taken from the right-tangent marginal.
    pub fn from_summary(summary: &ChainSummary, sequence: u8) -> Self {
        let inv = summary.transform.inverse().adjoint();
        let right = inv * summary.covariance * inv.transpose();
        Self {
            sender: summary.sender,
            sequence,
            depth: summary.depth,
            pose: summary.transform,
            sigmas: std::array::from_fn(|i| right[(i, i)].max(0.0).sqrt()),
        }
    }

    /// Unpacks into a summary for ToL pose `index`.
    ///
    /// The frame has one rotation field, so the forwarded orientation is the
    /// rotation of the transmitted pose. The covariance is diagonal in the
    /// right tangent.
    pub fn to_summary(&self, index: u32) -> ChainSummary {
        let ad = self.pose.adjoint();
        let right = Matrix6::from_diagonal(&Vector6::from_fn(|i, _| self.sigmas[i] * self.sigmas[i]));
        ChainSummary {
            sender: self.sender,
            index,
            transform: self.pose,
            covariance: ad * right * ad.transpose(),
            orientation: *self.pose.rotation(),
            depth: self.depth,
        }
    }
}

pub fn crc16(bytes: &[u8]) -> u16 {
    CRC16.checksum(bytes)
}

fn quantize(value: f64, scale: f64, max: i64, field: &'static str) -> Result<i64, CodecError> {
    let q = (value * scale).round();
    if !q.is_finite() || q.abs() > max as f64 {
        return Err(CodecError::EncodeOverflow(field));
    }
    Ok(q as i64)
}

fn angle_to_i16(angle: f64) -> Result<i16, CodecError> {
    if !angle.is_finite() {
        return Err(CodecError::EncodeOverflow("orientation"));
    }
    let q = (angle * ANGLE_UNITS).round() as i64;
    Ok(q.rem_euclid(65536) as u16 as i16)
}

/// σ byte; values outside `[1e-3, 10^(255/40 − 3)]` saturate.
fn sigma_to_byte(sigma: f64) -> Result<u8, CodecError> {
    if sigma.is_nan() {
        return Err(CodecError::EncodeOverflow("sigma"));
    }
    Ok((40.0 * (sigma.log10() + 3.0)).round().clamp(0.0, 255.0) as u8)
}

pub fn sigma_from_byte(v: u8) -> f64 {
    10f64.powf(v as f64 / 40.0 - 3.0)
}

pub fn encode(m: &AcousticMessage) -> Result<Frame, CodecError> {
    let mut f = [0u8; FRAME_LEN];
    f[0] = m.sender;
    f[1] = m.sequence;
    let depth = quantize(m.depth, 1000.0, I24_MAX, "depth")?;
    f[2..5].copy_from_slice(&(depth as i32).to_be_bytes()[1..]);
    for (i, v) in m.pose.translation().iter().enumerate() {
        let q = quantize(*v, 100.0, i32::MAX as i64, "position")?;
        f[5 + 4 * i..9 + 4 * i].copy_from_slice(&(q as i32).to_be_bytes());
    }
    let (roll, pitch, yaw) = m.pose.rotation().euler();
    for (i, a) in [roll, pitch, yaw].into_iter().enumerate() {
        f[17 + 2 * i..19 + 2 * i].copy_from_slice(&angle_to_i16(a)?.to_be_bytes());
    }
    for (i, s) in m.sigmas.iter().enumerate() {
        f[23 + i] = sigma_to_byte(*s)?;
    }
    let crc = crc16(&f[..29]);
    f[29..31].copy_from_slice(&crc.to_be_bytes());
    Ok(f)
}

pub fn decode(frame: &[u8]) -> Result<AcousticMessage, CodecError> {
    if frame.len() != FRAME_LEN {
        return Err(CodecError::BadLength(frame.len()));
    }
    if crc16(&frame[..29]) != u16::from_be_bytes([frame[29], frame[30]]) {
        return Err(CodecError::CorruptFrame);
    }
    // sign-extend the 24-bit depth through the top byte
    let depth = i32::from_be_bytes([frame[2], frame[3], frame[4], 0]) >> 8;
    let pos = |i: usize| {
        let b = &frame[5 + 4 * i..9 + 4 * i];
        i32::from_be_bytes([b[0], b[1], b[2], b[3]]) as f64 / 100.0
    };
    let ang = |i: usize| i16::from_be_bytes([frame[17 + 2 * i], frame[18 + 2 * i]]) as f64 / ANGLE_UNITS;
    let mut sigmas = [0.0; 6];
    for (i, s) in sigmas.iter_mut().enumerate() {
        *s = sigma_from_byte(frame[23 + i]);
    }
    Ok(AcousticMessage {
        sender: frame[0],
        sequence: frame[1],
        depth: depth as f64 / 1000.0,
        pose: Pose3::new(Rot3::from_euler(ang(0), ang(1), ang(2)), nalgebra::Vector3::new(pos(0), pos(1), pos(2))),
        sigmas,
    })
}

// ---------------------------------------------------------------------------
// Channel

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("{0} must lie in [0, 1]")]
    Probability(&'static str),
    #[error("bearing noise must be finite and non-negative")]
    Sigma,
    #[error("outlier range must satisfy 0 <= lower < upper")]
    OutlierRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub dropout: f64,
    /// Radians, applied to azimuth and elevation independently.
    pub bearing_sigma: f64,
    pub outlier_probability: f64,
    /// Radians; offsets are drawn uniformly from `[min, max)`.
    pub outlier_min: f64,
    pub outlier_max: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            dropout: 0.5,
            bearing_sigma: 10f64.to_radians(),
            outlier_probability: 0.0,
            outlier_min: 40f64.to_radians(),
            outlier_max: 120f64.to_radians(),
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(ChannelError::Probability("dropout"));
        }
        if !(0.0..=1.0).contains(&self.outlier_probability) {
            return Err(ChannelError::Probability("outlier probability"));
        }
        if !(self.bearing_sigma >= 0.0 && self.bearing_sigma.is_finite()) {
            return Err(ChannelError::Sigma);
        }
        if !(self.outlier_min >= 0.0 && self.outlier_min < self.outlier_max && self.outlier_max.is_finite()) {
            return Err(ChannelError::OutlierRange);
        }
        Ok(())
    }
}

/// A received broadcast as seen by one receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct Delivery<T = AcousticMessage> {
    pub receiver: u8,
    pub message: T,
    pub azimuth: f64,
    pub elevation: f64,
    /// Ground-truth label; evaluation only.
    pub outlier: bool,
}

/// Perturbs a true bearing.
///
/// Every call consumes the same number of random variates whatever the
/// outcome, so configurations that differ only in probabilities see the same
/// underlying noise.
pub fn sample_bearing<R: Rng + ?Sized>(
    true_azimuth: f64,
    true_elevation: f64,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> (f64, f64, bool) {
    let outlier = rng.random::<f64>() < cfg.outlier_probability;
    let mut offsets = [0.0; 2];
    for o in offsets.iter_mut() {
        let magnitude = cfg.outlier_min + (cfg.outlier_max - cfg.outlier_min) * rng.random::<f64>();
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        *o = sign * magnitude;
    }
    let gauss: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let (da, de) = if outlier {
        (offsets[0], offsets[1])
    } else {
        (cfg.bearing_sigma * gauss[0], cfg.bearing_sigma * gauss[1])
    };
    (wrap_angle(true_azimuth + da), (true_elevation + de).clamp(0.0, PI), outlier)
}

/// Broadcasts `message` from `sender` to every other robot.
///
/// `truth` holds the global poses of the whole fleet at the time of launch,
/// indexed by robot id. Receivers are processed in id order; each draws a
/// dropout variate and a full set of bearing variates.
pub fn transmit<T: Clone, R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    truth: &[Pose3],
    sender: u8,
    message: &T,
    rng: &mut R,
) -> Vec<Delivery<T>> {
    let sender = sender as usize;
    let mut out = Vec::new();
    for (receiver, rx) in truth.iter().enumerate() {
        if receiver == sender {
            continue;
        }
        let dropped = rng.random::<f64>() < cfg.dropout;
        let Ok((az, el)) = predict_bearing(rx, &truth[sender]) else {
            // co-located vehicles: burn the bearing variates and lose the message
            sample_bearing(0.0, 0.0, cfg, rng);
            continue;
        };
        let (azimuth, elevation, outlier) = sample_bearing(az, el, cfg, rng);
        if !dropped {
            out.push(Delivery { receiver: receiver as u8, message: message.clone(), azimuth, elevation, outlier });
        }
    }
    out
}

/// Round-robin time-division schedule.
pub fn next_transmitter(step: u64, fleet_size: usize, slot_length: u64) -> u8 {
    assert!(fleet_size >= 1 && slot_length >= 1);
    ((step / slot_length) % fleet_size as u64) as u8
}

/// Whether `step` opens a transmit slot.
pub fn is_slot_start(step: u64, slot_length: u64) -> bool {
    step % slot_length == 0
}
