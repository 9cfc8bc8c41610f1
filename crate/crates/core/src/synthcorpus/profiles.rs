use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Domain, RngStream};

/// Dialect labels in id order: wz (Ü-Tsang) = 0, ad (Amdo) = 1, kb (Kham) = 2.
pub const DIALECT_LABELS: [&str; 3] = ["wz", "ad", "kb"];
pub const NUM_DIALECTS: usize = 3;

/// Maps a dialect label to its integer id.
pub fn map_dialect(label: &str) -> Result<usize> {
    match label {
        "wz" => Ok(0),
        "ad" => Ok(1),
        "kb" => Ok(2),
        other => Err(Error::UnknownDialect(other.to_string())),
    }
}

pub fn dialect_label(id: usize) -> Result<&'static str> {
    DIALECT_LABELS.get(id).copied().ok_or(Error::DialectOutOfRange { id, count: NUM_DIALECTS })
}

/// Parametric acoustic signature of one dialect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialectProfile {
    pub dialect_id: usize,
    pub label: String,
    /// Scales every token's base duration (rhythm).
    pub duration_multiplier: f64,
    /// Log-gain slope across the channel axis, from low to high channels.
    pub spectral_tilt: f64,
    /// Emphasized band center as a fraction of the channel count.
    pub band_center: f64,
    pub band_gain: f64,
    /// Cycles per frame of the amplitude contour (intonation analog).
    pub contour_rate: f64,
}

impl DialectProfile {
    pub fn band_center_channel(&self, channels: usize) -> f64 {
        self.band_center * (channels - 1) as f64
    }

    /// Width (std, in channels) of the emphasized band.
    pub fn band_width(channels: usize) -> f64 {
        (channels as f64 / 53.0).max(1.5)
    }

    /// Multiplicative channel shaping from tilt and band emphasis.
    pub fn channel_gain(&self, channel: usize, channels: usize) -> f64 {
        let x = if channels > 1 { channel as f64 / (channels - 1) as f64 } else { 0.5 };
        let tilt = (self.spectral_tilt * (x - 0.5)).exp();
        let w = Self::band_width(channels);
        let dz = (channel as f64 - self.band_center_channel(channels)) / w;
        tilt * (1.0 + self.band_gain * (-0.5 * dz * dz).exp())
    }

    pub const CONTOUR_DEPTH: f64 = 0.15;

    pub fn contour(&self, frame: usize) -> f64 {
        1.0 + Self::CONTOUR_DEPTH * (2.0 * std::f64::consts::PI * self.contour_rate * frame as f64).sin()
    }
}

/// The three default profiles. Amdo (ad) carries the largest duration
/// multiplier.
pub fn default_profiles(duration_multipliers: [f64; 3]) -> [DialectProfile; 3] {
    let table = [(-0.6, 0.25, 0.05), (0.0, 0.5, 0.11), (0.6, 0.75, 0.03)];
    std::array::from_fn(|d| DialectProfile {
        dialect_id: d,
        label: DIALECT_LABELS[d].to_string(),
        duration_multiplier: duration_multipliers[d],
        spectral_tilt: table[d].0,
        band_center: table[d].1,
        band_gain: 1.5,
        contour_rate: table[d].2,
    })
}

/// Per-speaker spectral envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    /// Smooth envelope, every entry in `[0.1, 1.0]`.
    pub base_envelope: Vec<f64>,
    pub energy_scale: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    /// Deterministic in `(seed, speaker_id)`: a sum of three low-frequency
    /// cosines whose amplitudes sum to at most one, mapped into `[0.1, 1.0]`.
    pub fn derive(seed: u64, speaker_id: usize, channels: usize) -> Self {
        let mut rng = RngStream::derive(seed, Domain::Speaker, speaker_id as u64);
        let mut amps = [rng.range(0.2, 1.0), rng.range(0.2, 1.0), rng.range(0.2, 1.0)];
        let total: f64 = amps.iter().sum();
        amps.iter_mut().for_each(|a| *a /= total);
        let freqs = [rng.range(0.3, 1.2), rng.range(1.0, 2.2), rng.range(1.8, 3.2)];
        let phases = [rng.range(0.0, TAU), rng.range(0.0, TAU), rng.range(0.0, TAU)];
        let base_envelope = (0..channels)
            .map(|c| {
                let x = c as f64 / channels as f64;
                let s: f64 = (0..3).map(|j| amps[j] * (TAU * freqs[j] * x + phases[j]).cos()).sum();
                (0.55 + 0.45 * s).clamp(0.1, 1.0)
            })
            .collect();
        let energy_scale = rng.range(0.75, 1.25);
        SpeakerProfile { speaker_id, base_envelope, energy_scale, seed }
    }
}
