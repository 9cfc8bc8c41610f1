use std::io::{Read, Write};
use std::path::Path;

use super::profiles::{DialectProfile, SpeakerProfile};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{Domain, RngStream, Tensor};

pub const FRAME_MAGIC: &[u8; 4] = b"FRM1";

/// `T x D` matrix of mel-like features; rows are time frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    frames: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(frames: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || channels == 0 || data.len() != frames * channels {
            return Err(Error::shape("frame_matrix", format!("{frames}x{channels} with {} values", data.len())));
        }
        Ok(FrameMatrix { frames, channels, data })
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        FrameMatrix { frames, channels, data: vec![0.0; frames * channels] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel mean over frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for t in 0..self.frames {
            for (acc, &v) in m.iter_mut().zip(self.row(t)) {
                *acc += v as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.frames, self.channels], self.data.clone()).expect("frame matrix is non-empty")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (r, c) = t.as_matrix("frame_matrix")?;
        FrameMatrix::new(r, c, t.data().to_vec())
    }

    /// `FRM1`, `u32` T, `u32` D, then `T * D` little-endian `f32`, row-major.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FRAME_MAGIC {
            return Err(Error::Format("not a frame file (bad magic)".into()));
        }
        let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 12 + t * d * 4 {
            return Err(Error::Format(format!("frame file size {} does not match {t}x{d}", bytes.len())));
        }
        let data = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        FrameMatrix::new(t, d, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }
}

/// Spectral template and base duration of every token.
#[derive(Clone, Debug)]
pub struct TokenTable {
    templates: Vec<Vec<f64>>,
    base_durations: Vec<usize>,
}

impl TokenTable {
    /// Each template is a 0.4 floor plus two formant-like Gaussian bumps;
    /// base durations are uniform in `[min_dur, max_dur]`.
    pub fn derive(seed: u64, vocab_size: usize, channels: usize, min_dur: usize, max_dur: usize) -> Self {
        let mut templates = Vec::with_capacity(vocab_size);
        let mut base_durations = Vec::with_capacity(vocab_size);
        for tok in 0..vocab_size {
            let mut rng = RngStream::derive(seed, Domain::Token, tok as u64);
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    let center = rng.range(0.05, 0.95) * (channels - 1) as f64;
                    let width = rng.range(3.0, 8.0) * channels as f64 / 80.0;
                    let gain = rng.range(0.2, 0.6);
                    (center, width.max(0.75), gain)
                })
                .collect();
            let tmpl = (0..channels)
                .map(|c| {
                    0.4 + bumps
                        .iter()
                        .map(|&(mu, w, g)| {
                            let z = (c as f64 - mu) / w;
                            g * (-0.5 * z * z).exp()
                        })
                        .sum::<f64>()
                })
                .collect();
            templates.push(tmpl);
            base_durations.push(rng.between(min_dur, max_dur));
        }
        TokenTable { templates, base_durations }
    }

    pub fn vocab_size(&self) -> usize {
        self.templates.len()
    }

    pub fn template(&self, token: usize) -> Result<&[f64]> {
        self.templates.get(token).map(Vec::as_slice).ok_or(Error::UnknownToken(token))
    }

    pub fn base_duration(&self, token: usize) -> Result<usize> {
        self.base_durations.get(token).copied().ok_or(Error::UnknownToken(token))
    }
}

/// One rendered utterance with ground-truth durations.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub token_ids: Vec<usize>,
    pub speaker_id: usize,
    pub dialect_id: usize,
    pub durations: Vec<usize>,
    pub frames: FrameMatrix,
}

/// Frames for `base * multiplier` rounded, never below one.
pub fn realized_duration(base: usize, multiplier: f64) -> usize {
    ((base as f64 * multiplier).round() as usize).max(1)
}

/// Renders `tokens` for one speaker and dialect.
///
/// Frame `t` of token `k` is `energy * envelope ⊙ template(k) ⊙ gain(dialect)`
/// scaled by the dialect contour at `t`, plus Gaussian noise at `snr_db`
/// (`None` disables noise), clamped at zero.
pub fn render_utterance(
    tokens: &[usize],
    speaker: &SpeakerProfile,
    dialect: &DialectProfile,
    table: &TokenTable,
    snr_db: Option<f64>,
    rng: &mut RngStream,
) -> Result<UtteranceRecord> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let channels = speaker.base_envelope.len();
    let gain: Vec<f64> = (0..channels)
        .map(|c| speaker.energy_scale * speaker.base_envelope[c] * dialect.channel_gain(c, channels))
        .collect();
    let mut durations = Vec::with_capacity(tokens.len());
    let mut clean: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for &tok in tokens {
        let tmpl = table.template(tok)?;
        let n = realized_duration(table.base_duration(tok)?, dialect.duration_multiplier);
        durations.push(n);
        for _ in 0..n {
            let contour = dialect.contour(t);
            clean.extend(tmpl.iter().zip(&gain).map(|(&a, &g)| a * g * contour));
            t += 1;
        }
    }
    let sigma = match snr_db {
        Some(snr) => {
            let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
            rms * 10f64.powf(-snr / 20.0)
        }
        None => 0.0,
    };
    let data = clean
        .iter()
        .map(|&v| {
            let noisy = if sigma > 0.0 { v + sigma * rng.normal() } else { v };
            noisy.max(0.0) as f32
        })
        .collect();
    Ok(UtteranceRecord {
        token_ids: tokens.to_vec(),
        speaker_id: speaker.speaker_id,
        dialect_id: dialect.dialect_id,
        durations,
        frames: FrameMatrix::new(t, channels, data)?,
    })
}
