//! The acoustic model: tokenizer, reference encoder, dialect table, fusion,
//! DSDR text encoder, duration predictor, length regulator and the
//! flow-matching decoder.

pub mod arch;
pub mod config;
pub mod flow;
pub mod tokenizer;

use std::path::Path;
use std::time::Instant;

pub use arch::{Architecture, DsdrBlock};
pub use config::{Ablation, ModelConfig, RefLossMode};
pub use flow::{cfm_training_target, decode_flow};
pub use tokenizer::Tokenizer;

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::layers::ParamBuilder;
use crate::numerics::{Domain, ParamStore, RngStream, Tape, Tensor};
use crate::synthcorpus::FrameMatrix;

/// Contiguous `t_crop`-row window starting at a uniform offset, or the whole
/// input zero-padded at the end when it is shorter.
pub fn crop_reference(frames: &FrameMatrix, t_crop: usize, rng: &mut RngStream) -> FrameMatrix {
    let d = frames.channels();
    let rows = frames.frames();
    if rows >= t_crop {
        let start = if rows == t_crop { 0 } else { rng.below(rows - t_crop + 1) };
        let data = frames.data()[start * d..(start + t_crop) * d].to_vec();
        FrameMatrix::new(t_crop, d, data).expect("window is non-empty")
    } else {
        let mut data = frames.data().to_vec();
        data.resize(t_crop * d, 0.0);
        FrameMatrix::new(t_crop, d, data).expect("padded window is non-empty")
    }
}

/// Predicted log-durations and the realized frame counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationPlan {
    pub log_durations: Vec<f64>,
    pub counts: Vec<usize>,
}

impl DurationPlan {
    /// `counts[i] = max(1, round(exp(log_durations[i])))`.
    pub fn from_log(log_durations: Vec<f64>) -> Self {
        let counts = log_durations.iter().map(|&l| (l.exp().round() as usize).max(1)).collect();
        DurationPlan { log_durations, counts }
    }

    pub fn total_frames(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Row `i` repeated `counts[i]` times.
pub fn upsample_index(rows: usize, counts: &[usize]) -> Result<Vec<usize>> {
    if rows != counts.len() {
        return Err(Error::shape("upsample", format!("{rows} rows but {} counts", counts.len())));
    }
    Ok(counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect())
}

pub fn upsample<T: crate::numerics::Real>(encoded: &Tensor<T>, counts: &[usize]) -> Result<Tensor<T>> {
    let index = upsample_index(encoded.rows(), counts)?;
    if index.is_empty() {
        return Err(Error::Empty("duration plan"));
    }
    let c = encoded.cols();
    let data = index.iter().flat_map(|&i| encoded.row_slice(i).iter().copied()).collect();
    Tensor::new(vec![index.len(), c], data)
}

/// Output of one synthesis call.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub frames: FrameMatrix,
    pub plan: DurationPlan,
    /// Wall-clock seconds spent in the call.
    pub seconds: f64,
}

/// Architecture plus trained `f32` parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore<f32>,
}

const META_NO_DSDR: &str = "meta.no_dsdr";
const META_NO_DIALECT_ID: &str = "meta.no_dialect_id";

impl Model {
    pub fn new(config: &ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = RngStream::derive(seed, Domain::Init, 0);
        let arch = Architecture::build(&mut ParamBuilder::new(&mut params, &mut rng), config, ablation)?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn ablation(&self) -> Ablation {
        self.arch.ablation
    }

    /// Sets the per-channel statistics used to normalize frames.
    pub fn set_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let d = self.config().channels;
        if mean.len() != d || std.len() != d || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("normalization needs `channels` means and positive stds".into()));
        }
        let m = self.params.get_mut(self.arch.norm_mean);
        m.data_mut().iter_mut().zip(mean).for_each(|(a, &b)| *a = b as f32);
        let s = self.params.get_mut(self.arch.norm_std);
        s.data_mut().iter_mut().zip(std).for_each(|(a, &b)| *a = b as f32);
        Ok(())
    }

    pub fn normalize(&self, frames: &FrameMatrix) -> Result<Tensor<f32>> {
        let d = self.config().channels;
        if frames.channels() != d {
            return Err(Error::shape("normalize", format!("{} channels, model has {d}", frames.channels())));
        }
        let (m, s) = (self.params.get(self.arch.norm_mean).data(), self.params.get(self.arch.norm_std).data());
        let data = frames.data().chunks_exact(d).flat_map(|row| row.iter().zip(m).zip(s).map(|((&x, &mu), &sd)| (x - mu) / sd)).collect();
        Tensor::new(vec![frames.frames(), d], data)
    }

    /// Inverse of [`Model::normalize`], clamped at zero.
    pub fn denormalize(&self, x: &Tensor<f32>) -> Result<FrameMatrix> {
        let d = self.config().channels;
        let (m, s) = (self.params.get(self.arch.norm_mean).data(), self.params.get(self.arch.norm_std).data());
        let data = x.data().chunks_exact(d).flat_map(|row| row.iter().zip(m).zip(s).map(|((&v, &mu), &sd)| (v * sd + mu).max(0.0))).collect();
        FrameMatrix::new(x.rows(), d, data)
    }

    /// Normalized reference crop ready for the speaker encoder. All-zero
    /// input has no speaker direction and is rejected.
    pub fn reference_input(&self, crop: &FrameMatrix) -> Result<Tensor<f32>> {
        if crop.data().iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroNorm);
        }
        self.normalize(crop)
    }

    /// `h_spk` for a crop of exactly `t_crop` rows.
    pub fn encode_speaker(&self, crop: &FrameMatrix) -> Result<Vec<f32>> {
        let t_crop = self.config().t_crop;
        if crop.frames() != t_crop {
            return Err(Error::shape("encode_speaker", format!("expected {t_crop} rows, got {}", crop.frames())));
        }
        let x = self.reference_input(crop)?;
        let mut tape = Tape::new();
        let v = tape.constant(x)?;
        let h = self.arch.speaker_embedding(&mut tape, &self.params, v)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// `h_did` (all zeros when the dialect id is ablated).
    pub fn embed_dialect(&self, dialect: usize) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let h = self.arch.dialect_embedding(&mut tape, &self.params, dialect)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Full pipeline for token ids. `rng` drives the reference crop and the
    /// initial noise; the same stream yields the same frames.
    pub fn synthesize(
        &self,
        tokens: &[usize],
        reference: &FrameMatrix,
        dialect: usize,
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<Synthesis> {
        let start = Instant::now();
        let crop = crop_reference(reference, self.config().t_crop, rng);
        let x_ref = self.reference_input(&crop)?;
        let mut tape = Tape::new();
        let r = tape.constant(x_ref)?;
        let h_spk = self.arch.speaker_embedding(&mut tape, &self.params, r)?;
        let h_did = self.arch.dialect_embedding(&mut tape, &self.params, dialect)?;
        let style = self.arch.style(&mut tape, &self.params, h_spk, h_did)?;
        let enc = self.arch.encode_text(&mut tape, &self.params, tokens, style, dialect)?;
        let logd = self.arch.log_durations(&mut tape, &self.params, enc)?;
        let plan = DurationPlan::from_log(tape.value(logd).data().iter().map(|&v| v as f64).collect());
        let cond = upsample(tape.value(enc), &plan.counts)?;
        let style = tape.value(style).clone();
        let x = decode_flow(&self.arch, &self.params, &cond, &style, dialect, steps, rng)?;
        let frames = self.denormalize(&x)?;
        Ok(Synthesis { frames, plan, seconds: start.elapsed().as_secs_f64() })
    }

    pub fn synthesize_text(
        &self,
        text: &str,
        reference: &FrameMatrix,
        dialect_label: &str,
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<Synthesis> {
        let tokens = Tokenizer::new(self.config().vocab_size)?.tokenize(text)?;
        let dialect = crate::synthcorpus::map_dialect(dialect_label)?;
        self.synthesize(&tokens, reference, dialect, steps, rng)
    }

    /// Parameters plus ablation flags, in checkpoint order.
    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let flag = |b: bool| Tensor::scalar(if b { 1.0 } else { 0.0 });
        let mut e = vec![
            (META_NO_DSDR.to_string(), flag(self.ablation().no_dsdr)),
            (META_NO_DIALECT_ID.to_string(), flag(self.ablation().no_dialect_id)),
        ];
        e.extend(self.params.to_named());
        e
    }

    /// Rebuilds a model from checkpoint entries; the ablation comes from the
    /// stored flags and every parameter must be present with its shape.
    pub fn from_entries(config: &ModelConfig, entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let flag = |name: &str| -> Result<bool> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data()[0] != 0.0)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let ablation = Ablation { no_dsdr: flag(META_NO_DSDR)?, no_dialect_id: flag(META_NO_DIALECT_ID)? };
        let mut model = Model::new(config, ablation, 0)?;
        model.params.load_named(entries)?;
        Ok(model)
    }

    /// Writes the model checkpoint; returns its sha256.
    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        Self::from_entries(config, &checkpoint::load(path)?)
    }
}

#[cfg(test)]
pub(crate) mod tests;
