use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective applied to the speaker/dialect cosine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefLossMode {
    /// `cos^2`; minimized at orthogonality.
    CosSquared,
    /// Raw cosine; minimized at anti-alignment.
    Literal,
}

/// Architecture hyperparameters. The defaults are the desk-scale model at half
/// width; [`ModelConfig::full_scale`] gives the full-size one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub speaker_dim: usize,
    pub dialect_dim: usize,
    /// Must equal `d_model`; the fused style vector is added to text features.
    pub fusion_out_dim: usize,
    pub dsdr_ffn_dim: usize,
    pub heads: usize,
    pub n_dsdr_blocks: usize,
    pub n_dialects: usize,
    pub t_crop: usize,
    pub ref_encoder_hidden: usize,
    pub duration_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub time_embedding_dim: usize,
    pub cfm_steps: usize,
    pub sigma_min: f64,
    pub ref_loss: RefLossMode,
    /// Put a DSDR block after the decoder input projection as well.
    pub dsdr_in_decoder: bool,
    /// Stop duration-loss gradients at the encoder output.
    pub detach_duration_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 216,
            channels: 80,
            d_model: 64,
            speaker_dim: 96,
            dialect_dim: 64,
            fusion_out_dim: 64,
            dsdr_ffn_dim: 96,
            heads: 2,
            n_dsdr_blocks: 2,
            n_dialects: 3,
            t_crop: 187,
            ref_encoder_hidden: 64,
            duration_hidden: 64,
            decoder_hidden: 96,
            decoder_blocks: 3,
            time_embedding_dim: 32,
            cfm_steps: 32,
            sigma_min: 1e-4,
            ref_loss: RefLossMode::CosSquared,
            dsdr_in_decoder: false,
            detach_duration_input: true,
        }
    }
}

impl ModelConfig {
    /// Speaker 192, dialect 128, fusion 128, DSDR FFN 192.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 128,
            speaker_dim: 192,
            dialect_dim: 128,
            fusion_out_dim: 128,
            dsdr_ffn_dim: 192,
            n_dsdr_blocks: 6,
            decoder_hidden: 192,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.fusion_out_dim != self.d_model {
            return fail(format!("fusion_out_dim {} must equal d_model {}", self.fusion_out_dim, self.d_model));
        }
        let positive = [
            ("vocab_size", self.vocab_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("speaker_dim", self.speaker_dim),
            ("dialect_dim", self.dialect_dim),
            ("dsdr_ffn_dim", self.dsdr_ffn_dim),
            ("heads", self.heads),
            ("n_dialects", self.n_dialects),
            ("t_crop", self.t_crop),
            ("ref_encoder_hidden", self.ref_encoder_hidden),
            ("duration_hidden", self.duration_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("time_embedding_dim", self.time_embedding_dim),
            ("cfm_steps", self.cfm_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !self.time_embedding_dim.is_multiple_of(2) {
            return fail("time_embedding_dim must be even".into());
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return fail(format!("sigma_min {} outside [0, 1)", self.sigma_min));
        }
        Ok(())
    }
}

/// Ablation switches. `no_dsdr` removes every private FFN; `no_dialect_id`
/// replaces the dialect embedding with a zero vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub no_dsdr: bool,
    pub no_dialect_id: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { no_dsdr: false, no_dialect_id: false };
    pub const NO_DSDR: Ablation = Ablation { no_dsdr: true, no_dialect_id: false };
    pub const NO_DIALECT_ID: Ablation = Ablation { no_dsdr: false, no_dialect_id: true };
    pub const NEITHER: Ablation = Ablation { no_dsdr: true, no_dialect_id: true };

    pub const ALL: [(&'static str, Ablation); 4] = [
        ("full", Ablation::FULL),
        ("no_dsdr", Ablation::NO_DSDR),
        ("no_dialect_id", Ablation::NO_DIALECT_ID),
        ("neither", Ablation::NEITHER),
    ];

    pub fn label(self) -> &'static str {
        Ablation::ALL.iter().find(|(_, a)| *a == self).map(|(l, _)| *l).expect("all four variants are listed")
    }
}
