//! Parameter layout and differentiable forward passes. Every struct here holds
//! parameter ids only, so the same architecture evaluates at `f32` for
//! training and `f64` for gradient checks.

use super::config::{Ablation, ModelConfig, RefLossMode};
use crate::error::{Error, Result};
use crate::numerics::layers::{sinusoidal_embedding, Conv1d, Ffn, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

const CONV_KERNEL: usize = 3;
const TIME_SCALE: f64 = 1000.0;

/// Pre-norm transformer block whose FFN is a shared public FFN plus one
/// dialect-private FFN selected by id.
#[derive(Clone, Debug)]
pub struct DsdrBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub public: Ffn,
    /// Empty when routing is ablated.
    pub private: Vec<Ffn>,
}

impl DsdrBlock {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, private: usize) -> Result<Self> {
        Ok(DsdrBlock {
            ln_attn: b.layer_norm("ln_attn", cfg.d_model)?,
            attn: b.attention("attn", cfg.d_model, cfg.heads)?,
            ln_ffn: b.layer_norm("ln_ffn", cfg.d_model)?,
            public: b.ffn("public", cfg.d_model, cfg.dsdr_ffn_dim)?,
            private: (0..private).map(|k| b.ffn(&format!("private{k}"), cfg.d_model, cfg.dsdr_ffn_dim)).collect::<Result<_>>()?,
        })
    }

    /// `h + attn(LN(h))`, then `+ public(LN(.)) + private[dialect](LN(.))`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, dialect: usize) -> Result<Var> {
        let n = self.ln_attn.forward(tape, store, h)?;
        let a = self.attn.forward(tape, store, n)?;
        let h = tape.add(h, a)?;
        let n = self.ln_ffn.forward(tape, store, h)?;
        let mut f = self.public.forward(tape, store, n)?;
        if !self.private.is_empty() {
            let branch = self.private.get(dialect).ok_or(Error::DialectOutOfRange { id: dialect, count: self.private.len() })?;
            let p = branch.forward(tape, store, n)?;
            f = tape.add(f, p)?;
        }
        tape.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub proj: Linear,
}

impl SpeakerEncoder {
    /// `[t_crop, channels]` normalized frames to a unit-norm `[1, speaker_dim]` row.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, crop: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, crop)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = tape.mean_rows(h)?;
        let h = self.proj.forward(tape, store, h)?;
        tape.l2_normalize_rows(h)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub fusion: Linear,
    pub blocks: Vec<DsdrBlock>,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub conv1: Conv1d,
    pub ln1: LayerNorm,
    pub conv2: Conv1d,
    pub ln2: LayerNorm,
    pub out: Linear,
}

impl DurationPredictor {
    /// `[T_tok, d_model]` to `[T_tok, 1]` log-durations.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        let h = self.ln1.forward(tape, store, h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.ln2.forward(tape, store, h)?;
        self.out.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub ln: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
}

/// Vector field `v(x_t, t, cond, style)`.
#[derive(Clone, Debug)]
pub struct FlowDecoder {
    pub in_x: Linear,
    pub in_cond: Linear,
    pub in_style: Linear,
    pub time: Linear,
    pub dsdr: Option<DsdrBlock>,
    pub blocks: Vec<ResBlock>,
    pub ln_out: LayerNorm,
    pub out: Linear,
}

/// Complete parameter layout of the acoustic model.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub speaker: SpeakerEncoder,
    pub dialect_table: ParamId,
    pub text: TextEncoder,
    pub duration: DurationPredictor,
    pub decoder: FlowDecoder,
    /// Maps `h_spk` to the dialect width for the reference loss; absent when
    /// the widths agree.
    pub ref_proj: Option<Linear>,
    /// Per-channel data statistics (not trainable).
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
}

impl Architecture {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        let private = if ablation.no_dsdr { 0 } else { cfg.n_dialects };
        let speaker = b.scope("spk", |b| {
            Ok(SpeakerEncoder {
                conv1: b.conv1d("conv1", CONV_KERNEL, cfg.channels, cfg.ref_encoder_hidden)?,
                conv2: b.conv1d("conv2", CONV_KERNEL, cfg.ref_encoder_hidden, cfg.ref_encoder_hidden)?,
                proj: b.linear("proj", cfg.ref_encoder_hidden, cfg.speaker_dim, true)?,
            })
        })?;
        let dialect_table = b.normal("dialect_table", &[cfg.n_dialects, cfg.dialect_dim], 1.0)?;
        let text = b.scope("text", |b| {
            Ok(TextEncoder {
                embedding: b.normal("embedding", &[cfg.vocab_size, cfg.d_model], 0.3)?,
                fusion: b.linear("fusion", cfg.speaker_dim + cfg.dialect_dim, cfg.fusion_out_dim, true)?,
                blocks: (0..cfg.n_dsdr_blocks)
                    .map(|i| b.scope(&format!("block{i}"), |b| DsdrBlock::build(b, cfg, private)))
                    .collect::<Result<_>>()?,
                ln_out: b.layer_norm("ln_out", cfg.d_model)?,
            })
        })?;
        let duration = b.scope("dur", |b| {
            Ok(DurationPredictor {
                conv1: b.conv1d("conv1", CONV_KERNEL, cfg.d_model, cfg.duration_hidden)?,
                ln1: b.layer_norm("ln1", cfg.duration_hidden)?,
                conv2: b.conv1d("conv2", CONV_KERNEL, cfg.duration_hidden, cfg.duration_hidden)?,
                ln2: b.layer_norm("ln2", cfg.duration_hidden)?,
                out: b.linear("out", cfg.duration_hidden, 1, true)?,
            })
        })?;
        let decoder = b.scope("dec", |b| {
            let h = cfg.decoder_hidden;
            let dsdr = if cfg.dsdr_in_decoder {
                let dcfg = ModelConfig { d_model: h, ..cfg.clone() };
                Some(b.scope("dsdr", |b| DsdrBlock::build(b, &dcfg, private))?)
            } else {
                None
            };
            Ok(FlowDecoder {
                in_x: b.linear("in_x", cfg.channels, h, true)?,
                in_cond: b.linear("in_cond", cfg.d_model, h, false)?,
                in_style: b.linear("in_style", cfg.fusion_out_dim, h, false)?,
                time: b.linear("time", cfg.time_embedding_dim, h, false)?,
                dsdr,
                blocks: (0..cfg.decoder_blocks)
                    .map(|i| {
                        b.scope(&format!("res{i}"), |b| {
                            Ok(ResBlock {
                                ln: b.layer_norm("ln", h)?,
                                conv1: b.conv1d("conv1", CONV_KERNEL, h, h)?,
                                conv2: b.conv1d("conv2", CONV_KERNEL, h, h)?,
                            })
                        })
                    })
                    .collect::<Result<_>>()?,
                ln_out: b.layer_norm("ln_out", h)?,
                out: b.linear("out", h, cfg.channels, true)?,
            })
        })?;
        let ref_proj = if cfg.speaker_dim != cfg.dialect_dim {
            Some(b.linear("ref_proj", cfg.speaker_dim, cfg.dialect_dim, false)?)
        } else {
            None
        };
        let norm_mean = b.constant("norm.mean", &[1, cfg.channels], 0.0, false)?;
        let norm_std = b.constant("norm.std", &[1, cfg.channels], 1.0, false)?;
        Ok(Architecture {
            config: cfg.clone(),
            ablation,
            speaker,
            dialect_table,
            text,
            duration,
            decoder,
            ref_proj,
            norm_mean,
            norm_std,
        })
    }

    fn check_dialect(&self, dialect: usize) -> Result<()> {
        if dialect >= self.config.n_dialects {
            return Err(Error::DialectOutOfRange { id: dialect, count: self.config.n_dialects });
        }
        Ok(())
    }

    /// `h_spk`: unit-norm `[1, speaker_dim]`.
    pub fn speaker_embedding<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, crop: Var) -> Result<Var> {
        let (rows, cols) = tape.value(crop).as_matrix("encode_speaker")?;
        if rows != self.config.t_crop || cols != self.config.channels {
            return Err(Error::shape(
                "encode_speaker",
                format!("expected [{}, {}], got [{rows}, {cols}]", self.config.t_crop, self.config.channels),
            ));
        }
        self.speaker.forward(tape, store, crop)
    }

    /// `h_did`: table row then L2 normalization, or the zero vector when the
    /// dialect id is ablated.
    pub fn dialect_embedding<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, dialect: usize) -> Result<Var> {
        self.check_dialect(dialect)?;
        if self.ablation.no_dialect_id {
            return tape.constant(Tensor::zeros(&[1, self.config.dialect_dim]));
        }
        let table = tape.param(store, self.dialect_table)?;
        let row = tape.gather_rows(table, &[dialect])?;
        tape.l2_normalize_rows(row)
    }

    /// Fused style row `Linear(concat(h_spk, h_did))`, `[1, d_model]`.
    pub fn style<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_spk: Var, h_did: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[h_spk, h_did])?;
        self.text.fusion.forward(tape, store, cat)
    }

    /// `h_text + style` broadcast over every row.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, h_text: Var, style: Var) -> Result<Var> {
        tape.add_row(h_text, style)
    }

    pub fn encode_text<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
        style: Var,
        dialect: usize,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        self.check_dialect(dialect)?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        let table = tape.param(store, self.text.embedding)?;
        let emb = tape.gather_rows(table, tokens)?;
        let pos = tape.constant(positional_encoding(tokens.len(), self.config.d_model))?;
        let mut h = tape.add(emb, pos)?;
        h = self.fuse(tape, h, style)?;
        for block in &self.text.blocks {
            h = block.forward(tape, store, h, dialect)?;
        }
        self.text.ln_out.forward(tape, store, h)
    }

    pub fn log_durations<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, encoded: Var) -> Result<Var> {
        let x = if self.config.detach_duration_input { tape.detach(encoded)? } else { encoded };
        self.duration.forward(tape, store, x)
    }

    /// Decoder velocity for `[T, channels]` state `x_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x_t: Var,
        t: f64,
        cond: Var,
        style: Var,
        dialect: usize,
    ) -> Result<Var> {
        let d = &self.decoder;
        let hx = d.in_x.forward(tape, store, x_t)?;
        let hc = d.in_cond.forward(tape, store, cond)?;
        let mut h = tape.add(hx, hc)?;
        let temb: Vec<T> = sinusoidal_embedding(t * TIME_SCALE, self.config.time_embedding_dim, 10_000.0)
            .into_iter()
            .map(T::of)
            .collect();
        let temb = tape.constant(Tensor::row(temb)?)?;
        let temb = d.time.forward(tape, store, temb)?;
        let s = d.in_style.forward(tape, store, style)?;
        let row = tape.add(temb, s)?;
        h = tape.add_row(h, row)?;
        if let Some(block) = &d.dsdr {
            h = block.forward(tape, store, h, dialect)?;
        }
        for rb in &d.blocks {
            let n = rb.ln.forward(tape, store, h)?;
            let r = rb.conv1.forward(tape, store, n)?;
            let r = tape.silu(r)?;
            let r = rb.conv2.forward(tape, store, r)?;
            h = tape.add(h, r)?;
        }
        let h = d.ln_out.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        d.out.forward(tape, store, h)
    }

    /// Cosine between the (projected) speaker vector and the dialect vector,
    /// squared in the default mode. Zero when the dialect vector is zero.
    pub fn reference_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h_spk: Var, h_did: Var) -> Result<Var> {
        if tape.value(h_did).data().iter().all(|v| *v == T::zero()) {
            return tape.constant(Tensor::scalar(T::zero()));
        }
        let s = match &self.ref_proj {
            Some(p) => {
                let s = p.forward(tape, store, h_spk)?;
                tape.l2_normalize_rows(s)?
            }
            None => h_spk,
        };
        let cos = tape.dot(s, h_did)?;
        match self.config.ref_loss {
            RefLossMode::CosSquared => tape.mul(cos, cos),
            RefLossMode::Literal => Ok(cos),
        }
    }
}

/// Sinusoidal position features `[len, dim]`.
pub fn positional_encoding<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let data = (0..len).flat_map(|p| sinusoidal_embedding(p as f64, dim, 10_000.0)).map(T::of).collect();
    Tensor::new(vec![len, dim], data).expect("non-empty positions")
}

/// Cosine of two equal-width rows without any projection.
pub fn reference_cosine<T: Real>(a: &[T], b: &[T], mode: RefLossMode) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("reference_loss", format!("{} vs {} without projection", a.len(), b.len())));
    }
    let c = crate::numerics::cosine(a, b)?;
    Ok(match mode {
        RefLossMode::CosSquared => c * c,
        RefLossMode::Literal => c,
    })
}
