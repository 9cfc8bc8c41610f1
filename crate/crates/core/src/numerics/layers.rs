//! Standard layers. Each layer holds parameter ids only; values live in a
//! [`ParamStore`], so one architecture runs at either precision.

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut RngStream,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut RngStream) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<R>) -> Result<R> {
        let prefix = format!("{}{}.", self.prefix, name);
        let mut child = ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| (self.rng.normal() * std) as f32).collect();
        let name = self.full_name(name);
        self.store.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32, trainable: bool) -> Result<ParamId> {
        let name = self.full_name(name);
        self.store.add(name, Tensor::full(shape, value), trainable)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        self.scope(name, |b| {
            let w = b.normal("w", &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
            let bias = if bias { Some(b.constant("b", &[1, fan_out], 0.0, true)?) } else { None };
            Ok(Linear { w, b: bias, fan_in, fan_out })
        })
    }

    /// Linear layer whose weights and bias start at exactly zero.
    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.scope(name, |b| {
            let w = b.constant("w", &[fan_in, fan_out], 0.0, true)?;
            let bias = Some(b.constant("b", &[1, fan_out], 0.0, true)?);
            Ok(Linear { w, b: bias, fan_in, fan_out })
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        self.scope(name, |b| {
            Ok(LayerNorm { gamma: b.constant("gamma", &[1, dim], 1.0, true)?, beta: b.constant("beta", &[1, dim], 0.0, true)? })
        })
    }

    pub fn conv1d(&mut self, name: &str, kernel: usize, c_in: usize, c_out: usize) -> Result<Conv1d> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv kernel must be odd, got {kernel}")));
        }
        self.scope(name, |b| {
            let fan_in = kernel * c_in;
            let w = b.normal("w", &[fan_in, c_out], 1.0 / (fan_in as f64).sqrt())?;
            let bias = b.constant("b", &[1, c_out], 0.0, true)?;
            Ok(Conv1d { w, b: bias, kernel, c_in, c_out })
        })
    }

    pub fn ffn(&mut self, name: &str, dim: usize, hidden: usize) -> Result<Ffn> {
        self.scope(name, |b| Ok(Ffn { up: b.linear("up", dim, hidden, true)?, down: b.linear("down", hidden, dim, true)? }))
    }

    pub fn zero_ffn(&mut self, name: &str, dim: usize, hidden: usize) -> Result<Ffn> {
        self.scope(name, |b| Ok(Ffn { up: b.zero_linear("up", dim, hidden)?, down: b.zero_linear("down", hidden, dim)? }))
    }

    pub fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Result<MultiHeadAttention> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!("model dim {dim} not divisible by {heads} heads")));
        }
        self.scope(name, |b| {
            Ok(MultiHeadAttention {
                q: b.linear("q", dim, dim, true)?,
                k: b.linear("k", dim, dim, true)?,
                v: b.linear("v", dim, dim, true)?,
                out: b.linear("out", dim, dim, true)?,
                heads,
            })
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, T::of(Self::EPS))?;
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Same-padded 1-D convolution over the time (row) axis.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cols = if self.kernel == 1 { x } else { tape.im2col(x, self.kernel)? };
        let w = tape.param(store, self.w)?;
        let y = tape.matmul(cols, w)?;
        let b = tape.param(store, self.b)?;
        tape.add_row(y, b)
    }
}

/// Two affine maps with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        self.down.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.up.params();
        p.extend(self.down.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let h = scaled_dot_attention(tape, q, k, v, self.heads)?;
        self.out.forward(tape, store, h)
    }
}

/// Per-head `softmax(Q K^T / sqrt(d_k)) V` with heads concatenated along the
/// feature axis. The output projection is applied by the caller.
pub fn scaled_dot_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (tq, dq) = tape.value(q).as_matrix("attention")?;
    let (tk, dk) = tape.value(k).as_matrix("attention")?;
    let (tv, dv) = tape.value(v).as_matrix("attention")?;
    if dq != dk || tk != tv || heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("Q [{tq},{dq}] K [{tk},{dk}] V [{tv},{dv}] with {heads} heads"),
        ));
    }
    let hk = dq / heads;
    let hv = dv / heads;
    let scale = T::of(1.0 / (hk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * hk, hk)?, tape.slice_cols(k, h * hk, hk)?, tape.slice_cols(v, h * hv, hv)?)
        };
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let weights = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Sinusoidal features of a scalar (time step or position).
pub fn sinusoidal_embedding(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}
