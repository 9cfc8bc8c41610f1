use super::arch::Architecture;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, RngStream, Tape, Tensor, Var};

/// Straight-path interpolant and its target velocity:
/// `x_t = (1 - (1 - s) t) x0 + t x1`, `u = x1 - (1 - s) x0`.
pub fn cfm_training_target<T: Real>(x1: &Tensor<T>, x0: &Tensor<T>, t: f64, sigma_min: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if x1.shape() != x0.shape() {
        return Err(Error::shape("cfm_training_target", format!("{:?} vs {:?}", x1.shape(), x0.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    let a = T::of(1.0 - (1.0 - sigma_min) * t);
    let b = T::of(t);
    let c = T::of(1.0 - sigma_min);
    let xt = x0.data().iter().zip(x1.data()).map(|(&n, &x)| a * n + b * x).collect();
    let u = x0.data().iter().zip(x1.data()).map(|(&n, &x)| x - c * n).collect();
    Ok((Tensor::new(x1.shape().to_vec(), xt)?, Tensor::new(x1.shape().to_vec(), u)?))
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian<T: Real>(shape: &[usize], rng: &mut RngStream) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = T::of(rng.normal()));
    t
}

/// Euler integration of the learned field from `t = 0` (Gaussian noise) to
/// `t = 1` in `steps` uniform steps. `cond` and `style` are plain values; each
/// step evaluates the decoder on a fresh tape.
pub fn decode_flow<T: Real>(
    arch: &Architecture,
    store: &ParamStore<T>,
    cond: &Tensor<T>,
    style: &Tensor<T>,
    dialect: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("decode_flow needs at least one step".into()));
    }
    let frames = cond.rows();
    let mut x = gaussian::<T>(&[frames, arch.config.channels], rng);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 * dt;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let c = tape.constant(cond.clone())?;
        let s = tape.constant(style.clone())?;
        let v: Var = arch.velocity(&mut tape, store, xv, t, c, s, dialect)?;
        let dtt = T::of(dt);
        for (xi, &vi) in x.data_mut().iter_mut().zip(tape.value(v).data()) {
            *xi += dtt * vi;
        }
    }
    Ok(x)
}
