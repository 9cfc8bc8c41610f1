use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Per parameter: (name, max relative error, coordinates checked).
    pub per_param: Vec<(String, f64, usize)>,
    /// Parameters whose analytic gradient was exactly zero everywhere
    /// (never reached the loss).
    pub untouched: Vec<String>,
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    /// Absolute floor in the relative-error denominator, so that two
    /// near-zero gradients do not produce a spurious large ratio.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords: None, abs_floor: 1e-8, seed: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of a scalar computation against central finite
/// differences `(f(p+eps) - f(p-eps)) / 2eps` for every trainable parameter.
pub fn grad_check<F>(store: &ParamStore<f64>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.scalar(loss);
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }
    let grads = tape.backward(loss)?;

    let mut rng = RngStream::new(opts.seed, 0x6772_6164);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, per_param: Vec::new(), untouched: Vec::new() };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let len = store.get(id).len();
        let analytic: Tensor<f64> = match grads.param(id) {
            Some(g) => g.clone(),
            None => {
                report.untouched.push(store.name(id).to_string());
                Tensor::zeros(store.get(id).shape())
            }
        };
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => {
                let mut all: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic.data()[c], numeric, opts.abs_floor));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push((store.name(id).to_string(), worst, coords.len()));
    }
    Ok(report)
}
