use crate::error::{Error, Result};
use crate::model::flow::{cfm_training_target, gaussian};
use crate::model::{crop_reference, upsample_index, Architecture, Model};
use crate::numerics::{ParamStore, Real, RngStream, Tape, Tensor, Var};
use crate::synthcorpus::UtteranceRecord;

/// One utterance with every random draw of a training step already made.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub dialect: usize,
    /// Normalized target frames.
    pub x1: Tensor<T>,
    /// Noise sample at `t = 0`.
    pub x0: Tensor<T>,
    pub t: f64,
    /// Normalized `t_crop`-row reference crop.
    pub reference: Tensor<T>,
}

impl Example<f32> {
    /// Draws the reference crop (taken from the target itself), the noise and
    /// the flow time from `rng`.
    pub fn prepare(model: &Model, record: &UtteranceRecord, rng: &mut RngStream) -> Result<Self> {
        let crop = crop_reference(&record.frames, model.config().t_crop, rng);
        let reference = model.reference_input(&crop)?;
        let x1 = model.normalize(&record.frames)?;
        let x0 = gaussian(x1.shape(), rng);
        let t = rng.uniform();
        Ok(Example {
            tokens: record.token_ids.clone(),
            durations: record.durations.clone(),
            dialect: record.dialect_id,
            x1,
            x0,
            t,
            reference,
        })
    }
}

impl<T: Real> Example<T> {
    pub fn convert<U: Real>(&self) -> Example<U> {
        Example {
            tokens: self.tokens.clone(),
            durations: self.durations.clone(),
            dialect: self.dialect,
            x1: self.x1.convert(),
            x0: self.x0.convert(),
            t: self.t,
            reference: self.reference.convert(),
        }
    }
}

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dur: f64,
    pub cfm: f64,
    pub reference: f64,
}

/// Batch-mean loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub dur: f64,
    pub cfm: f64,
    pub reference: f64,
}

/// Per-utterance terms on the tape: duration MSE on log-durations, CFM
/// velocity MSE, and the reference loss.
pub fn example_losses<T: Real>(
    arch: &Architecture,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    ex: &Example<T>,
    sigma_min: f64,
) -> Result<[Var; 3]> {
    let r = tape.constant(ex.reference.clone())?;
    let h_spk = arch.speaker_embedding(tape, store, r)?;
    let h_did = arch.dialect_embedding(tape, store, ex.dialect)?;
    let style = arch.style(tape, store, h_spk, h_did)?;
    let enc = arch.encode_text(tape, store, &ex.tokens, style, ex.dialect)?;

    let logd = arch.log_durations(tape, store, enc)?;
    let target: Vec<T> = ex.durations.iter().map(|&d| T::of((d as f64).ln())).collect();
    let target = tape.constant(Tensor::new(vec![target.len(), 1], target)?)?;
    let dur = tape.mse(logd, target)?;

    let index = upsample_index(ex.tokens.len(), &ex.durations)?;
    if index.len() != ex.x1.rows() {
        return Err(Error::shape("total_loss", format!("{} frames but durations sum to {}", ex.x1.rows(), index.len())));
    }
    let cond = tape.gather_rows(enc, &index)?;
    let (xt, u) = cfm_training_target(&ex.x1, &ex.x0, ex.t, sigma_min)?;
    let xt = tape.constant(xt)?;
    let u = tape.constant(u)?;
    let v = arch.velocity(tape, store, xt, ex.t, cond, style, ex.dialect)?;
    let cfm = tape.mse(v, u)?;

    let reference = arch.reference_loss(tape, store, h_spk, h_did)?;
    Ok([dur, cfm, reference])
}

/// `w_dur * dur + w_cfm * cfm + w_ref * ref`, each term averaged over the
/// batch. Utterances are routed one at a time, so every forward pass through
/// a DSDR block takes exactly one private branch.
pub fn total_loss<T: Real>(
    arch: &Architecture,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    batch: &[Example<T>],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut sums: Option<[Var; 3]> = None;
    for ex in batch {
        let terms = example_losses(arch, store, tape, ex, arch.config.sigma_min)?;
        sums = Some(match sums {
            None => terms,
            Some(acc) => [tape.add(acc[0], terms[0])?, tape.add(acc[1], terms[1])?, tape.add(acc[2], terms[2])?],
        });
    }
    let sums = sums.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    let means = [tape.scale(sums[0], T::of(inv))?, tape.scale(sums[1], T::of(inv))?, tape.scale(sums[2], T::of(inv))?];
    let w = [weights.dur, weights.cfm, weights.reference];
    let mut total = tape.scale(means[0], T::of(w[0]))?;
    for k in 1..3 {
        let term = tape.scale(means[k], T::of(w[k]))?;
        total = tape.add(total, term)?;
    }
    let breakdown = LossBreakdown {
        total: tape.scalar(total).as_f64(),
        dur: tape.scalar(means[0]).as_f64(),
        cfm: tape.scalar(means[1]).as_f64(),
        reference: tape.scalar(means[2]).as_f64(),
    };
    Ok((total, breakdown))
}
