use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::TrainConfig;
use super::loss::{total_loss, Example, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::optim::grad_norm;
use crate::numerics::{adamw_step, checkpoint, Domain, OptimizerState, RngStream, Tape, Tensor};
use crate::synthcorpus::{Corpus, CorpusEntry, Split, NUM_DIALECTS};

pub const LOG_FILE: &str = "train.log";
pub const STATE_FILE: &str = "state.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
    /// Wall-clock seconds since the run (or resume) started.
    pub seconds: f64,
}

impl fmt::Display for TrainLogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} total={:.6e} dur={:.6e} cfm={:.6e} ref={:.6e} grad_norm={:.6e} lr={:.6e} seconds={:.3}",
            self.step,
            self.losses.total,
            self.losses.dur,
            self.losses.cfm,
            self.losses.reference,
            self.grad_norm,
            self.lr,
            self.seconds
        )
    }
}

/// Per-channel mean and standard deviation over every train frame.
pub fn normalization_stats(corpus: &Corpus) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut entries = corpus.split(Split::Train).peekable();
    let d = entries.peek().ok_or(Error::Empty("train split"))?.record.frames.channels();
    let (mut sum, mut sq, mut n) = (vec![0.0; d], vec![0.0; d], 0usize);
    for e in entries {
        let f = &e.record.frames;
        for t in 0..f.frames() {
            for (c, &v) in f.row(t).iter().enumerate() {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        n += f.frames();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(1e-8).sqrt()).collect();
    Ok((mean, std))
}

/// Training loop state. Batches and noise depend only on `(seed, step)`, so a
/// resumed run replays exactly the steps an uninterrupted one would take.
pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: OptimizerState<f32>,
    pub config: TrainConfig,
    pub step: usize,
    by_dialect: [Vec<&'a CorpusEntry>; NUM_DIALECTS],
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from `config.seed`, with data statistics
    /// from the train split.
    pub fn new(corpus: &'a Corpus, model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(model_config, config.ablation(), config.seed)?;
        let (mean, std) = normalization_stats(corpus)?;
        model.set_normalization(&mean, &std)?;
        Self::with_model(corpus, model, config)
    }

    pub fn with_model(corpus: &'a Corpus, model: Model, config: &TrainConfig) -> Result<Self> {
        let mut by_dialect: [Vec<&CorpusEntry>; NUM_DIALECTS] = Default::default();
        for e in corpus.split(Split::Train) {
            by_dialect
                .get_mut(e.record.dialect_id)
                .ok_or(Error::DialectOutOfRange { id: e.record.dialect_id, count: NUM_DIALECTS })?
                .push(e);
        }
        if by_dialect.iter().any(Vec::is_empty) {
            return Err(Error::Config("every dialect needs train utterances".into()));
        }
        let optimizer = OptimizerState::new(&model.params, config.optimizer());
        Ok(Trainer { model, optimizer, config: config.clone(), step: 0, by_dialect, started: Instant::now() })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { dur: self.config.lambda_dur, cfm: self.config.lambda_cfm, reference: self.config.lambda_ref }
    }

    /// Dialect-balanced batch for `step`: position `i` draws from dialect
    /// `(i + step) mod 3`.
    pub fn batch_examples(&self, step: usize) -> Result<Vec<Example<f32>>> {
        let mut pick = RngStream::derive(self.config.seed, Domain::Batch, step as u64);
        let mut noise = RngStream::derive(self.config.seed, Domain::Noise, step as u64);
        (0..self.config.batch_size)
            .map(|i| {
                let pool = &self.by_dialect[(i + step) % NUM_DIALECTS];
                let entry = pool[pick.below(pool.len())];
                Example::prepare(&self.model, &entry.record, &mut noise)
            })
            .collect()
    }

    /// Loss of a fixed batch without updating anything.
    pub fn evaluate(&self, batch: &[Example<f32>]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        Ok(total_loss(&self.model.arch, &self.model.params, &mut tape, batch, self.weights())?.1)
    }

    /// Runs one optimizer step and returns its log record.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let step = self.step + 1;
        let batch = self.batch_examples(step)?;
        let mut tape = Tape::new();
        let (loss, losses) = total_loss(&self.model.arch, &self.model.params, &mut tape, &batch, self.weights())?;
        let grads = tape.backward(loss)?.dense(&self.model.params);
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let lr = self.optimizer.current_lr();
        adamw_step(&mut self.model.params, &grads, &mut self.optimizer)?;
        self.step = step;
        Ok(TrainLogRecord { step, losses, grad_norm: norm, lr, seconds: self.started.elapsed().as_secs_f64() })
    }

    /// Model, optimizer moments and step counter as checkpoint entries.
    pub fn state_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut e = self.model.to_entries();
        e.push(("train.step".into(), Tensor::scalar(self.step as f32)));
        e.push(("opt.step".into(), Tensor::scalar(self.optimizer.step as f32)));
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            e.push((format!("opt.m.{name}"), self.optimizer.m[i].clone()));
            e.push((format!("opt.v.{name}"), self.optimizer.v[i].clone()));
        }
        e
    }

    /// Restores a state written by [`Trainer::state_entries`].
    pub fn restore(corpus: &'a Corpus, model_config: &ModelConfig, config: &TrainConfig, entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let model = Model::from_entries(model_config, entries)?;
        if model.ablation() != config.ablation() {
            return Err(Error::Config(format!(
                "state was trained as {} but the config asks for {}",
                model.ablation().label(),
                config.ablation().label()
            )));
        }
        let mut trainer = Self::with_model(corpus, model, config)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("training state lacks {name}")))
        };
        trainer.step = find("train.step")?.data()[0] as usize;
        trainer.optimizer.step = find("opt.step")?.data()[0] as u64;
        let names: Vec<String> = trainer.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            trainer.optimizer.m[i] = find(&format!("opt.m.{name}"))?;
            trainer.optimizer.v[i] = find(&format!("opt.v.{name}"))?;
        }
        Ok(trainer)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainLogRecord>,
    /// sha256 of the final model checkpoint bytes.
    pub checkpoint_hash: String,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    /// Written as the first line of the log.
    pub config_hash: String,
}

/// Trains until `config.max_steps`. With `out`, appends to `train.log`, writes
/// `state.ckpt` every `checkpoint_every` steps and `model.ckpt` at the end;
/// `resume` continues from an existing `state.ckpt`.
pub fn train_run(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out: Option<&RunDir>,
    resume: bool,
) -> Result<TrainOutcome> {
    let mut trainer = match (out, resume) {
        (Some(dir), true) => {
            let entries = checkpoint::load(&dir.path.join(STATE_FILE))?;
            Trainer::restore(corpus, model_config, config, &entries)?
        }
        (None, true) => return Err(Error::Config("resume needs an output directory".into())),
        _ => Trainer::new(corpus, model_config, config)?,
    };
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir.path)?;
            let path = dir.path.join(LOG_FILE);
            let fresh = !resume || !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).truncate(false).open(&path)?;
            if fresh {
                writeln!(f, "# config_hash={} variant={}", dir.config_hash, config.ablation().label())?;
            }
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::new();
    while trainer.step < config.max_steps {
        let rec = trainer.train_step()?;
        let step = rec.step;
        if step % config.log_every == 0 || step == config.max_steps || step == 1 {
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{rec}")?;
            }
            log::info!("[{}] {rec}", config.ablation().label());
        }
        log.push(rec);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                checkpoint::save(&dir.path.join(STATE_FILE), &trainer.state_entries())?;
            }
        }
    }
    let checkpoint_hash = match out {
        Some(dir) => {
            checkpoint::save(&dir.path.join(STATE_FILE), &trainer.state_entries())?;
            trainer.model.save(&dir.path.join(MODEL_FILE))?
        }
        None => checkpoint::sha256_hex(&checkpoint::encode(&trainer.model.to_entries())),
    };
    Ok(TrainOutcome { model: trainer.model, log, checkpoint_hash })
}

/// Trains the four variants with identical seed, corpus and settings; only
/// the ablation flags differ. Results are in `Ablation::ALL` order, and with
/// `out` each variant writes into a subdirectory named after its label.
pub fn ablate(
    corpus: &Corpus,
    model_config: &ModelConfig,
    base: &TrainConfig,
    out: Option<&RunDir>,
) -> Result<Vec<(Ablation, TrainOutcome)>> {
    Ablation::ALL
        .iter()
        .map(|&(label, ablation)| {
            let dir = out.map(|d| RunDir { path: d.path.join(label), config_hash: d.config_hash.clone() });
            let outcome = train_run(corpus, model_config, &base.with_ablation(ablation), dir.as_ref(), false)?;
            Ok((ablation, outcome))
        })
        .collect()
}

/// Path of a variant's model checkpoint inside an ablation directory.
pub fn variant_checkpoint(dir: &Path, ablation: Ablation) -> PathBuf {
    dir.join(ablation.label()).join(MODEL_FILE)
}
