//! Small conv + pooling probes trained on real corpus frames: a dialect
//! classifier, a contrastive dialect embedder, and a speaker embedder used in
//! place of a pretrained verification model.

use serde::{Deserialize, Serialize};

use super::metrics::ClassificationMetrics;
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv1d, Linear, ParamBuilder};
use crate::numerics::{adamw_step, AdamWConfig, Domain, OptimizerState, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::synthcorpus::{Corpus, FrameMatrix, Split, NUM_DIALECTS};

/// Frames are compared in the log domain, where envelopes and band gains
/// become additive.
const LOG_FLOOR: f32 = 1e-4;

/// Objective of the dialect-embedding probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeObjective {
    /// Supervised contrastive loss over in-batch pairs.
    Contrastive,
    /// L1 distance to a learned per-dialect unit centroid.
    L1Centroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub sde_objective: SdeObjective,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            embedding_dim: 16,
            steps: 600,
            batch_size: 64,
            lr: 2e-4,
            lr_decay: 0.9999996,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 1e-2,
            temperature: 0.1,
            sde_objective: SdeObjective::Contrastive,
            seed: 11,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe: {m}")));
        if self.hidden == 0 || self.embedding_dim == 0 {
            return bad("hidden and embedding_dim must be positive");
        }
        if self.steps == 0 || self.batch_size < 2 * NUM_DIALECTS {
            return bad("need steps > 0 and batch_size >= 6");
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return bad("lr and temperature must be positive");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }
}

/// conv3 -> SiLU -> conv3 -> SiLU -> time mean -> Linear, with an optional
/// classification head on SiLU of that projection.
#[derive(Clone, Debug)]
pub struct ProbeNet {
    conv1: Conv1d,
    conv2: Conv1d,
    proj: Linear,
    head: Option<Linear>,
    feat_mean: ParamId,
    feat_std: ParamId,
    pub params: ParamStore<f32>,
    channels: usize,
}

impl ProbeNet {
    fn build(channels: usize, cfg: &ProbeConfig, classes: Option<usize>, rng: &mut RngStream) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, rng);
        let conv1 = b.conv1d("conv1", 3, channels, cfg.hidden)?;
        let conv2 = b.conv1d("conv2", 3, cfg.hidden, cfg.hidden)?;
        let proj = b.linear("proj", cfg.hidden, cfg.embedding_dim, true)?;
        let head = classes.map(|k| b.linear("head", cfg.embedding_dim, k, true)).transpose()?;
        let feat_mean = b.constant("feat.mean", &[1, channels], 0.0, false)?;
        let feat_std = b.constant("feat.std", &[1, channels], 1.0, false)?;
        Ok(ProbeNet { conv1, conv2, proj, head, feat_mean, feat_std, params, channels })
    }

    /// Fits the per-channel log-feature statistics to `frames`.
    fn fit_features<'a>(&mut self, frames: impl Iterator<Item = &'a FrameMatrix>) {
        let d = self.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; d], vec![0.0f64; d], 0usize);
        for f in frames {
            for t in 0..f.frames() {
                for (c, &v) in f.row(t).iter().enumerate() {
                    let l = v.max(LOG_FLOOR).ln() as f64;
                    sum[c] += l;
                    sq[c] += l * l;
                }
            }
            n += f.frames();
        }
        let n = n.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sq.iter().zip(&mean).map(|(s, &m)| ((s / n - (m as f64).powi(2)).max(1e-8).sqrt()) as f32).collect();
        self.params.get_mut(self.feat_mean).data_mut().copy_from_slice(&mean);
        self.params.get_mut(self.feat_std).data_mut().copy_from_slice(&std);
    }

    fn features(&self, frames: &FrameMatrix) -> Result<Tensor<f32>> {
        if frames.channels() != self.channels {
            return Err(Error::shape("probe", format!("{} channels, probe expects {}", frames.channels(), self.channels)));
        }
        let (m, s) = (self.params.get(self.feat_mean).data(), self.params.get(self.feat_std).data());
        let data = frames
            .data()
            .chunks_exact(self.channels)
            .flat_map(|row| row.iter().zip(m).zip(s).map(|((&v, &mu), &sd)| (v.max(LOG_FLOOR).ln() - mu) / sd))
            .collect();
        Tensor::new(vec![frames.frames(), self.channels], data)
    }

    /// `[1, embedding_dim]` pre-normalization embedding.
    fn project(&self, tape: &mut Tape<f32>, frames: &FrameMatrix) -> Result<Var> {
        let x = tape.constant(self.features(frames)?)?;
        let h = self.conv1.forward(tape, &self.params, x)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, &self.params, h)?;
        let h = tape.silu(h)?;
        let pooled = tape.mean_rows(h)?;
        self.proj.forward(tape, &self.params, pooled)
    }

    fn logits(&self, tape: &mut Tape<f32>, frames: &FrameMatrix) -> Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| Error::InvalidArgument("probe has no classification head".into()))?;
        let e = self.project(tape, frames)?;
        let e = tape.silu(e)?;
        head.forward(tape, &self.params, e)
    }

    fn embedding_var(&self, tape: &mut Tape<f32>, frames: &FrameMatrix) -> Result<Var> {
        let e = self.project(tape, frames)?;
        tape.l2_normalize_rows(e)
    }

    /// Class probabilities.
    pub fn predict_proba(&self, frames: &FrameMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, frames)?;
        let p = tape.softmax_rows(l)?;
        Ok(tape.value(p).data().iter().map(|&v| v as f64).collect())
    }

    /// Unit-norm embedding.
    pub fn embed(&self, frames: &FrameMatrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.embedding_var(&mut tape, frames)?;
        Ok(tape.value(e).data().iter().map(|&v| v as f64).collect())
    }
}

/// Labelled frames drawn in class-balanced batches.
struct LabelledPool<'a> {
    by_class: Vec<Vec<&'a FrameMatrix>>,
}

impl<'a> LabelledPool<'a> {
    fn new(items: impl Iterator<Item = (usize, &'a FrameMatrix)>, classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        for (label, frames) in items {
            by_class.get_mut(label).ok_or_else(|| Error::InvalidArgument(format!("label {label} >= {classes}")))?.push(frames);
        }
        if by_class.iter().any(Vec::is_empty) {
            return Err(Error::Empty("probe class"));
        }
        Ok(LabelledPool { by_class })
    }

    /// Classes rotate from a random offset so that uneven batch sizes do not
    /// favour the low class ids.
    fn batch(&self, size: usize, rng: &mut RngStream) -> Vec<(usize, &'a FrameMatrix)> {
        let offset = rng.below(self.by_class.len());
        (0..size)
            .map(|i| {
                let c = (i + offset) % self.by_class.len();
                let pool = &self.by_class[c];
                (c, pool[rng.below(pool.len())])
            })
            .collect()
    }
}

/// Mean negative log-likelihood over a batch.
fn classification_loss(net: &ProbeNet, tape: &mut Tape<f32>, batch: &[(usize, &FrameMatrix)], classes: usize) -> Result<Var> {
    let rows = batch.iter().map(|(_, f)| net.logits(tape, f)).collect::<Result<Vec<_>>>()?;
    let logits = tape.concat_rows(&rows)?;
    let ls = tape.log_softmax_rows(logits)?;
    let mut onehot = Tensor::zeros(&[batch.len(), classes]);
    for (i, (c, _)) in batch.iter().enumerate() {
        onehot.data_mut()[i * classes + c] = -1.0 / batch.len() as f32;
    }
    let onehot = tape.constant(onehot)?;
    let picked = tape.mul(ls, onehot)?;
    tape.sum(picked)
}

/// Supervised contrastive loss: every same-label pair in the batch is a
/// positive, self-similarity is masked out.
fn contrastive_loss(net: &ProbeNet, tape: &mut Tape<f32>, batch: &[(usize, &FrameMatrix)], temperature: f64) -> Result<Var> {
    let rows = batch.iter().map(|(_, f)| net.embedding_var(tape, f)).collect::<Result<Vec<_>>>()?;
    let z = tape.concat_rows(&rows)?;
    let sim = tape.matmul_t(z, z)?;
    let sim = tape.scale(sim, (1.0 / temperature) as f32)?;
    let n = batch.len();
    let mut mask = Tensor::zeros(&[n, n]);
    let mut weights = Tensor::zeros(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = -1e4;
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && batch[j].0 == batch[i].0).collect();
        for &j in &positives {
            weights.data_mut()[i * n + j] = -1.0 / (positives.len() * n) as f32;
        }
    }
    let mask = tape.constant(mask)?;
    let masked = tape.add(sim, mask)?;
    let ls = tape.log_softmax_rows(masked)?;
    let weights = tape.constant(weights)?;
    let picked = tape.mul(ls, weights)?;
    tape.sum(picked)
}

fn train_net(
    net: &mut ProbeNet,
    pool: &LabelledPool<'_>,
    cfg: &ProbeConfig,
    stream: u64,
    loss: impl Fn(&ProbeNet, &mut Tape<f32>, &[(usize, &FrameMatrix)]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut opt = OptimizerState::new(&net.params, cfg.optimizer());
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = RngStream::derive(cfg.seed, Domain::Probe, stream * 1_000_000 + step as u64);
        let batch = pool.batch(cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let l = loss(net, &mut tape, &batch)?;
        history.push(tape.scalar(l) as f64);
        let grads = tape.backward(l)?.dense(&net.params);
        adamw_step(&mut net.params, &grads, &mut opt)?;
    }
    Ok(history)
}

fn split_frames(corpus: &Corpus, split: Split) -> impl Iterator<Item = &FrameMatrix> {
    corpus.split(split).map(|e| &e.record.frames)
}

/// Dialect classifier with its held-out scores.
#[derive(Clone, Debug)]
pub struct SdrProbe {
    pub net: ProbeNet,
    /// Scores on the validation split.
    pub validation: ClassificationMetrics,
    pub loss_history: Vec<f64>,
}

impl SdrProbe {
    pub fn classify(&self, frames: &FrameMatrix) -> Result<usize> {
        Ok(argmax(&self.net.predict_proba(frames)?))
    }

    /// Scores the probe on one split of real frames.
    pub fn score(&self, corpus: &Corpus, split: Split) -> Result<ClassificationMetrics> {
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for e in corpus.split(split) {
            labels.push(e.record.dialect_id);
            preds.push(self.classify(&e.record.frames)?);
        }
        ClassificationMetrics::from_predictions(&labels, &preds, NUM_DIALECTS)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// Trains the dialect classifier on the train split and scores it on the
/// validation split.
pub fn train_sdr_probe(corpus: &Corpus, cfg: &ProbeConfig) -> Result<SdrProbe> {
    cfg.validate()?;
    let channels = channels_of(corpus)?;
    let mut rng = RngStream::derive(cfg.seed, Domain::Probe, 0);
    let mut net = ProbeNet::build(channels, cfg, Some(NUM_DIALECTS), &mut rng)?;
    net.fit_features(split_frames(corpus, Split::Train));
    let pool = LabelledPool::new(corpus.split(Split::Train).map(|e| (e.record.dialect_id, &e.record.frames)), NUM_DIALECTS)?;
    let loss_history = train_net(&mut net, &pool, cfg, 1, |n, t, b| classification_loss(n, t, b, NUM_DIALECTS))?;
    let mut probe = SdrProbe { net, validation: ClassificationMetrics::default(), loss_history };
    probe.validation = probe.score(corpus, Split::Val)?;
    if probe.validation.accuracy < 0.9 {
        log::warn!("dialect probe reached only {:.2}% validation accuracy", 100.0 * probe.validation.accuracy);
    }
    Ok(probe)
}

/// Dialect embedder plus centroids of real train utterances.
#[derive(Clone, Debug)]
pub struct SdeProbe {
    pub net: ProbeNet,
    /// Unit-norm mean embedding per dialect.
    pub centroids: Vec<Vec<f64>>,
    pub validation: SdeValidation,
    pub loss_history: Vec<f64>,
}

/// Held-out statistics of the dialect embedder.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdeValidation {
    pub within_cosine: f64,
    pub cross_cosine: f64,
    /// Largest pairwise cosine between centroids.
    pub max_centroid_cosine: f64,
    /// Mean per-coordinate L1 distance to the own-dialect centroid.
    pub l1_to_centroid: f64,
}

impl SdeProbe {
    pub fn embed(&self, frames: &FrameMatrix) -> Result<Vec<f64>> {
        self.net.embed(frames)
    }
}

fn centroid_loss(net: &ProbeNet, table: ParamId, tape: &mut Tape<f32>, batch: &[(usize, &FrameMatrix)]) -> Result<Var> {
    let rows = batch.iter().map(|(_, f)| net.embedding_var(tape, f)).collect::<Result<Vec<_>>>()?;
    let z = tape.concat_rows(&rows)?;
    let c = tape.param(&net.params, table)?;
    let c = tape.l2_normalize_rows(c)?;
    let labels: Vec<usize> = batch.iter().map(|(l, _)| *l).collect();
    let targets = tape.gather_rows(c, &labels)?;
    let diff = tape.sub(z, targets)?;
    let a = tape.abs(diff)?;
    let l1 = tape.mean(a)?;
    // Keeps the centroids apart; without it every centroid can collapse
    // onto one point with zero L1 loss.
    let gram = tape.matmul_t(c, c)?;
    let spread = tape.mean(gram)?;
    tape.add(l1, spread)
}

pub fn train_sde_probe(corpus: &Corpus, cfg: &ProbeConfig) -> Result<SdeProbe> {
    cfg.validate()?;
    let channels = channels_of(corpus)?;
    let mut rng = RngStream::derive(cfg.seed, Domain::Probe, 2);
    let mut net = ProbeNet::build(channels, cfg, None, &mut rng)?;
    net.fit_features(split_frames(corpus, Split::Train));
    let pool = LabelledPool::new(corpus.split(Split::Train).map(|e| (e.record.dialect_id, &e.record.frames)), NUM_DIALECTS)?;
    let loss_history = match cfg.sde_objective {
        SdeObjective::Contrastive => train_net(&mut net, &pool, cfg, 3, |n, t, b| contrastive_loss(n, t, b, cfg.temperature))?,
        SdeObjective::L1Centroid => {
            let table = {
                let mut b = ParamBuilder::new(&mut net.params, &mut rng);
                b.normal("centroids", &[NUM_DIALECTS, cfg.embedding_dim], 1.0)?
            };
            train_net(&mut net, &pool, cfg, 3, |n, t, b| centroid_loss(n, table, t, b))?
        }
    };

    let mut sums = vec![vec![0.0; cfg.embedding_dim]; NUM_DIALECTS];
    for e in corpus.split(Split::Train) {
        let z = net.embed(&e.record.frames)?;
        sums[e.record.dialect_id].iter_mut().zip(&z).for_each(|(s, v)| *s += v);
    }
    let centroids = sums.iter().map(|s| crate::numerics::l2_normalize(s)).collect::<Result<Vec<_>>>()?;
    let mut probe = SdeProbe { net, centroids, validation: SdeValidation::default(), loss_history };
    probe.validation = probe.validate_on(corpus, Split::Val)?;
    Ok(probe)
}

impl SdeProbe {
    /// Within/cross dialect cosine statistics on one split.
    pub fn validate_on(&self, corpus: &Corpus, split: Split) -> Result<SdeValidation> {
        let items: Vec<(usize, Vec<f64>)> =
            corpus.split(split).map(|e| Ok((e.record.dialect_id, self.embed(&e.record.frames)?))).collect::<Result<_>>()?;
        if items.len() < 2 {
            return Err(Error::Empty("probe validation split"));
        }
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let c = dot(&items[i].1, &items[j].1);
                if items[i].0 == items[j].0 {
                    within += c;
                    nw += 1;
                } else {
                    cross += c;
                    nc += 1;
                }
            }
        }
        let mut max_centroid_cosine = f64::NEG_INFINITY;
        for a in 0..NUM_DIALECTS {
            for b in a + 1..NUM_DIALECTS {
                max_centroid_cosine = max_centroid_cosine.max(dot(&self.centroids[a], &self.centroids[b]));
            }
        }
        let l1: f64 = items
            .iter()
            .map(|(d, z)| z.iter().zip(&self.centroids[*d]).map(|(a, b)| (a - b).abs()).sum::<f64>() / z.len() as f64)
            .sum::<f64>()
            / items.len() as f64;
        Ok(SdeValidation {
            within_cosine: within / nw.max(1) as f64,
            cross_cosine: cross / nc.max(1) as f64,
            max_centroid_cosine,
            l1_to_centroid: l1,
        })
    }
}

/// Speaker embedder trained as a classifier over the train speakers; the
/// normalized projection generalizes to unseen speakers.
#[derive(Clone, Debug)]
pub struct SpeakerProbe {
    pub net: ProbeNet,
    pub loss_history: Vec<f64>,
}

impl SpeakerProbe {
    pub fn embed(&self, frames: &FrameMatrix) -> Result<Vec<f64>> {
        self.net.embed(frames)
    }
}

pub fn train_speaker_probe(corpus: &Corpus, cfg: &ProbeConfig) -> Result<SpeakerProbe> {
    cfg.validate()?;
    let channels = channels_of(corpus)?;
    let mut speakers: Vec<usize> = corpus.split(Split::Train).map(|e| e.record.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let class_of = |s: usize| speakers.binary_search(&s).expect("train speaker");
    let mut rng = RngStream::derive(cfg.seed, Domain::Probe, 4);
    let mut net = ProbeNet::build(channels, cfg, Some(speakers.len()), &mut rng)?;
    net.fit_features(split_frames(corpus, Split::Train));
    let pool = LabelledPool::new(corpus.split(Split::Train).map(|e| (class_of(e.record.speaker_id), &e.record.frames)), speakers.len())?;
    let batch = cfg.batch_size.max(speakers.len());
    let cfg = ProbeConfig { batch_size: batch, ..cfg.clone() };
    let n = speakers.len();
    let loss_history = train_net(&mut net, &pool, &cfg, 5, |p, t, b| classification_loss(p, t, b, n))?;
    Ok(SpeakerProbe { net, loss_history })
}

fn channels_of(corpus: &Corpus) -> Result<usize> {
    Ok(corpus.split(Split::Train).next().ok_or(Error::Empty("train split"))?.record.frames.channels())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
