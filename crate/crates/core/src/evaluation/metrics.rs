use std::collections::BTreeMap;

use super::probe::{argmax, SdeProbe, SdrProbe};
use crate::error::{Error, Result};
use crate::numerics::cosine;
use crate::synthcorpus::{FrameMatrix, NUM_DIALECTS};

/// Hop length and sample rate that map frame counts to audio seconds.
pub const HOP_LENGTH: usize = 256;
pub const SAMPLE_RATE: usize = 16_000;

/// Mean after sorting, so the result does not depend on input order.
pub fn order_free_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Accuracy, F1 scores and the confusion matrix (rows = true class).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl ClassificationMetrics {
    pub fn from_predictions(labels: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("classification set"));
        }
        if labels.len() != preds.len() {
            return Err(Error::shape("classification", format!("{} labels, {} predictions", labels.len(), preds.len())));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&l, &p) in labels.iter().zip(preds) {
            if l >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!("class id {} out of {classes}", l.max(p))));
            }
            confusion[l][p] += 1;
        }
        let n = labels.len() as f64;
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let (mut macro_f1, mut weighted_f1) = (0.0, 0.0);
        for (c, row) in confusion.iter().enumerate() {
            let tp = row[c] as f64;
            let support: usize = row.iter().sum();
            let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
            let f1 = if support + predicted == 0 { 0.0 } else { 2.0 * tp / (support + predicted) as f64 };
            macro_f1 += f1 / classes as f64;
            weighted_f1 += f1 * support as f64 / n;
        }
        Ok(ClassificationMetrics { accuracy: correct as f64 / n, macro_f1, weighted_f1, confusion })
    }
}

/// Dialect classification accuracy of synthesized speech.
#[derive(Clone, Debug, PartialEq)]
pub struct DcaResult {
    /// Percent in [0, 100].
    pub percent: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Mean probe softmax per requested dialect.
    pub softmax_means: Vec<Vec<f64>>,
}

/// `items` pairs each output with the dialect that was requested for it.
pub fn compute_dca(items: &[(usize, &FrameMatrix)], probe: &SdrProbe) -> Result<DcaResult> {
    let scored = items
        .iter()
        .map(|&(d, f)| Ok((d, probe.net.predict_proba(f)?)))
        .collect::<Result<Vec<_>>>()?;
    dca_from_probabilities(&scored)
}

/// DCA from precomputed probe outputs.
pub fn dca_from_probabilities(items: &[(usize, Vec<f64>)]) -> Result<DcaResult> {
    if items.is_empty() {
        return Err(Error::Empty("DCA set"));
    }
    let labels: Vec<usize> = items.iter().map(|(d, _)| *d).collect();
    let preds: Vec<usize> = items.iter().map(|(_, p)| argmax(p)).collect();
    let m = ClassificationMetrics::from_predictions(&labels, &preds, NUM_DIALECTS)?;
    let softmax_means = (0..NUM_DIALECTS)
        .map(|d| {
            (0..NUM_DIALECTS)
                .map(|k| {
                    let v: Vec<f64> = items.iter().filter(|(r, _)| *r == d).map(|(_, p)| p[k]).collect();
                    order_free_mean(&v).unwrap_or(0.0)
                })
                .collect()
        })
        .collect();
    Ok(DcaResult { percent: 100.0 * m.accuracy, confusion: m.confusion, softmax_means })
}

/// Mean cosine between each output's dialect embedding and the real-speech
/// centroid of its requested dialect.
pub fn compute_decs(items: &[(usize, &FrameMatrix)], probe: &SdeProbe) -> Result<f64> {
    let embedded = items.iter().map(|&(d, f)| Ok((d, probe.embed(f)?))).collect::<Result<Vec<_>>>()?;
    decs_from_embeddings(&embedded, &probe.centroids)
}

pub fn decs_from_embeddings(items: &[(usize, Vec<f64>)], centroids: &[Vec<f64>]) -> Result<f64> {
    let sims = items
        .iter()
        .map(|(d, z)| {
            let c = centroids.get(*d).ok_or(Error::DialectOutOfRange { id: *d, count: centroids.len() })?;
            Ok(cosine(z, c)?.clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    order_free_mean(&sims).ok_or(Error::Empty("DECS set"))
}

/// Reference and output speaker embeddings for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SecsPair {
    pub speaker: usize,
    pub reference: Vec<f64>,
    pub output: Vec<f64>,
}

/// Cosine of reference vs output embeddings, averaged per speaker and then
/// across speakers.
pub fn compute_secs(pairs: &[SecsPair]) -> Result<f64> {
    let mut per_speaker: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        per_speaker.entry(p.speaker).or_default().push(cosine(&p.reference, &p.output)?.clamp(-1.0, 1.0));
    }
    let means: Vec<f64> = per_speaker.values().filter_map(|v| order_free_mean(v)).collect();
    order_free_mean(&means).ok_or(Error::Empty("SECS set"))
}

/// Fraction of outputs whose embedding is closer (by cosine) to their own
/// speaker's reference than to every other speaker's reference.
pub fn secs_rank_fraction(outputs: &[(usize, Vec<f64>)], references: &BTreeMap<usize, Vec<f64>>) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Empty("SECS rank set"));
    }
    let mut wins = 0usize;
    for (speaker, z) in outputs {
        let own = references.get(speaker).ok_or_else(|| Error::InvalidArgument(format!("no reference for speaker {speaker}")))?;
        let own = cosine(z, own)?;
        let mut best_other = f64::NEG_INFINITY;
        for (s, r) in references {
            if s != speaker {
                best_other = best_other.max(cosine(z, r)?);
            }
        }
        wins += usize::from(own > best_other);
    }
    Ok(wins as f64 / outputs.len() as f64)
}

/// Wall-clock time of one synthesis and the frames it produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub seconds: f64,
    pub frames: usize,
}

/// Audio seconds represented by `frames`.
pub fn audio_seconds(frames: usize) -> f64 {
    (frames * HOP_LENGTH) as f64 / SAMPLE_RATE as f64
}

/// Real-time factor mean and population standard deviation.
pub fn compute_rtf(timings: &[Timing]) -> Result<(f64, f64)> {
    if timings.is_empty() {
        return Err(Error::Empty("timings"));
    }
    let rtf = timings
        .iter()
        .map(|t| {
            if t.frames == 0 {
                return Err(Error::InvalidArgument("timing with zero frames".into()));
            }
            Ok(t.seconds / audio_seconds(t.frames))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = rtf.iter().sum::<f64>() / rtf.len() as f64;
    let var = rtf.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rtf.len() as f64;
    Ok((mean, var.sqrt()))
}
