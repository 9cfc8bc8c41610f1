//! Parallel-set synthesis and the full objective evaluation of a checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cluster::{kmeans_inertia_curve, KMeansOptions};
use super::image::dump_mel_image;
use super::metrics::{
    compute_rtf, compute_secs, dca_from_probabilities, decs_from_embeddings, secs_rank_fraction, ClassificationMetrics, DcaResult, SecsPair,
    Timing,
};
use super::probe::{train_sde_probe, train_sdr_probe, train_speaker_probe, ProbeConfig, SdeProbe, SdrProbe, SpeakerProbe};
use super::project::{project_2d, ProjectionMethod, TsneOptions};
use crate::error::{Error, Result};
use crate::model::{crop_reference, Model};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::{Domain, RngStream};
use crate::synthcorpus::{dialect_label, dialect_oracle, Corpus, CorpusEntry, FrameMatrix, Split, NUM_DIALECTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Euler steps per synthesis.
    pub cfm_steps: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
    pub kmeans_max_k: usize,
    pub kmeans_restarts: usize,
    pub projection: ProjectionMethod,
    pub tsne: TsneOptions,
    /// Number of mel images written per evaluation.
    pub images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cfm_steps: 32,
            seed: 5,
            probe: ProbeConfig::default(),
            kmeans_max_k: 10,
            kmeans_restarts: 8,
            projection: ProjectionMethod::Tsne,
            tsne: TsneOptions::default(),
            images: 3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cfm_steps == 0 || self.kmeans_max_k == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("eval: cfm_steps, kmeans_max_k and kmeans_restarts must be positive".into()));
        }
        self.probe.validate()
    }
}

/// One synthesis job of the parallel evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRequest {
    pub id: String,
    /// Index of the sentence among the distinct test sentences.
    pub sentence: usize,
    pub speaker_id: usize,
    pub dialect: usize,
    pub tokens: Vec<usize>,
    /// Corpus id of the reference utterance.
    pub reference_id: String,
}

/// Requests for every (sentence, test speaker) pair and all three dialects.
/// The reference is the same speaker's recording of the next sentence, in a
/// dialect that rotates with sentence and speaker, so each triplet shares one
/// reference that matches exactly one of its requested dialects. A model that
/// copies the reference's dialect therefore scores chance.
pub fn parallel_requests(corpus: &Corpus) -> Result<Vec<SynthRequest>> {
    let mut sentences: Vec<Vec<usize>> = corpus.split(Split::Test).map(|e| e.record.token_ids.clone()).collect();
    sentences.sort();
    sentences.dedup();
    let mut speakers: Vec<usize> = corpus.split(Split::Test).map(|e| e.record.speaker_id).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if sentences.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let lookup: BTreeMap<(usize, usize, usize), &CorpusEntry> = corpus
        .split(Split::Test)
        .map(|e| {
            let j = sentences.binary_search(&e.record.token_ids).expect("collected above");
            ((j, e.record.speaker_id, e.record.dialect_id), e)
        })
        .collect();
    let mut out = Vec::new();
    for (j, tokens) in sentences.iter().enumerate() {
        for (k, &speaker) in speakers.iter().enumerate() {
            let ref_dialect = (j + k) % NUM_DIALECTS;
            let ref_sentence = (j + 1) % sentences.len();
            let Some(reference) = lookup.get(&(ref_sentence, speaker, ref_dialect)) else {
                log::warn!("no reference for sentence {ref_sentence} speaker {speaker}; skipping");
                continue;
            };
            for dialect in 0..NUM_DIALECTS {
                out.push(SynthRequest {
                    id: format!("par-{j:03}-s{speaker:04}-{}", dialect_label(dialect).expect("valid id")),
                    sentence: j,
                    speaker_id: speaker,
                    dialect,
                    tokens: tokens.clone(),
                    reference_id: reference.id.clone(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub request: SynthRequest,
    pub frames: FrameMatrix,
    pub timing: Timing,
}

/// Synthesizes every request; request `i` draws from its own stream, so
/// outputs do not depend on evaluation order.
pub fn synthesize_requests(model: &Model, corpus: &Corpus, requests: &[SynthRequest], steps: usize, seed: u64) -> Result<Vec<SynthOutput>> {
    let by_id: BTreeMap<&str, &CorpusEntry> = corpus.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    requests
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let reference = by_id.get(r.reference_id.as_str()).ok_or_else(|| Error::InvalidArgument(format!("unknown reference {}", r.reference_id)))?;
            let mut rng = RngStream::derive(seed, Domain::Sample, i as u64);
            let s = model.synthesize(&r.tokens, &reference.record.frames, r.dialect, steps, &mut rng)?;
            let timing = Timing { seconds: s.seconds, frames: s.frames.frames() };
            Ok(SynthOutput { request: r.clone(), frames: s.frames, timing })
        })
        .collect()
}

/// The three probes, trained on real corpus frames only.
#[derive(Clone, Debug)]
pub struct Probes {
    pub sdr: SdrProbe,
    pub sde: SdeProbe,
    pub speaker: SpeakerProbe,
}

impl Probes {
    pub fn train(corpus: &Corpus, cfg: &ProbeConfig) -> Result<Self> {
        Ok(Probes { sdr: train_sdr_probe(corpus, cfg)?, sde: train_sde_probe(corpus, cfg)?, speaker: train_speaker_probe(corpus, cfg)? })
    }
}

/// Probe quality on real frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub sdr_validation: ClassificationMetrics,
    pub sdr_test: ClassificationMetrics,
    /// Fraction of real test utterances where the probe and the band oracle agree.
    pub sdr_oracle_agreement: f64,
    pub sde_within: f64,
    pub sde_cross: f64,
    pub sde_max_centroid_cosine: f64,
    pub sde_l1: f64,
}

impl ProbeReport {
    pub fn measure(probes: &Probes, corpus: &Corpus) -> Result<Self> {
        let sdr_test = probes.sdr.score(corpus, Split::Test)?;
        let (mut agree, mut n) = (0usize, 0usize);
        for e in corpus.split(Split::Test) {
            agree += usize::from(probes.sdr.classify(&e.record.frames)? == dialect_oracle(&e.record.frames));
            n += 1;
        }
        let v = probes.sde.validation;
        Ok(ProbeReport {
            sdr_validation: probes.sdr.validation.clone(),
            sdr_test,
            sdr_oracle_agreement: agree as f64 / n.max(1) as f64,
            sde_within: v.within_cosine,
            sde_cross: v.cross_cosine,
            sde_max_centroid_cosine: v.max_centroid_cosine,
            sde_l1: v.l1_to_centroid,
        })
    }
}

/// Everything measured for one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub variant: String,
    pub utterances: usize,
    pub dca: DcaResult,
    pub decs: f64,
    pub secs: f64,
    /// Fraction of outputs closest to their own speaker's reference.
    pub secs_rank: f64,
    pub rtf_mean: f64,
    pub rtf_std: f64,
    /// Inertia per k of the model's speaker embeddings of real test speech.
    pub inertia: Vec<(usize, f64)>,
    pub probes: ProbeReport,
    /// Output id and its 2-D projected dialect embedding.
    pub projection: Vec<(String, [f64; 2])>,
}

impl EvalReport {
    /// Keys every rendered report carries.
    pub const REQUIRED_FIELDS: &'static [&'static str] = &[
        "variant",
        "utterances",
        "dca",
        "dca.confusion.wz",
        "dca.confusion.ad",
        "dca.confusion.kb",
        "dca.softmax.wz",
        "dca.softmax.ad",
        "dca.softmax.kb",
        "decs",
        "secs",
        "secs.rank",
        "rtf.mean",
        "rtf.std",
        "inertia.k1",
        "probe.sdr.val.accuracy",
        "probe.sdr.val.macro_f1",
        "probe.sdr.val.weighted_f1",
        "probe.sdr.test.accuracy",
        "probe.sdr.oracle_agreement",
        "probe.sde.within",
        "probe.sde.cross",
        "probe.sde.max_centroid_cosine",
        "probe.sde.l1",
    ];

    /// Fields that hold wall-clock measurements.
    pub const WALL_CLOCK_FIELDS: &'static [&'static str] = &["rtf.mean", "rtf.std"];

    /// `key = value` lines under a hash header.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        kv("variant", self.variant.clone());
        kv("utterances", self.utterances.to_string());
        kv("dca", format!("{:.4}", self.dca.percent));
        for d in 0..NUM_DIALECTS {
            let label = dialect_label(d).expect("valid id");
            let row = self.dca.confusion[d].iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            kv(&format!("dca.confusion.{label}"), row);
        }
        for d in 0..NUM_DIALECTS {
            kv(&format!("dca.softmax.{}", dialect_label(d).expect("valid id")), join(&self.dca.softmax_means[d]));
        }
        kv("decs", format!("{:.6}", self.decs));
        kv("secs", format!("{:.6}", self.secs));
        kv("secs.rank", format!("{:.6}", self.secs_rank));
        kv("rtf.mean", format!("{:.6}", self.rtf_mean));
        kv("rtf.std", format!("{:.6}", self.rtf_std));
        for (k, v) in &self.inertia {
            kv(&format!("inertia.k{k}"), format!("{v:.6}"));
        }
        let p = &self.probes;
        kv("probe.sdr.val.accuracy", format!("{:.6}", p.sdr_validation.accuracy));
        kv("probe.sdr.val.macro_f1", format!("{:.6}", p.sdr_validation.macro_f1));
        kv("probe.sdr.val.weighted_f1", format!("{:.6}", p.sdr_validation.weighted_f1));
        kv("probe.sdr.test.accuracy", format!("{:.6}", p.sdr_test.accuracy));
        kv("probe.sdr.oracle_agreement", format!("{:.6}", p.sdr_oracle_agreement));
        kv("probe.sde.within", format!("{:.6}", p.sde_within));
        kv("probe.sde.cross", format!("{:.6}", p.sde_cross));
        kv("probe.sde.max_centroid_cosine", format!("{:.6}", p.sde_max_centroid_cosine));
        kv("probe.sde.l1", format!("{:.6}", p.sde_l1));
        format!("# config_hash={} checkpoint_hash={}\n{s}", self.config_hash, self.checkpoint_hash)
    }

    /// `id x y` per line under the same header.
    pub fn render_coordinates(&self) -> String {
        let mut s = format!("# config_hash={} checkpoint_hash={}\n", self.config_hash, self.checkpoint_hash);
        for (id, [x, y]) in &self.projection {
            writeln!(s, "{id} {x:.6} {y:.6}").expect("string write");
        }
        s
    }
}

/// Parses rendered `key = value` lines; comment lines are skipped.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once(" = ").ok_or_else(|| Error::Format(format!("report line without ' = ': {l:?}")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

/// Model speaker embeddings of real test recordings, one crop each.
pub fn model_speaker_embeddings(model: &Model, corpus: &Corpus, seed: u64) -> Result<Vec<(usize, Vec<f64>)>> {
    corpus
        .split(Split::Test)
        .enumerate()
        .map(|(i, e)| {
            let mut rng = RngStream::derive(seed, Domain::Crop, i as u64);
            let crop = crop_reference(&e.record.frames, model.config().t_crop, &mut rng);
            Ok((e.record.speaker_id, model.encode_speaker(&crop)?.into_iter().map(f64::from).collect()))
        })
        .collect()
}

/// Synthesizes the parallel set and computes every metric.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    probes: &Probes,
    cfg: &EvalConfig,
    checkpoint_hash: &str,
    config_hash: &str,
) -> Result<(EvalReport, Vec<SynthOutput>)> {
    cfg.validate()?;
    let requests = parallel_requests(corpus)?;
    let outputs = synthesize_requests(model, corpus, &requests, cfg.cfm_steps, cfg.seed)?;
    let report = report_for_outputs(model, corpus, probes, cfg, &outputs, checkpoint_hash, config_hash)?;
    Ok((report, outputs))
}

/// Metrics for already synthesized outputs.
pub fn report_for_outputs(
    model: &Model,
    corpus: &Corpus,
    probes: &Probes,
    cfg: &EvalConfig,
    outputs: &[SynthOutput],
    checkpoint_hash: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    if outputs.is_empty() {
        return Err(Error::Empty("synthesis set"));
    }
    let by_id: BTreeMap<&str, &CorpusEntry> = corpus.entries.iter().map(|e| (e.id.as_str(), e)).collect();

    let probs = outputs.iter().map(|o| Ok((o.request.dialect, probes.sdr.net.predict_proba(&o.frames)?))).collect::<Result<Vec<_>>>()?;
    let dca = dca_from_probabilities(&probs)?;
    let dialect_emb = outputs.iter().map(|o| Ok((o.request.dialect, probes.sde.embed(&o.frames)?))).collect::<Result<Vec<_>>>()?;
    let decs = decs_from_embeddings(&dialect_emb, &probes.sde.centroids)?;

    let mut ref_emb: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for o in outputs {
        if !ref_emb.contains_key(o.request.reference_id.as_str()) {
            let Some(entry) = by_id.get(o.request.reference_id.as_str()) else {
                log::warn!("output {} has no reference in the corpus; skipped", o.request.id);
                continue;
            };
            ref_emb.insert(o.request.reference_id.as_str(), probes.speaker.embed(&entry.record.frames)?);
        }
    }
    let mut pairs = Vec::new();
    // Per sentence: reference embedding by speaker, and the outputs.
    type Group = (BTreeMap<usize, Vec<f64>>, Vec<(usize, Vec<f64>)>);
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for o in outputs {
        let Some(r) = ref_emb.get(o.request.reference_id.as_str()) else { continue };
        let z = probes.speaker.embed(&o.frames)?;
        pairs.push(SecsPair { speaker: o.request.speaker_id, reference: r.clone(), output: z.clone() });
        // Rank against the other speakers' references for the same sentence.
        let g = groups.entry(o.request.sentence).or_default();
        g.0.insert(o.request.speaker_id, r.clone());
        g.1.push((o.request.speaker_id, z));
    }
    let secs = compute_secs(&pairs)?;
    let mut wins = Vec::new();
    for (refs, outs) in groups.values() {
        let f = secs_rank_fraction(outs, refs)?;
        wins.push((f, outs.len()));
    }
    let total: usize = wins.iter().map(|w| w.1).sum();
    let secs_rank = wins.iter().map(|(f, n)| f * *n as f64).sum::<f64>() / total.max(1) as f64;

    let timings: Vec<Timing> = outputs.iter().map(|o| o.timing).collect();
    let (rtf_mean, rtf_std) = compute_rtf(&timings)?;

    let spk: Vec<Vec<f64>> = model_speaker_embeddings(model, corpus, cfg.seed)?.into_iter().map(|(_, z)| z).collect();
    let ks: Vec<usize> = (1..=cfg.kmeans_max_k.min(spk.len())).collect();
    let opts = KMeansOptions { restarts: cfg.kmeans_restarts, seed: cfg.seed, ..KMeansOptions::default() };
    let inertia = kmeans_inertia_curve(&spk, &ks, &opts)?;

    let points: Vec<Vec<f64>> = dialect_emb.iter().map(|(_, z)| z.clone()).collect();
    let tsne = TsneOptions { seed: cfg.seed, ..cfg.tsne };
    let coords = project_2d(&points, cfg.projection, &tsne)?;
    let projection = outputs.iter().zip(coords).map(|(o, c)| (o.request.id.clone(), c)).collect();

    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
        variant: model.ablation().label().to_string(),
        utterances: outputs.len(),
        dca,
        decs,
        secs,
        secs_rank,
        rtf_mean,
        rtf_std,
        inertia,
        probes: ProbeReport::measure(probes, corpus)?,
        projection,
    })
}

/// Writes `report.txt`, `coords.txt` and the first `cfg.images` output
/// spectrograms under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, outputs: &[SynthOutput], images: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.txt"), report.render().as_bytes())?;
    write_atomic(&dir.join("coords.txt"), report.render_coordinates().as_bytes())?;
    for o in outputs.iter().take(images) {
        dump_mel_image(&o.frames, &dir.join(format!("{}.pgm", o.request.id)))?;
    }
    Ok(())
}

