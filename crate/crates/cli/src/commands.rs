use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fmsd_core::evaluation::{
    evaluate_model, parallel_requests, synthesize_requests, write_report, EvalReport, Probes, SynthOutput,
};
use fmsd_core::model::{Ablation, Model};
use fmsd_core::numerics::checkpoint::{sha256_hex, write_atomic};
use fmsd_core::numerics::{Domain, RngStream};
use fmsd_core::synthcorpus::{gen_corpus, load_corpus, Corpus, FrameMatrix};
use fmsd_core::training::{ablate, train_run, variant_checkpoint, RunDir, MODEL_FILE};

use crate::config::RunConfig;
use crate::error::CliError;

pub const TIMING_FILE: &str = "timing.tsv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation.txt";

/// Fixed layout under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn synth(&self) -> PathBuf {
        self.root.join("synth")
    }
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Writes the corpus and returns its manifest hash.
pub fn cmd_gen_corpus(cfg: &RunConfig, layout: &Layout) -> Result<String, CliError> {
    let (_, manifest) = gen_corpus(&cfg.corpus, &layout.corpus())?;
    log::info!("wrote {} utterances to {}", manifest.lines.len(), layout.corpus().display());
    Ok(manifest.manifest_hash)
}

/// Loads the corpus under the layout, generating it first when absent. A
/// corpus generated from different settings is an error, not a silent reuse.
pub fn ensure_corpus(cfg: &RunConfig, layout: &Layout) -> Result<Corpus, CliError> {
    let dir = layout.corpus();
    if !dir.join(fmsd_core::synthcorpus::MANIFEST_FILE).exists() {
        log::info!("no corpus at {}; generating", dir.display());
        return Ok(gen_corpus(&cfg.corpus, &dir)?.0);
    }
    let corpus = load_corpus(&dir)?;
    let want = cfg.corpus.hash();
    if corpus.config_hash != want {
        return Err(CliError::Data(format!(
            "corpus at {} was generated with config {} but the run uses {want}; rerun gen-corpus",
            dir.display(),
            corpus.config_hash
        )));
    }
    Ok(corpus)
}

fn run_dir(path: PathBuf, cfg: &RunConfig) -> RunDir {
    RunDir { path, config_hash: cfg.hash() }
}

/// Trains the configured variant; returns the checkpoint hash.
pub fn cmd_train(cfg: &RunConfig, layout: &Layout, resume: bool) -> Result<String, CliError> {
    let corpus = ensure_corpus(cfg, layout)?;
    let dir = run_dir(layout.train(), cfg);
    if resume && !dir.path.join(fmsd_core::training::STATE_FILE).exists() {
        return Err(CliError::Data(format!("nothing to resume in {}", dir.path.display())));
    }
    let out = train_run(&corpus, &cfg.model, &cfg.train, Some(&dir), resume)?;
    Ok(out.checkpoint_hash)
}

/// Trains all four variants; returns (label, checkpoint hash) pairs.
pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<(String, String)>, CliError> {
    let corpus = ensure_corpus(cfg, layout)?;
    let runs = ablate(&corpus, &cfg.model, &cfg.train, Some(&run_dir(layout.ablate(), cfg)))?;
    Ok(runs.into_iter().map(|(a, o)| (a.label().to_string(), o.checkpoint_hash)).collect())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, String), CliError> {
    let hash = file_hash(path)?;
    Ok((Model::load(path, &cfg.model)?, hash))
}

/// Synthesizes `text` in `dialect` with the voice of the `reference` frame
/// file and writes the frames to `output`.
pub fn cmd_synth_one(
    cfg: &RunConfig,
    checkpoint: &Path,
    text: &str,
    reference: &Path,
    dialect: &str,
    output: &Path,
) -> Result<FrameMatrix, CliError> {
    // Validate cheap inputs before touching the checkpoint.
    fmsd_core::synthcorpus::map_dialect(dialect)?;
    let reference = FrameMatrix::read(reference).map_err(|e| CliError::Data(format!("reference {}: {e}", reference.display())))?;
    let (model, _) = load_model(cfg, checkpoint)?;
    let mut rng = RngStream::derive(cfg.eval.seed, Domain::Sample, 0);
    let s = model.synthesize_text(text, &reference, dialect, cfg.eval.cfm_steps, &mut rng)?;
    s.frames.write(output)?;
    log::info!("{} frames in {:.3}s -> {}", s.frames.frames(), s.seconds, output.display());
    Ok(s.frames)
}

/// Parallel triplets for every (sentence, speaker) of the corpus test split.
/// Frames go to `synth/<id>.frm`; the timing sidecar records wall-clock
/// seconds and frame counts for RTF.
pub fn cmd_synth_batch(cfg: &RunConfig, layout: &Layout, checkpoint: &Path, corpus_dir: &Path) -> Result<Vec<SynthOutput>, CliError> {
    let corpus = load_corpus(corpus_dir)?;
    let (model, ckpt_hash) = load_model(cfg, checkpoint)?;
    let requests = parallel_requests(&corpus)?;
    let outputs = synthesize_requests(&model, &corpus, &requests, cfg.eval.cfm_steps, cfg.eval.seed)?;
    let dir = layout.synth();
    let mut sidecar = format!("# config_hash={} checkpoint_hash={ckpt_hash}\nid\treference\tdialect\tframes\tseconds\n", cfg.hash());
    for o in &outputs {
        o.frames.write(&dir.join(format!("{}.frm", o.request.id)))?;
        let label = fmsd_core::synthcorpus::dialect_label(o.request.dialect)?;
        writeln!(sidecar, "{}\t{}\t{label}\t{}\t{:.6}", o.request.id, o.request.reference_id, o.timing.frames, o.timing.seconds).unwrap();
    }
    write_atomic(&dir.join(TIMING_FILE), sidecar.as_bytes())?;
    log::info!("{} utterances in {} triplets -> {}", outputs.len(), outputs.len() / 3, dir.display());
    Ok(outputs)
}

fn eval_one(cfg: &RunConfig, corpus: &Corpus, probes: &Probes, model: &Model, ckpt_hash: &str, dir: &Path) -> Result<EvalReport, CliError> {
    let (report, outputs) = evaluate_model(model, corpus, probes, &cfg.eval, ckpt_hash, &cfg.hash())?;
    write_report(dir, &report, &outputs, cfg.eval.images)?;
    log::info!(
        "[{}] dca={:.2} decs={:.4} secs={:.4} secs_rank={:.4} rtf={:.4}",
        report.variant,
        report.dca.percent,
        report.decs,
        report.secs,
        report.secs_rank,
        report.rtf_mean
    );
    Ok(report)
}

/// Evaluates one checkpoint into `eval/<variant>/`.
pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, checkpoint: Option<&Path>) -> Result<EvalReport, CliError> {
    let corpus = ensure_corpus(cfg, layout)?;
    let probes = Probes::train(&corpus, &cfg.eval.probe)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.train().join(MODEL_FILE));
    let (model, hash) = load_model(cfg, &ckpt)?;
    eval_one(cfg, &corpus, &probes, &model, &hash, &layout.eval().join(model.ablation().label()))
}

/// Evaluates the four variants under `ablate/` with one set of probes and
/// writes the ordering summary.
pub fn cmd_eval_ablation(cfg: &RunConfig, layout: &Layout) -> Result<AblationSummary, CliError> {
    let corpus = ensure_corpus(cfg, layout)?;
    let probes = Probes::train(&corpus, &cfg.eval.probe)?;
    let mut reports = Vec::new();
    for (label, ablation) in Ablation::ALL {
        let (model, hash) = load_model(cfg, &variant_checkpoint(&layout.ablate(), ablation))?;
        reports.push((label.to_string(), eval_one(cfg, &corpus, &probes, &model, &hash, &layout.eval().join(label))?));
    }
    let summary = AblationSummary::from_reports(&reports)?;
    write_atomic(&layout.eval().join(ABLATION_SUMMARY_FILE), summary.render(&cfg.hash()).as_bytes())?;
    Ok(summary)
}

/// Per-variant headline numbers and the ordering checks between them.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    /// (label, DCA percent, DECS) in `Ablation::ALL` order.
    pub rows: Vec<(String, f64, f64)>,
}

pub const CHANCE_PERCENT: f64 = 100.0 / 3.0;

impl AblationSummary {
    pub fn from_reports(reports: &[(String, EvalReport)]) -> Result<Self, CliError> {
        let rows: Vec<(String, f64, f64)> = reports.iter().map(|(l, r)| (l.clone(), r.dca.percent, r.decs)).collect();
        let summary = AblationSummary { rows };
        for (label, _) in Ablation::ALL {
            summary.get(label)?;
        }
        Ok(summary)
    }

    fn get(&self, label: &str) -> Result<(f64, f64), CliError> {
        self.rows
            .iter()
            .find(|r| r.0 == label)
            .map(|r| (r.1, r.2))
            .ok_or_else(|| CliError::Data(format!("ablation summary lacks variant {label}")))
    }

    fn dca(&self, label: &str) -> f64 {
        self.get(label).map(|v| v.0).unwrap_or(f64::NAN)
    }

    fn decs(&self, label: &str) -> f64 {
        self.get(label).map(|v| v.1).unwrap_or(f64::NAN)
    }

    /// full > no_dialect_id > no_dsdr > neither, strictly.
    pub fn dca_ordered(&self) -> bool {
        let v = ["full", "no_dialect_id", "no_dsdr", "neither"].map(|l| self.dca(l));
        v.windows(2).all(|w| w[0] > w[1])
    }

    pub fn dca_gap(&self) -> f64 {
        self.dca("full") - self.dca("neither")
    }

    pub fn neither_offset_from_chance(&self) -> f64 {
        self.dca("neither") - CHANCE_PERCENT
    }

    pub fn decs_gap(&self) -> f64 {
        self.decs("full") - self.decs("neither")
    }

    pub fn render(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\n");
        for (label, dca, decs) in &self.rows {
            writeln!(s, "{label}.dca = {dca:.4}\n{label}.decs = {decs:.6}").unwrap();
        }
        writeln!(s, "dca.ordered = {}", self.dca_ordered()).unwrap();
        writeln!(s, "dca.full_minus_neither = {:.4}", self.dca_gap()).unwrap();
        writeln!(s, "dca.neither_minus_chance = {:.4}", self.neither_offset_from_chance()).unwrap();
        writeln!(s, "decs.full_minus_neither = {:.6}", self.decs_gap()).unwrap();
        s
    }
}
