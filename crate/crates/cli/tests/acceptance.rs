//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits nonzero if any fails. The ablation training dominates the
//! runtime (four desk-scale variants of `TRAIN_STEPS` steps each).

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use fmsd_cli::commands::{cmd_eval, cmd_gen_corpus, cmd_synth_batch, cmd_train, AblationSummary, Layout};
use fmsd_cli::RunConfig;
use fmsd_core::evaluation::{
    evaluate_model, kmeans, kmeans_inertia_curve, model_speaker_embeddings, parse_report, pca, train_sdr_probe, EvalConfig, EvalReport, KMeansOptions,
    Probes,
};
use fmsd_core::model::{cfm_training_target, upsample, Ablation, DsdrBlock, DurationPlan, Model, ModelConfig};
use fmsd_core::numerics::{grad_check, GradCheckOptions, RngStream, Tape, Tensor};
use fmsd_core::synthcorpus::{build_corpus, Corpus, CorpusConfig, FrameMatrix, Split, UtteranceRecord};
use fmsd_core::training::{ablate, total_loss, Example, LossWeights, TrainConfig, TrainOutcome, MODEL_FILE};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

const TRAIN_STEPS: usize = 8000;
const DETERMINISM_STEPS: usize = 500;
const WEIGHTS: LossWeights = LossWeights { dur: 1.0, cfm: 1.0, reference: 0.1 };

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 8,
        d_model: 8,
        speaker_dim: 6,
        dialect_dim: 4,
        fusion_out_dim: 8,
        dsdr_ffn_dim: 12,
        heads: 2,
        n_dsdr_blocks: 1,
        t_crop: 5,
        ref_encoder_hidden: 8,
        duration_hidden: 8,
        decoder_hidden: 8,
        decoder_blocks: 1,
        time_embedding_dim: 4,
        cfm_steps: 4,
        ..ModelConfig::default()
    }
}

fn random_frames(rows: usize, channels: usize, rng: &mut RngStream) -> FrameMatrix {
    FrameMatrix::new(rows, channels, (0..rows * channels).map(|_| rng.uniform() as f32 + 0.05).collect()).unwrap()
}

fn random_tensor(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<f32> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal() as f32).collect()).unwrap()
}

/// Two tokens over six frames.
fn two_token_example(model: &Model, dialect: usize, seed: u64) -> Example<f32> {
    let mut rng = RngStream::new(seed, dialect as u64);
    let channels = model.config().channels;
    let record = UtteranceRecord {
        token_ids: vec![3, 11],
        speaker_id: 0,
        dialect_id: dialect,
        durations: vec![2, 4],
        frames: random_frames(6, channels, &mut rng),
    };
    Example::prepare(model, &record, &mut rng).unwrap()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

fn gradient_integrity() -> Check {
    let start = Instant::now();
    // Attached duration input: with the detach, finite differences see a
    // dependency the analytic gradient drops on purpose.
    let cfg = ModelConfig { detach_duration_input: false, ..tiny_model() };
    let opts = GradCheckOptions { abs_floor: 1e-5, ..GradCheckOptions::default() };
    let mut worst = 0f64;
    let mut coords = 0;
    for (_, ablation) in Ablation::ALL {
        let model = Model::new(&cfg, ablation, 3)?;
        let store = model.params.convert::<f64>();
        let batch = vec![two_token_example(&model, 0, 42).convert::<f64>()];
        let report = grad_check(&store, opts, |tape, s| Ok(total_loss(&model.arch, s, tape, &batch, WEIGHTS)?.0))?;
        worst = worst.max(report.max_rel_error);
        coords += report.per_param.iter().map(|p| p.2).sum::<usize>();
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-4 && secs < 60.0, format!("max rel err {worst:.2e} over {coords} coords, {secs:.1}s")))
}

fn routing_isolation() -> Check {
    let model = Model::new(&ModelConfig::default(), Ablation::FULL, 4)?;
    let mut leaks = 0;
    for d in 0..3 {
        let batch: Vec<Example<f32>> = (0..2).map(|i| two_token_example(&model, d, 100 + i)).collect();
        let mut tape = Tape::new();
        let (loss, _) = total_loss(&model.arch, &model.params, &mut tape, &batch, WEIGHTS)?;
        let grads = tape.backward(loss)?;
        for block in &model.arch.text.blocks {
            for (k, ffn) in block.private.iter().enumerate() {
                for id in ffn.params() {
                    let nonzero = grads.param(id).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
                    leaks += usize::from(nonzero != (k == d));
                }
            }
        }
    }

    let mut zeroed = model.clone();
    let mut mismatches = 0;
    for block in &model.arch.text.blocks {
        for ffn in &block.private {
            for id in ffn.params() {
                zeroed.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let mut rng = RngStream::new(8, 0);
    for block in &model.arch.text.blocks {
        let public_only = DsdrBlock { private: Vec::new(), ..block.clone() };
        for d in 0..3 {
            let h = random_tensor(9, model.config().d_model, &mut rng);
            let mut t1 = Tape::new();
            let x = t1.constant(h.clone())?;
            let a = block.forward(&mut t1, &zeroed.params, x, d)?;
            let mut t2 = Tape::new();
            let x = t2.constant(h)?;
            let b = public_only.forward(&mut t2, &zeroed.params, x, d)?;
            mismatches += usize::from(t1.value(a) != t2.value(b));
        }
    }
    Ok((leaks == 0 && mismatches == 0, format!("{leaks} routing leaks, {mismatches} zero-private mismatches")))
}

fn normalization_suite() -> Check {
    let cfg = ModelConfig::default();
    let mut model = Model::new(&cfg, Ablation::FULL, 6)?;
    let mut rng = RngStream::new(11, 0);
    let (mut spk_dev, mut did_dev) = (0f64, 0f64);
    for i in 0..1000 {
        let crop = random_frames(cfg.t_crop, cfg.channels, &mut rng);
        spk_dev = spk_dev.max((norm(&model.encode_speaker(&crop)?) - 1.0).abs());
        let table = model.params.get_mut(model.arch.dialect_table);
        let scale = 10f64.powf(rng.range(-3.0, 3.0));
        table.data_mut().iter_mut().for_each(|v| *v = (rng.normal() * scale) as f32);
        did_dev = did_dev.max((norm(&model.embed_dialect(i % 3)?) - 1.0).abs());
    }

    let mut varying = 0;
    for _ in 0..50 {
        let mut tape = Tape::new();
        let crop = tape.constant(model.reference_input(&random_frames(cfg.t_crop, cfg.channels, &mut rng))?)?;
        let spk = model.arch.speaker_embedding(&mut tape, &model.params, crop)?;
        let did = model.arch.dialect_embedding(&mut tape, &model.params, rng.below(3))?;
        let style = model.arch.style(&mut tape, &model.params, spk, did)?;
        let rows = rng.between(1, 40);
        let h = random_tensor(rows, cfg.d_model, &mut rng);
        let hv = tape.constant(h.clone())?;
        let fused = model.arch.fuse(&mut tape, hv, style)?;
        let (fused, style) = (tape.value(fused), tape.value(style).data());
        for t in 0..rows {
            for (j, &s) in style.iter().enumerate() {
                varying += usize::from(fused.row_slice(t)[j] != h.row_slice(t)[j] + s);
            }
        }
    }

    let mut unconserved = 0;
    for _ in 0..1000 {
        let tokens = rng.between(1, 30);
        let log_d: Vec<f64> = (0..tokens).map(|_| rng.range(-1.0, 3.5)).collect();
        let plan = DurationPlan::from_log(log_d);
        let enc = random_tensor(tokens, 4, &mut rng);
        let up = upsample(&enc, &plan.counts)?;
        let total: usize = plan.counts.iter().sum();
        let mut row = 0;
        let mut copies_ok = true;
        for (i, &c) in plan.counts.iter().enumerate() {
            for _ in 0..c {
                copies_ok &= up.row_slice(row) == enc.row_slice(i);
                row += 1;
            }
        }
        unconserved += usize::from(up.shape()[0] != total || plan.total_frames() != total || !copies_ok);
    }
    let pass = spk_dev <= 1e-6 && did_dev <= 1e-6 && varying == 0 && unconserved == 0;
    Ok((
        pass,
        format!("|h_spk|-1 {spk_dev:.1e}, |h_did|-1 {did_dev:.1e}, {varying} fusion offsets vary, {unconserved} plans not conserved"),
    ))
}

fn sdr_probe_quality(corpus: &Corpus, cfg: &EvalConfig) -> Check {
    let start = Instant::now();
    let probe = train_sdr_probe(corpus, &cfg.probe)?;
    let secs = start.elapsed().as_secs_f64();
    let test = probe.score(corpus, Split::Test)?;
    let val = &probe.validation;
    let worst_acc = val.accuracy.min(test.accuracy);
    let worst_f1 = val.macro_f1.min(test.macro_f1);
    Ok((
        worst_acc >= 0.99 && worst_f1 >= 0.99 && secs < 600.0,
        format!(
            "val acc {:.2}% f1 {:.2}%, test acc {:.2}% f1 {:.2}%, {secs:.0}s",
            100.0 * val.accuracy,
            100.0 * val.macro_f1,
            100.0 * test.accuracy,
            100.0 * test.macro_f1
        ),
    ))
}

fn brute_force_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let cost = |members: &[&Vec<f64>]| -> f64 {
        let dim = members[0].len();
        let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
    };
    (1..(1u32 << n) - 1)
        .map(|mask| {
            let (a, b): (Vec<_>, Vec<_>) = points.iter().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
            let a: Vec<&Vec<f64>> = a.into_iter().map(|x| x.1).collect();
            let b: Vec<&Vec<f64>> = b.into_iter().map(|x| x.1).collect();
            cost(&a) + cost(&b)
        })
        .fold(f64::INFINITY, f64::min)
}

fn clustering_suite(report: &EvalReport, trained: &[(usize, Vec<f64>)]) -> Check {
    let curve = &report.inertia;
    let monotone = curve.windows(2).all(|w| w[1].1 <= w[0].1);
    let opts = KMeansOptions::default();

    let sample: Vec<Vec<f64>> = trained.iter().take(12).map(|p| p.1.clone()).collect();
    let full = kmeans_inertia_curve(&sample, &[sample.len()], &opts)?[0].1;

    let fixture = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![5.0, 0.0], vec![5.0, 1.5]];
    let got = kmeans(&fixture, 2, &opts)?.inertia;
    let oracle = brute_force_two_partition(&fixture);

    let mut rng = RngStream::new(21, 0);
    let mut worst_plane = 0f64;
    for _ in 0..20 {
        let dim = rng.between(3, 12);
        let origin: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (a, b) = (rng.range(-3.0, 3.0), rng.range(-3.0, 3.0));
                (0..dim).map(|d| origin[d] + a * u[d] + b * v[d]).collect()
            })
            .collect();
        let p = pca(&points)?;
        for (pt, c) in points.iter().zip(&p.coords) {
            let back = p.reconstruct(*c);
            worst_plane = worst_plane.max(pt.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let pass = monotone && full == 0.0 && (got - oracle).abs() < 1e-12 && worst_plane < 1e-9;
    Ok((
        pass,
        format!(
            "trained curve k1..k{} non-increasing={monotone}, k=N inertia {full:e}, k2 {got:.6} vs oracle {oracle:.6}, plane err {worst_plane:.1e}",
            curve.len()
        ),
    ))
}

/// Everything a pipeline run leaves behind that must be reproducible.
fn pipeline_artifacts(root: &Path, seed: u64) -> Result<BTreeMap<String, Vec<u8>>, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(Some(seed), false);
    cfg.train.max_steps = DETERMINISM_STEPS;
    cfg.train.checkpoint_every = 250;
    cfg.train.log_every = 50;
    cfg.paths.out = root.to_path_buf();
    cfg.validate()?;
    let layout = Layout::new(root);
    cmd_gen_corpus(&cfg, &layout)?;
    cmd_train(&cfg, &layout, false)?;
    let ckpt = layout.train().join(MODEL_FILE);
    cmd_synth_batch(&cfg, &layout, &ckpt, &layout.corpus())?;
    let report = cmd_eval(&cfg, &layout, None)?;

    let mut out = BTreeMap::new();
    out.insert("model.ckpt".to_string(), std::fs::read(&ckpt)?);
    for entry in std::fs::read_dir(layout.synth())? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "frm") {
            out.insert(format!("synth/{}", path.file_name().unwrap().to_string_lossy()), std::fs::read(&path)?);
        }
    }
    let dir = layout.eval().join(&report.variant);
    let text = std::fs::read_to_string(dir.join("report.txt"))?;
    let mut fields = parse_report(&text)?;
    for k in EvalReport::WALL_CLOCK_FIELDS {
        fields.remove(*k);
    }
    out.insert("report".to_string(), format!("{fields:?}").into_bytes());
    out.insert("coords.txt".to_string(), std::fs::read(dir.join("coords.txt"))?);
    Ok(out)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir()?;
    let a = pipeline_artifacts(&tmp.path().join("a"), 17)?;
    let b = pipeline_artifacts(&tmp.path().join("b"), 17)?;
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let same_keys = a.keys().eq(b.keys());
    Ok((
        same_keys && differing.is_empty() && a.len() > 3,
        format!("{} artifacts compared, differing: {differing:?}", a.len()),
    ))
}

fn cfm_identities() -> bool {
    let mut rng = RngStream::new(31, 0);
    (0..100).all(|_| {
        let x1 = Tensor::<f64>::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let x0 = Tensor::<f64>::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let (start, u) = cfm_training_target(&x1, &x0, 0.0, 0.0).unwrap();
        let (end, u1) = cfm_training_target(&x1, &x0, 1.0, 0.0).unwrap();
        let diff: Vec<f64> = x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
        start == x0 && end == x1 && u.data() == diff.as_slice() && u1 == u
    })
}

fn moving_average(values: &[f64], end: usize) -> f64 {
    let w = &values[end.saturating_sub(100)..end];
    w.iter().sum::<f64>() / w.len() as f64
}

fn cfm_sanity(full: &TrainOutcome, report: &EvalReport, eval_cfg: &EvalConfig) -> Check {
    let identities = cfm_identities();
    let cfm: Vec<f64> = full.log.iter().map(|r| r.losses.cfm).collect();
    let early = moving_average(&cfm, 100);
    let late = moving_average(&cfm, cfm.len());
    let fall = 1.0 - late / early;
    let dca = report.dca.percent;
    Ok((
        identities && fall >= 0.5 && dca >= 90.0 && eval_cfg.cfm_steps == 32,
        format!("endpoint identities {identities}, cfm {early:.3} -> {late:.3} ({:.0}% fall), {}-step DCA {dca:.1}%", 100.0 * fall, eval_cfg.cfm_steps),
    ))
}

struct Harness {
    failures: usize,
}

impl Harness {
    fn run(&mut self, name: &str, check: impl FnOnce() -> Check) {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.failures += usize::from(!pass);
        println!("{} {name}: {detail} [{:.0}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut h = Harness { failures: 0 };
    h.run("01 gradient integrity", gradient_integrity);
    h.run("02 routing isolation", routing_isolation);
    h.run("03 normalization suite", normalization_suite);

    let corpus = build_corpus(&CorpusConfig::default()).expect("default corpus");
    let eval_cfg = EvalConfig::default();
    h.run("07 dialect probe quality", || sdr_probe_quality(&corpus, &eval_cfg));
    h.run("10 pipeline determinism", determinism);

    let start = Instant::now();
    let probes = Probes::train(&corpus, &eval_cfg.probe).expect("probes");
    let base = TrainConfig { max_steps: TRAIN_STEPS, log_every: 1000, ..TrainConfig::default() };
    let trained = ablate(&corpus, &ModelConfig::default(), &base, None).expect("ablation training");
    let mut reports = Vec::new();
    for ((label, _), (_, outcome)) in Ablation::ALL.iter().zip(&trained) {
        let (report, _) = evaluate_model(&outcome.model, &corpus, &probes, &eval_cfg, &outcome.checkpoint_hash, "acceptance")
            .expect("evaluation");
        println!(
            "     {label}: dca {:.1} decs {:.3} secs {:.3} rank {:.3}",
            report.dca.percent, report.decs, report.secs, report.secs_rank
        );
        reports.push((label.to_string(), report));
    }
    println!("     ablation trained and evaluated in {:.0}s", start.elapsed().as_secs_f64());
    let full = &reports[0].1;

    h.run("04 dialect accuracy ordering", || {
        let s = AblationSummary::from_reports(&reports)?;
        let dca: Vec<String> = s.rows.iter().map(|r| format!("{}={:.2}", r.0, r.1)).collect();
        let pass = s.dca_ordered() && s.dca_gap() >= 30.0 && s.neither_offset_from_chance().abs() <= 10.0;
        Ok((
            pass,
            format!(
                "{}, ordered={}, full-neither {:.1}, neither vs chance {:+.1}",
                dca.join(" "),
                s.dca_ordered(),
                s.dca_gap(),
                s.neither_offset_from_chance()
            ),
        ))
    });
    h.run("05 dialect similarity gap", || {
        let s = AblationSummary::from_reports(&reports)?;
        Ok((s.decs_gap() >= 0.2, format!("full-neither DECS {:.3}", s.decs_gap())))
    });
    h.run("06 speaker similarity rank", || {
        Ok((full.secs_rank >= 0.9, format!("{:.1}% closest to own reference over {} outputs", 100.0 * full.secs_rank, full.utterances)))
    });
    h.run("08 real-time factor", || {
        Ok((
            full.rtf_mean < 1.0 && full.utterances >= 100,
            format!("{:.4} +/- {:.4} over {} syntheses", full.rtf_mean, full.rtf_std, full.utterances),
        ))
    });
    h.run("09 clustering and projection", || {
        let emb = model_speaker_embeddings(&trained[0].1.model, &corpus, eval_cfg.seed)?;
        clustering_suite(full, &emb)
    });
    h.run("11 flow matching sanity", || cfm_sanity(&trained[0].1, full, &eval_cfg));

    println!("{} of 11 criteria failed", h.failures);
    if h.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
