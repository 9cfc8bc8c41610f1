use super::*;
use crate::model::arch::reference_cosine;
use crate::model::{Ablation, Model, ModelConfig, RefLossMode};
use crate::numerics::{grad_check, GradCheckOptions, RngStream, Tape, Tensor};
use crate::synthcorpus::{build_corpus, Corpus, CorpusConfig, FrameMatrix, UtteranceRecord};

fn tiny_model_config() -> ModelConfig {
    crate::model::tests::tiny_config()
}

fn tiny_corpus() -> Corpus {
    build_corpus(&CorpusConfig {
        channels: 8,
        train_speakers: 3,
        test_speakers: 2,
        train_per_dialect: 6,
        val_per_dialect: 1,
        test_sentences: 1,
        max_tokens: 6,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig { batch_size: 3, max_steps: 4, lr: 1e-3, log_every: 1, checkpoint_every: 2, ..TrainConfig::default() }
}

/// Two tokens, six frames, eight channels.
fn two_token_example(model: &Model, dialect: usize) -> Example<f64> {
    let mut rng = RngStream::new(42, dialect as u64);
    let frames = FrameMatrix::new(6, 8, (0..48).map(|_| rng.uniform() as f32 + 0.05).collect()).unwrap();
    let record = UtteranceRecord { token_ids: vec![3, 11], speaker_id: 0, dialect_id: dialect, durations: vec![2, 4], frames };
    Example::prepare(model, &record, &mut rng).unwrap().convert()
}

const WEIGHTS: LossWeights = LossWeights { dur: 1.0, cfm: 1.0, reference: 0.1 };

#[test]
fn full_loss_passes_gradient_check_with_exact_zero_private_branches() {
    // The detached duration input would make finite differences disagree
    // with the analytic gradient by design, so the check runs attached. The
    // raised floor absorbs central-difference noise on coordinates whose true
    // gradient is zero (attention key biases are softmax-shift invariant).
    let cfg = ModelConfig { detach_duration_input: false, ..tiny_model_config() };
    let opts = GradCheckOptions { abs_floor: 1e-5, ..GradCheckOptions::default() };
    for (_, ablation) in Ablation::ALL {
        let model = Model::new(&cfg, ablation, 3).unwrap();
        let store = model.params.convert::<f64>();
        let ex = vec![two_token_example(&model, 0)];
        let report = grad_check(&store, opts, |tape, s| {
            Ok(total_loss(&model.arch, s, tape, &ex, WEIGHTS)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {:?}", ablation.label(), report.per_param);
        for (name, err, _) in &report.per_param {
            if name.contains("private1") || name.contains("private2") {
                assert!(report.untouched.contains(name), "{name} received gradient");
                assert_eq!(*err, 0.0, "{name}");
            }
        }
    }
}

#[test]
fn routing_isolation_for_single_dialect_batches() {
    let model = Model::new(&tiny_model_config(), Ablation::FULL, 4).unwrap();
    for d in 0..3 {
        let batch: Vec<Example<f32>> = (0..2).map(|_| two_token_example(&model, d).convert()).collect();
        let mut tape = Tape::new();
        let (loss, _) = total_loss(&model.arch, &model.params, &mut tape, &batch, WEIGHTS).unwrap();
        let grads = tape.backward(loss).unwrap();
        for block in &model.arch.text.blocks {
            for (k, ffn) in block.private.iter().enumerate() {
                for id in ffn.params() {
                    assert_eq!(grads.param(id).is_some(), k == d);
                }
            }
        }
    }
}

#[test]
fn zero_reference_weight_is_the_sum_of_the_other_two() {
    let model = Model::new(&tiny_model_config(), Ablation::FULL, 5).unwrap();
    let batch: Vec<Example<f32>> = (0..3).map(|d| two_token_example(&model, d).convert()).collect();
    let mut tape = Tape::new();
    let w = LossWeights { reference: 0.0, ..WEIGHTS };
    let (_, b) = total_loss(&model.arch, &model.params, &mut tape, &batch, w).unwrap();
    assert_eq!(b.total as f32, b.dur as f32 + b.cfm as f32);
    assert!(b.reference > 0.0);
}

#[test]
fn perfect_duration_predictor_has_zero_duration_loss() {
    let mut model = Model::new(&tiny_model_config(), Ablation::FULL, 6).unwrap();
    let out = model.arch.duration.out.clone();
    model.params.get_mut(out.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    model.params.get_mut(out.b.unwrap()).data_mut()[0] = 3f64.ln() as f32;
    let mut ex = two_token_example(&model, 1).convert::<f32>();
    ex.durations = vec![3, 3];
    let mut tape = Tape::new();
    let (_, b) = total_loss(&model.arch, &model.params, &mut tape, &[ex], WEIGHTS).unwrap();
    assert_eq!(b.dur, 0.0);
}

#[test]
fn total_matches_independent_component_recomputation() {
    let cfg = ModelConfig { ref_loss: RefLossMode::Literal, ..tiny_model_config() };
    let model = Model::new(&cfg, Ablation::FULL, 7).unwrap();
    let store = model.params.convert::<f64>();
    let batch: Vec<Example<f64>> = (0..2).map(|d| two_token_example(&model, d)).collect();
    let mut tape = Tape::new();
    let (_, got) = total_loss(&model.arch, &store, &mut tape, &batch, WEIGHTS).unwrap();

    let (mut dur, mut cfm, mut reference) = (0.0, 0.0, 0.0);
    for ex in &batch {
        let mut t = Tape::new();
        let r = t.constant(ex.reference.clone()).unwrap();
        let h_spk = model.arch.speaker_embedding(&mut t, &store, r).unwrap();
        let h_did = model.arch.dialect_embedding(&mut t, &store, ex.dialect).unwrap();
        let style = model.arch.style(&mut t, &store, h_spk, h_did).unwrap();
        let enc = model.arch.encode_text(&mut t, &store, &ex.tokens, style, ex.dialect).unwrap();
        let logd = model.arch.log_durations(&mut t, &store, enc).unwrap();
        let pred = t.value(logd).data().to_vec();
        dur += pred.iter().zip(&ex.durations).map(|(p, &d)| (p - (d as f64).ln()).powi(2)).sum::<f64>() / pred.len() as f64;

        // Hand-built interpolant and upsampled conditioning.
        let s = cfg.sigma_min;
        let xt: Vec<f64> = ex.x0.data().iter().zip(ex.x1.data()).map(|(n, x)| (1.0 - (1.0 - s) * ex.t) * n + ex.t * x).collect();
        let u: Vec<f64> = ex.x0.data().iter().zip(ex.x1.data()).map(|(n, x)| x - (1.0 - s) * n).collect();
        let enc_v = t.value(enc).clone();
        let rows: Vec<Vec<f64>> = ex
            .durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(enc_v.row_slice(i).to_vec(), d))
            .collect();
        let xt = t.constant(Tensor::new(ex.x1.shape().to_vec(), xt).unwrap()).unwrap();
        let cond = t.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let v = model.arch.velocity(&mut t, &store, xt, ex.t, cond, style, ex.dialect).unwrap();
        cfm += t.value(v).data().iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / u.len() as f64;

        let proj = model.arch.ref_proj.as_ref().unwrap();
        let w = store.get(proj.w);
        let spk = t.value(h_spk).data().to_vec();
        let projected: Vec<f64> = (0..proj.fan_out).map(|j| (0..proj.fan_in).map(|i| spk[i] * w.get2(i, j)).sum()).collect();
        reference += reference_cosine(&projected, t.value(h_did).data(), RefLossMode::Literal).unwrap();
    }
    let n = batch.len() as f64;
    let (dur, cfm, reference) = (dur / n, cfm / n, reference / n);
    let total = WEIGHTS.dur * dur + WEIGHTS.cfm * cfm + WEIGHTS.reference * reference;
    for (a, b) in [(got.dur, dur), (got.cfm, cfm), (got.reference, reference), (got.total, total)] {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn training_is_deterministic_and_logs_valid_losses() {
    let corpus = tiny_corpus();
    let a = train_run(&corpus, &tiny_model_config(), &tiny_train_config(), None, false).unwrap();
    let b = train_run(&corpus, &tiny_model_config(), &tiny_train_config(), None, false).unwrap();
    assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
    let steps: Vec<usize> = a.log.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    for r in &a.log {
        let l = r.losses;
        assert!([l.total, l.dur, l.cfm, l.reference, r.grad_norm].iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    let other = train_run(&corpus, &tiny_model_config(), &TrainConfig { seed: 8, ..tiny_train_config() }, None, false).unwrap();
    assert_ne!(other.checkpoint_hash, a.checkpoint_hash);
}

#[test]
fn zero_learning_rate_leaves_parameters_and_losses_unchanged() {
    let corpus = tiny_corpus();
    let cfg = TrainConfig { lr: 0.0, ..tiny_train_config() };
    let mut trainer = Trainer::new(&corpus, &tiny_model_config(), &cfg).unwrap();
    let before = trainer.model.params.to_named();
    let probe = trainer.batch_examples(99).unwrap();
    let loss_before = trainer.evaluate(&probe).unwrap();
    for _ in 0..3 {
        trainer.train_step().unwrap();
    }
    assert_eq!(trainer.model.params.to_named(), before);
    assert_eq!(trainer.evaluate(&probe).unwrap(), loss_before);
}

#[test]
fn resume_continues_numbering_and_matches_uninterrupted_run() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir { path: dir.path().to_path_buf(), config_hash: "abc".into() };
    let half = TrainConfig { max_steps: 2, ..tiny_train_config() };
    train_run(&corpus, &tiny_model_config(), &half, Some(&run), false).unwrap();
    let resumed = train_run(&corpus, &tiny_model_config(), &tiny_train_config(), Some(&run), true).unwrap();
    assert_eq!(resumed.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 4]);
    let straight = train_run(&corpus, &tiny_model_config(), &tiny_train_config(), None, false).unwrap();
    assert_eq!(resumed.checkpoint_hash, straight.checkpoint_hash);
    let log = std::fs::read_to_string(dir.path().join(run::LOG_FILE)).unwrap();
    let steps: Vec<&str> = log.lines().filter(|l| l.starts_with("step=")).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(steps, vec!["step=1", "step=2", "step=3", "step=4"]);
    assert!(log.starts_with("# config_hash=abc"));
    let mismatched = TrainConfig { no_dsdr: true, ..tiny_train_config() };
    assert!(train_run(&corpus, &tiny_model_config(), &mismatched, Some(&run), true).is_err());
}

#[test]
fn ablate_trains_four_labeled_variants() {
    let corpus = tiny_corpus();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir { path: dir.path().to_path_buf(), config_hash: "h".into() };
    let cfg = TrainConfig { max_steps: 1, ..tiny_train_config() };
    let out = ablate(&corpus, &tiny_model_config(), &cfg, Some(&run)).unwrap();
    assert_eq!(out.len(), 4);
    for (ablation, outcome) in &out {
        assert_eq!(outcome.model.ablation(), *ablation);
        let loaded = Model::load(&variant_checkpoint(dir.path(), *ablation), &tiny_model_config()).unwrap();
        assert_eq!(loaded.ablation(), *ablation);
    }
    let no_dsdr = &out.iter().find(|(a, _)| *a == Ablation::NO_DSDR).unwrap().1.model;
    assert!(no_dsdr.params.iter().all(|(n, _)| !n.contains("private")));
}


#[test]
fn duration_loss_does_not_reach_the_text_encoder() {
    let model = Model::new(&tiny_model_config(), Ablation::FULL, 9).unwrap();
    let ex = two_token_example(&model, 2).convert::<f32>();
    let mut tape = Tape::new();
    let w = LossWeights { dur: 1.0, cfm: 0.0, reference: 0.0 };
    let (loss, _) = total_loss(&model.arch, &model.params, &mut tape, &[ex], w).unwrap();
    let grads = tape.backward(loss).unwrap().dense(&model.params);
    for (i, (name, _)) in model.params.iter().enumerate() {
        let zero = grads[i].data().iter().all(|&g| g == 0.0);
        assert_eq!(zero, !name.starts_with("dur."), "{name}");
    }
}
