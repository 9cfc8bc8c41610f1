mod common;

use common::*;
use fmsd_cli::RunConfig;
use fmsd_core::evaluation::{parse_report, EvalReport};
use fmsd_core::synthcorpus::FrameMatrix;

#[test]
fn defaults_print_a_loadable_config() {
    let o = fmsd(&["defaults"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn unknown_config_key_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearnin_rate = 3\n");
    let o = fmsd(&["--config", cfg.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnin_rate"), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(fmsd(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(fmsd(&[]).status.code(), Some(1));
    assert_eq!(fmsd(&["--help"]).status.code(), Some(0));
}

#[test]
fn gen_corpus_twice_prints_the_same_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = ok(a.path(), &["gen-corpus"]);
    let hb = ok(b.path(), &["gen-corpus"]);
    assert_eq!(ha.trim().len(), 64);
    assert_eq!(ha, hb);
    assert!(a.path().join("corpus/manifest.tsv").exists());
    assert_ne!(ok(a.path(), &["--seed", "9", "gen-corpus"]), ha);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-corpus"]);
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let o = fmsd(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn resume_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY_CONFIG.replace("max_steps = 4", "max_steps = 2"));
    let out = dir.path().to_str().unwrap();
    let o = fmsd(&["--config", cfg.to_str().unwrap(), "--out", out, "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let o = fmsd(&["--config", cfg.to_str().unwrap(), "--out", out, "train", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("train/train.log")).unwrap();
    let steps: Vec<usize> = log
        .lines()
        .filter_map(|l| l.strip_prefix("step="))
        .map(|l| l.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    assert_eq!(log.lines().filter(|l| l.starts_with("# config_hash=")).count(), 1);

    let straight = tempfile::tempdir().unwrap();
    assert_eq!(ok(straight.path(), &["train"]), stdout(&o));
}

#[test]
fn resume_without_state_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let o = fmsd(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "train", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_four_labelled_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["ablate"]);
    let labels: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["full", "no_dsdr", "no_dialect_id", "neither"]);
    for l in labels {
        assert!(dir.path().join("ablate").join(l).join("model.ckpt").exists());
    }
}

#[test]
fn synth_single_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train"]);
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let reference = std::fs::read_dir(dir.path().join("corpus/frames")).unwrap().next().unwrap().unwrap().path();
    let target = dir.path().join("one.frm");
    let text: String = [0x0F03u32, 0x0F10, 0x0F20].iter().map(|&c| char::from_u32(c).unwrap()).collect();
    let base = ["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "synth", "--text", &text];
    let mut args = base.to_vec();
    args.extend(["--reference", reference.to_str().unwrap(), "--dialect", "xx", "--output", target.to_str().unwrap()]);
    let o = fmsd(&args);
    assert_eq!(o.status.code(), Some(1));
    for label in ["wz", "ad", "kb"] {
        assert!(stderr(&o).contains(label), "{}", stderr(&o));
    }
    let mut args = base.to_vec();
    args.extend(["--reference", reference.to_str().unwrap(), "--dialect", "ad", "--output", target.to_str().unwrap()]);
    let o = fmsd(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = FrameMatrix::read(&target).unwrap();
    assert_eq!(frames.channels(), 8);
    assert!(frames.is_finite());

    let n: usize = ok(dir.path(), &["synth"]).trim().parse().unwrap();
    // 2 sentences x 3 speakers, one triplet each.
    assert_eq!(n, 18);
    let timing = std::fs::read_to_string(dir.path().join("synth/timing.tsv")).unwrap();
    let header = timing.lines().next().unwrap();
    assert!(header.starts_with("# config_hash=") && header.contains(" checkpoint_hash="));
    assert_eq!(timing.lines().count(), 2 + n);
    assert!(dir.path().join("synth/par-000-s0003-kb.frm").exists());
}

fn without_wall_clock(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !EvalReport::WALL_CLOCK_FIELDS.iter().any(|f| l.starts_with(&format!("{f} = "))))
        .map(str::to_string)
        .collect()
}

#[test]
fn eval_report_has_every_field_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train"]);
    let first = ok(dir.path(), &["eval"]);
    let fields = parse_report(&first).unwrap();
    for f in EvalReport::REQUIRED_FIELDS {
        assert!(fields.contains_key(*f), "missing {f}");
    }
    assert!(first.starts_with("# config_hash="));
    let written = std::fs::read_to_string(dir.path().join("eval/full/report.txt")).unwrap();
    assert_eq!(written, first);
    assert!(dir.path().join("eval/full/coords.txt").exists());
    let second = ok(dir.path(), &["eval"]);
    assert_eq!(without_wall_clock(&first), without_wall_clock(&second));
}

#[test]
fn eval_ablation_writes_the_ordering_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["ablate"]);
    let out = ok(dir.path(), &["eval", "--ablation"]);
    let summary = std::fs::read_to_string(dir.path().join("eval/ablation.txt")).unwrap();
    assert_eq!(out, summary);
    let fields = parse_report(&summary).unwrap();
    for key in ["full.dca", "neither.decs", "dca.ordered", "dca.full_minus_neither", "decs.full_minus_neither"] {
        assert!(fields.contains_key(key), "missing {key}");
    }
    for l in ["full", "no_dsdr", "no_dialect_id", "neither"] {
        assert!(dir.path().join("eval").join(l).join("report.txt").exists());
    }
}
