#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A run small enough to train, synthesize and evaluate in seconds.
pub const TINY_CONFIG: &str = r#"
[corpus]
channels = 8
train_speakers = 3
test_speakers = 3
train_per_dialect = 6
val_per_dialect = 2
test_sentences = 2
max_tokens = 6

[model]
channels = 8
d_model = 8
speaker_dim = 6
dialect_dim = 4
fusion_out_dim = 8
dsdr_ffn_dim = 12
n_dsdr_blocks = 1
t_crop = 16
ref_encoder_hidden = 8
duration_hidden = 8
decoder_hidden = 8
decoder_blocks = 1
time_embedding_dim = 4
cfm_steps = 4

[train]
batch_size = 3
max_steps = 4
lr = 1e-3
log_every = 1
checkpoint_every = 2

[eval]
cfm_steps = 4
kmeans_max_k = 3
kmeans_restarts = 2
images = 1

[eval.probe]
hidden = 8
embedding_dim = 4
steps = 10
batch_size = 12

[eval.tsne]
iterations = 40
"#;

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn fmsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmsd")).args(args).env("RUST_LOG", "warn").output().expect("spawn fmsd")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs with the tiny config and `--out dir`; panics with stderr on failure.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let cfg = write_config(dir, TINY_CONFIG);
    let mut full = vec!["--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    let o = fmsd(&full);
    assert!(o.status.success(), "fmsd {args:?} failed: {}", stderr(&o));
    stdout(&o)
}
