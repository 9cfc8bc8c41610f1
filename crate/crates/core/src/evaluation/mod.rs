//! Objective evaluation: probes trained on real frames, DCA/DECS/SECS/RTF,
//! clustering and projection analyses, spectrogram images and the report.

pub mod cluster;
pub mod image;
pub mod metrics;
pub mod probe;
pub mod project;
pub mod protocol;

pub use cluster::{kmeans, kmeans_inertia_curve, KMeansOptions, KMeansResult};
pub use image::{dump_mel_image, encode_pgm};
pub use metrics::{
    audio_seconds, compute_dca, compute_decs, compute_rtf, compute_secs, secs_rank_fraction, ClassificationMetrics, DcaResult, SecsPair,
    Timing,
};
pub use probe::{train_sde_probe, train_sdr_probe, train_speaker_probe, ProbeConfig, SdeObjective, SdeProbe, SdrProbe, SpeakerProbe};
pub use project::{pca, project_2d, tsne_2d, ProjectionMethod, TsneOptions};
pub use protocol::{
    evaluate_model, model_speaker_embeddings, parallel_requests, parse_report, report_for_outputs, synthesize_requests, write_report, EvalConfig, EvalReport, Probes,
    ProbeReport, SynthOutput, SynthRequest,
};
