//! Shared fixtures for the criterion benches.

use fmsd_core::synthcorpus::{build_corpus, Corpus, CorpusConfig};

/// Default channel count and vocabulary with a corpus small enough to build
/// in well under a second.
pub fn bench_corpus() -> Corpus {
    build_corpus(&CorpusConfig { train_speakers: 8, test_speakers: 2, train_per_dialect: 48, val_per_dialect: 4, test_sentences: 2, ..CorpusConfig::default() })
        .expect("valid bench corpus")
}
