//! Procedural multi-speaker, multi-dialect corpus with ground-truth durations.

pub mod corpus;
pub mod oracle;
pub mod profiles;
pub mod render;

pub use corpus::{build_corpus, gen_corpus, load_corpus, Corpus, CorpusConfig, CorpusEntry, CorpusManifest, Split, MANIFEST_FILE};
pub use oracle::dialect_oracle;
pub use profiles::{dialect_label, map_dialect, DialectProfile, SpeakerProfile, DIALECT_LABELS, NUM_DIALECTS};
pub use render::{render_utterance, FrameMatrix, TokenTable, UtteranceRecord};
