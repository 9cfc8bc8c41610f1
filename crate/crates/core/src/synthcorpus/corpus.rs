use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::profiles::{default_profiles, dialect_label, map_dialect, DialectProfile, SpeakerProfile, NUM_DIALECTS};
use super::render::{render_utterance, FrameMatrix, TokenTable, UtteranceRecord};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{sha256_hex, write_atomic};
use crate::numerics::{Domain, RngStream};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tsplit\tspeaker_id\tdialect\ttoken_ids\tdurations\tpath";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub channels: usize,
    /// Speakers `0..train_speakers` appear in train and val.
    pub train_speakers: usize,
    /// Speakers after the train range; they only appear in test.
    pub test_speakers: usize,
    pub train_per_dialect: usize,
    pub val_per_dialect: usize,
    /// Sentences in the parallel test split; each is rendered for every test
    /// speaker in every dialect.
    pub test_sentences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_base_duration: usize,
    pub max_base_duration: usize,
    /// `None` renders noise-free frames.
    pub snr_db: Option<f64>,
    pub duration_multipliers: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 1234,
            vocab_size: 216,
            channels: 80,
            train_speakers: 40,
            test_speakers: 6,
            train_per_dialect: 1000,
            val_per_dialect: 100,
            test_sentences: 8,
            min_tokens: 5,
            max_tokens: 20,
            min_base_duration: 2,
            max_base_duration: 6,
            snr_db: Some(20.0),
            duration_multipliers: [1.0, 1.35, 0.95],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.channels < 4 {
            return fail("vocab_size must be positive and channels at least 4");
        }
        if self.train_speakers == 0 || self.train_per_dialect == 0 {
            return fail("train split needs at least one speaker and one utterance per dialect");
        }
        if self.test_sentences > 0 && self.test_speakers == 0 {
            return fail("test_sentences > 0 requires test_speakers > 0");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail("token range must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_base_duration == 0 || self.min_base_duration > self.max_base_duration {
            return fail("duration range must satisfy 1 <= min_base_duration <= max_base_duration");
        }
        if self.duration_multipliers.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return fail("duration_multipliers must be positive");
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return fail("snr_db must be finite");
        }
        Ok(())
    }

    /// sha256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        sha256_hex(toml::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn dialect_profiles(&self) -> [DialectProfile; 3] {
        default_profiles(self.duration_multipliers)
    }

    pub fn speaker_profile(&self, speaker_id: usize) -> SpeakerProfile {
        SpeakerProfile::derive(self.seed, speaker_id, self.channels)
    }

    pub fn token_table(&self) -> TokenTable {
        TokenTable::derive(self.seed, self.vocab_size, self.channels, self.min_base_duration, self.max_base_duration)
    }

    pub fn test_speaker_ids(&self) -> std::ops::Range<usize> {
        self.train_speakers..self.train_speakers + self.test_speakers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// A record together with its identity in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    /// Position within its (split, dialect) group.
    pub index: usize,
    pub record: UtteranceRecord,
}

impl CorpusEntry {
    fn sort_key(&self) -> (Split, usize, usize, usize) {
        (self.split, self.record.dialect_id, self.record.speaker_id, self.index)
    }

    pub fn frame_path(&self) -> PathBuf {
        PathBuf::from("frames").join(format!("{}.frm", self.id))
    }

    fn manifest_line(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.split.as_str(),
            self.record.speaker_id,
            dialect_label(self.record.dialect_id).expect("valid dialect id"),
            join(&self.record.token_ids),
            join(&self.record.durations),
            self.frame_path().display()
        )
    }
}

/// An in-memory corpus, sorted by (split, dialect, speaker, index).
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config_hash: String,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Count per dialect within a split.
    pub fn dialect_counts(&self, split: Split) -> [usize; NUM_DIALECTS] {
        let mut c = [0; NUM_DIALECTS];
        for e in self.split(split) {
            c[e.record.dialect_id] += 1;
        }
        c
    }

    /// Hash over every manifest line followed by its frame-file bytes, in
    /// sorted record order.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.manifest_line().as_bytes());
            h.update(b"\n");
            h.update(e.record.frames.encode());
        }
        hex::encode(h.finalize())
    }

    fn sort(&mut self) {
        self.entries.sort_by_key(|e| e.sort_key());
    }
}

/// Random token sequence with length in `[min_tokens, max_tokens]`.
fn sample_sentence(config: &CorpusConfig, rng: &mut RngStream) -> Vec<usize> {
    let n = rng.between(config.min_tokens, config.max_tokens);
    (0..n).map(|_| rng.below(config.vocab_size)).collect()
}

fn stream_index(split: Split, dialect: usize, index: usize) -> u64 {
    ((split as u64) << 40) | ((dialect as u64) << 32) | index as u64
}

/// Builds the corpus in memory. A pure function of `config`.
///
/// Train and val utterances use train speakers round-robin with independent
/// sentences. The test split renders every test sentence for every test
/// speaker in every dialect.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let profiles = config.dialect_profiles();
    let table = config.token_table();
    let speakers: Vec<SpeakerProfile> =
        (0..config.train_speakers + config.test_speakers).map(|s| config.speaker_profile(s)).collect();
    let mut entries = Vec::new();
    let mut render = |split: Split, dialect: usize, index: usize, speaker: usize, tokens: &[usize]| -> Result<()> {
        let mut rng = RngStream::derive(config.seed, Domain::Render, stream_index(split, dialect, index));
        let record = render_utterance(tokens, &speakers[speaker], &profiles[dialect], &table, config.snr_db, &mut rng)?;
        let id = format!("{}-{}-s{:04}-{:05}", split.as_str(), profiles[dialect].label, speaker, index);
        entries.push(CorpusEntry { id, split, index, record });
        Ok(())
    };
    for (split, per_dialect) in [(Split::Train, config.train_per_dialect), (Split::Val, config.val_per_dialect)] {
        for dialect in 0..NUM_DIALECTS {
            for i in 0..per_dialect {
                let mut rng = RngStream::derive(config.seed, Domain::Corpus, stream_index(split, dialect, i));
                let tokens = sample_sentence(config, &mut rng);
                render(split, dialect, i, i % config.train_speakers, &tokens)?;
            }
        }
    }
    let sentences: Vec<Vec<usize>> = (0..config.test_sentences)
        .map(|j| sample_sentence(config, &mut RngStream::derive(config.seed, Domain::Corpus, stream_index(Split::Test, 0, j))))
        .collect();
    for dialect in 0..NUM_DIALECTS {
        for (j, tokens) in sentences.iter().enumerate() {
            for (k, speaker) in config.test_speaker_ids().enumerate() {
                render(Split::Test, dialect, j * config.test_speakers + k, speaker, tokens)?;
            }
        }
    }
    let mut corpus = Corpus { config_hash: config.hash(), entries };
    corpus.sort();
    Ok(corpus)
}

/// Manifest metadata plus hashes, as written next to the frame files.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub config_hash: String,
    pub manifest_hash: String,
    pub counts: BTreeMap<Split, [usize; NUM_DIALECTS]>,
    pub lines: Vec<String>,
}

impl CorpusManifest {
    pub fn of(corpus: &Corpus) -> Self {
        let counts = [Split::Train, Split::Val, Split::Test].into_iter().map(|s| (s, corpus.dialect_counts(s))).collect();
        CorpusManifest {
            config_hash: corpus.config_hash.clone(),
            manifest_hash: corpus.manifest_hash(),
            counts,
            lines: corpus.entries.iter().map(CorpusEntry::manifest_line).collect(),
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# config_hash={} manifest_hash={}", self.config_hash, self.manifest_hash).unwrap();
        for (split, c) in &self.counts {
            writeln!(s, "# counts {} wz={} ad={} kb={}", split.as_str(), c[0], c[1], c[2]).unwrap();
        }
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        for l in &self.lines {
            writeln!(s, "{l}").unwrap();
        }
        s
    }
}

/// Generates the corpus and writes `manifest.tsv` plus `frames/*.frm` under
/// `out_dir`.
pub fn gen_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<(Corpus, CorpusManifest)> {
    let corpus = build_corpus(config)?;
    for e in &corpus.entries {
        e.record.frames.write(&out_dir.join(e.frame_path()))?;
    }
    let manifest = CorpusManifest::of(&corpus);
    write_atomic(&out_dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok((corpus, manifest))
}

fn parse_list(field: &str) -> Result<Vec<usize>> {
    field
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad integer {t:?} in manifest"))))
        .collect()
}

/// Reads a corpus written by [`gen_corpus`], checking the manifest hash.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut config_hash = None;
    let mut expected_hash = None;
    let mut entries = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# config_hash=") {
            let mut parts = rest.split(" manifest_hash=");
            config_hash = parts.next().map(str::to_string);
            expected_hash = parts.next().map(str::to_string);
            continue;
        }
        if line.starts_with('#') || line == MANIFEST_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("manifest line has {} fields: {line:?}", f.len())));
        }
        let split = Split::parse(f[1])?;
        let speaker_id = f[2].parse().map_err(|_| Error::Format(format!("bad speaker id {:?}", f[2])))?;
        let dialect_id = map_dialect(f[3])?;
        let token_ids = parse_list(f[4])?;
        let durations = parse_list(f[5])?;
        let frames = FrameMatrix::read(&dir.join(f[6]))?;
        if durations.iter().sum::<usize>() != frames.frames() || token_ids.len() != durations.len() {
            return Err(Error::Format(format!("record {} is inconsistent with its frame file", f[0])));
        }
        let index = f[0]
            .rsplit('-')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("record id {:?} lacks an index suffix", f[0])))?;
        entries.push(CorpusEntry {
            id: f[0].to_string(),
            split,
            index,
            record: UtteranceRecord { token_ids, speaker_id, dialect_id, durations, frames },
        });
    }
    let config_hash = config_hash.ok_or_else(|| Error::Format("manifest lacks a config_hash header".into()))?;
    let mut corpus = Corpus { config_hash, entries };
    corpus.sort();
    if let Some(expected) = expected_hash {
        let actual = corpus.manifest_hash();
        if actual != expected {
            return Err(Error::Format(format!("manifest hash mismatch: header {expected}, content {actual}")));
        }
    }
    Ok(corpus)
}
