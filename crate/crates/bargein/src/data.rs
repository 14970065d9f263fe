//! Domain types and the on-disk corpus format.
//!
//! A corpus is a line-delimited manifest (one JSON record per turn) plus one
//! 16-bit PCM mono WAV file per turn. Audio paths in the manifest are
//! relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub alignment: Option<Vec<WordAlignment>>,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Validation("sample_rate must be > 0".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::Validation("utterance has no samples".into()));
        }
        if let Some(words) = &self.alignment {
            let dur = self.duration_s();
            let mut prev_end = 0.0f64;
            for w in words {
                w.validate()?;
                if w.end_time < prev_end {
                    return Err(Error::Validation(format!(
                        "alignment not sorted by end_time at word '{}'",
                        w.word
                    )));
                }
                if w.start_time < 0.0 || w.end_time > dur + 1e-9 {
                    return Err(Error::Validation(format!(
                        "word '{}' [{:.6}, {:.6}] outside utterance duration {:.6}",
                        w.word, w.start_time, w.end_time, dur
                    )));
                }
                prev_end = w.end_time;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub word: String,
    pub start_time: f64,
    pub end_time: f64,
}

impl WordAlignment {
    pub fn validate(&self) -> Result<()> {
        if self.word.is_empty() {
            return Err(Error::Validation("alignment word is empty".into()));
        }
        if self.start_time >= self.end_time {
            return Err(Error::Validation(format!(
                "word '{}': start_time {:.6} >= end_time {:.6}",
                self.word, self.start_time, self.end_time
            )));
        }
        Ok(())
    }
}

/// Number of dialogue context labels in the default registry.
pub const NUM_CONTEXT_LABELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DialogueContextLabel {
    pub id: usize,
}

impl DialogueContextLabel {
    pub fn new(id: usize) -> Result<Self> {
        if id >= NUM_CONTEXT_LABELS {
            return Err(Error::Validation(format!(
                "context label id {id} out of range [0, {NUM_CONTEXT_LABELS})"
            )));
        }
        Ok(DialogueContextLabel { id })
    }

    /// 3 intent labels followed by 7 slot labels.
    pub fn name(&self) -> String {
        if self.id < 3 {
            format!("intent_{}", self.id)
        } else {
            format!("slot_{}", self.id - 3)
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        for id in 0..NUM_CONTEXT_LABELS {
            let label = DialogueContextLabel { id };
            if label.name() == name {
                return Ok(label);
            }
        }
        Err(Error::Validation(format!("unknown context label '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BargeInLabel {
    #[serde(rename = "TRUE_BARGE_IN")]
    TrueBargeIn,
    #[serde(rename = "FALSE_BARGE_IN")]
    FalseBargeIn,
}

impl BargeInLabel {
    /// Fixed project-wide index convention: 0 = true barge-in, 1 = false.
    pub fn index(&self) -> usize {
        match self {
            BargeInLabel::TrueBargeIn => 0,
            BargeInLabel::FalseBargeIn => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            BargeInLabel::TrueBargeIn
        } else {
            BargeInLabel::FalseBargeIn
        }
    }
}

impl fmt::Display for BargeInLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BargeInLabel::TrueBargeIn => write!(f, "TRUE_BARGE_IN"),
            BargeInLabel::FalseBargeIn => write!(f, "FALSE_BARGE_IN"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueTurn {
    pub id: String,
    pub split: Split,
    pub prompt_text: String,
    pub context: DialogueContextLabel,
    pub user: Utterance,
    pub label: BargeInLabel,
}

impl DialogueTurn {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_text.is_empty() {
            return Err(Error::Validation(format!(
                "turn {}: prompt_text is empty",
                self.id
            )));
        }
        self.user
            .validate()
            .map_err(|e| Error::Validation(format!("turn {}: {e}", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub turns: Vec<DialogueTurn>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DialogueTurn> {
        self.turns.iter().filter(move |t| t.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for turn in &self.turns {
            turn.validate()?;
            if let Some(other) = seen.insert(turn.id.clone(), turn.split) {
                return Err(Error::Validation(format!(
                    "turn id {} appears in both {} and {}",
                    turn.id, other, turn.split
                )));
            }
        }
        for split in Split::ALL {
            let mut true_n = 0i64;
            let mut false_n = 0i64;
            for t in self.split(split) {
                match t.label {
                    BargeInLabel::TrueBargeIn => true_n += 1,
                    BargeInLabel::FalseBargeIn => false_n += 1,
                }
            }
            if (true_n - false_n).abs() > 1 {
                return Err(Error::Validation(format!(
                    "split {split} unbalanced: {true_n} true vs {false_n} false barge-ins"
                )));
            }
        }
        Ok(())
    }
}

/// One manifest line. Alignment entries are [word, start_s, end_s] triples.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    split: Split,
    prompt_text: String,
    context_name: String,
    label: BargeInLabel,
    audio_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alignment: Option<Vec<(String, f64, f64)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    seed: u64,
}

const MANIFEST_FORMAT: &str = "bargein-manifest-v1";

pub fn read_wav(path: &Path) -> Result<Utterance> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Io(format!("open wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Validation(format!(
            "{}: expected 16-bit mono PCM, got {} ch {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Io(format!("read wav {}: {e}", path.display())))?;
    Ok(Utterance {
        samples,
        sample_rate: spec.sample_rate,
        alignment: None,
    })
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Io(format!("create wav {}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Io(format!("write wav {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Io(format!("finalize wav {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_corpus(manifest_path: &Path) -> Result<CorpusManifest> {
    let file = fs::File::open(manifest_path)
        .map_err(|e| Error::Io(format!("open manifest {}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = BufReader::new(file).lines();

    let mut seed = 0u64;
    let mut turns = Vec::new();
    let mut first = true;
    for line in &mut lines {
        let line = line.map_err(|e| Error::Io(format!("read manifest: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        if first {
            first = false;
            if let Ok(header) = serde_json::from_str::<ManifestHeader>(&line) {
                if header.format == MANIFEST_FORMAT {
                    seed = header.seed;
                    continue;
                }
            }
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("malformed manifest line: {e}")))?;
        let audio_path = base.join(&rec.audio_path);
        let mut user = read_wav(&audio_path)
            .map_err(|e| Error::Io(format!("turn {}: {e}", rec.id)))?;
        user.alignment = rec.alignment.map(|ws| {
            ws.into_iter()
                .map(|(word, start_time, end_time)| WordAlignment {
                    word,
                    start_time,
                    end_time,
                })
                .collect()
        });
        turns.push(DialogueTurn {
            id: rec.id,
            split: rec.split,
            prompt_text: rec.prompt_text,
            context: DialogueContextLabel::from_name(&rec.context_name)?,
            user,
            label: rec.label,
        });
    }
    let corpus = CorpusManifest { seed, turns };
    corpus.validate()?;
    Ok(corpus)
}

/// Writes `manifest.jsonl` plus an `audio/` directory under `dir`.
/// Returns the manifest path. `load_corpus(save_corpus(c))` round-trips
/// every field; audio samples are quantized to i16 on write, so callers
/// that need bit-exact round trips must hold i16-quantized samples
/// (everything the generator emits already is).
pub fn save_corpus(corpus: &CorpusManifest, dir: &Path) -> Result<PathBuf> {
    corpus.validate()?;
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir)
        .map_err(|e| Error::Io(format!("create {}: {e}", audio_dir.display())))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)
        .map_err(|e| Error::Io(format!("create {}: {e}", manifest_path.display())))?;
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        seed: corpus.seed,
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| Error::Io(format!("write manifest: {e}")))?;
    for turn in &corpus.turns {
        let rel = format!("audio/{}.wav", turn.id);
        write_wav(&dir.join(&rel), &turn.user.samples, turn.user.sample_rate)?;
        let rec = ManifestRecord {
            id: turn.id.clone(),
            split: turn.split,
            prompt_text: turn.prompt_text.clone(),
            context_name: turn.context.name(),
            label: turn.label,
            audio_path: rel,
            alignment: turn.user.alignment.as_ref().map(|ws| {
                ws.iter()
                    .map(|w| (w.word.clone(), w.start_time, w.end_time))
                    .collect()
            }),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap())
            .map_err(|e| Error::Io(format!("write manifest: {e}")))?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantize(samples: &[f64]) -> Vec<f64> {
        samples
            .iter()
            .map(|&s| (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as f64 / 32768.0)
            .collect()
    }

    fn one_turn(id: &str, split: Split, label: BargeInLabel) -> DialogueTurn {
        DialogueTurn {
            id: id.into(),
            split,
            prompt_text: "Would you like a Sedan, SUV, Hatchback?".into(),
            context: DialogueContextLabel::new(4).unwrap(),
            user: Utterance {
                samples: quantize(&(0..1600).map(|i| (i as f64 * 0.01).sin() * 0.5).collect::<Vec<_>>()),
                sample_rate: 16000,
                alignment: Some(vec![WordAlignment {
                    word: "sedan".into(),
                    start_time: 0.01,
                    end_time: 0.09,
                }]),
            },
            label,
        }
    }

    #[test]
    fn empty_manifest_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, "").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert!(corpus.turns.is_empty());
    }

    #[test]
    fn degenerate_alignment_rejected() {
        let mut turn = one_turn("t0", Split::Train, BargeInLabel::TrueBargeIn);
        turn.user.alignment = Some(vec![WordAlignment {
            word: "sedan".into(),
            start_time: 0.05,
            end_time: 0.05,
        }]);
        assert!(matches!(turn.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn roundtrip_one_turn() {
        let corpus = CorpusManifest {
            seed: 7,
            turns: vec![one_turn("t0", Split::Train, BargeInLabel::TrueBargeIn)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn roundtrip_non_ascii_prompt() {
        let mut turn = one_turn("t0", Split::Test, BargeInLabel::FalseBargeIn);
        turn.prompt_text = "Möchten Sie ein Auto buchen — да или нет?".into();
        let corpus = CorpusManifest {
            seed: 1,
            turns: vec![turn],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = save_corpus(&corpus, dir.path()).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
    }

    #[test]
    fn unbalanced_split_rejected() {
        let corpus = CorpusManifest {
            seed: 0,
            turns: vec![
                one_turn("a", Split::Train, BargeInLabel::TrueBargeIn),
                one_turn("b", Split::Train, BargeInLabel::TrueBargeIn),
            ],
        };
        assert!(corpus.validate().is_err());
    }

    #[test]
    fn duplicate_id_across_splits_rejected() {
        let corpus = CorpusManifest {
            seed: 0,
            turns: vec![
                one_turn("a", Split::Train, BargeInLabel::TrueBargeIn),
                one_turn("a", Split::Test, BargeInLabel::FalseBargeIn),
            ],
        };
        assert!(corpus.validate().is_err());
    }

    #[test]
    fn missing_audio_names_turn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let rec = r#"{"id":"t42","split":"train","prompt_text":"hi","context_name":"intent_0","label":"TRUE_BARGE_IN","audio_path":"audio/none.wav"}"#;
        fs::write(&path, format!("{rec}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("t42"), "error was: {err}");
    }

    #[test]
    fn context_label_names() {
        assert_eq!(DialogueContextLabel::new(0).unwrap().name(), "intent_0");
        assert_eq!(DialogueContextLabel::new(3).unwrap().name(), "slot_0");
        assert_eq!(DialogueContextLabel::new(9).unwrap().name(), "slot_6");
        assert!(DialogueContextLabel::new(10).is_err());
        assert_eq!(
            DialogueContextLabel::from_name("slot_4").unwrap().id,
            7
        );
    }
}
