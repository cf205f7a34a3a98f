//! Dataset records and their line-delimited JSON persistence.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Caption variant used for pre-training; other variants are rephrasings.
pub const PRETRAIN_CAPTION_FIELD: &str = "caption_writing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipContent {
    /// Mono samples at a fixed rate.
    Waveform { sample_rate: u32, samples: Vec<f64> },
    /// Precomputed frame features, `[T][D_m]`.
    Frames(Vec<Vec<f64>>),
    /// Precomputed per-layer encoder states, `[L+1][T][D_m]`, as exported from
    /// a pretrained encoder.
    Layers(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicClip {
    pub id: String,
    #[serde(default)]
    pub source_ref: String,
    pub duration_s: f64,
    pub content: ClipContent,
}

impl MusicClip {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidRecord("clip id is empty".into()));
        }
        match &self.content {
            ClipContent::Waveform {
                sample_rate,
                samples,
            } => {
                let expected = (self.duration_s * f64::from(*sample_rate)).round();
                if expected < 1.0 || samples.len() as f64 != expected {
                    return Err(Error::InvalidRecord(format!(
                        "clip `{}`: {} samples but duration {} s at {} Hz",
                        self.id,
                        samples.len(),
                        self.duration_s,
                        sample_rate
                    )));
                }
            }
            ClipContent::Frames(frames) => {
                check_rectangular(&self.id, frames)?;
            }
            ClipContent::Layers(layers) => {
                if layers.is_empty() {
                    return Err(Error::InvalidRecord(format!("clip `{}` has no layers", self.id)));
                }
                for l in layers {
                    check_rectangular(&self.id, l)?;
                }
            }
        }
        Ok(())
    }
}

fn check_rectangular(id: &str, rows: &[Vec<f64>]) -> Result<()> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidRecord(format!(
            "clip `{id}`: features must be a non-empty rectangular matrix"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub caption: String,
    #[serde(default = "default_caption_field")]
    pub field_name: String,
    /// Evaluation-split membership of the clip, carried into derived Q&A.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

fn default_caption_field() -> String {
    PRETRAIN_CAPTION_FIELD.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Version {
    Short,
    Long,
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Version::Short => "short",
            Version::Long => "long",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_model: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub clip_id: String,
    pub question: String,
    pub answer: String,
    pub version: Version,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub filter_flags: BTreeSet<String>,
}

/// Characters accepted as the end of a properly terminated answer.
pub const TERMINAL_PUNCTUATION: [char; 7] = ['.', '!', '?', '"', '\'', ')', ']'];

pub fn ends_with_terminal_punctuation(s: &str) -> bool {
    s.trim_end()
        .chars()
        .last()
        .is_some_and(|c| TERMINAL_PUNCTUATION.contains(&c))
}

impl QAPair {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(Error::InvalidRecord("question and answer must be non-empty".into()));
        }
        if !ends_with_terminal_punctuation(&self.answer) {
            return Err(Error::InvalidRecord(
                "answer must end with terminal punctuation".into(),
            ));
        }
        Ok(())
    }
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::InvalidRecord(format!(
                "empty caption for clip `{}`",
                self.clip_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Captions,
    Qa,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Captions(Vec<CaptionRecord>),
    Qa(Vec<QAPair>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Captions(r) => r.len(),
            Dataset::Qa(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    Ok(match kind {
        DatasetKind::Captions => Dataset::Captions(load_captions(path)?),
        DatasetKind::Qa => Dataset::Qa(load_qa(path)?),
    })
}

pub fn load_qa(path: &Path) -> Result<Vec<QAPair>> {
    load_records(path, |r: &QAPair| r.validate(), |_| None)
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    load_records(
        path,
        CaptionRecord::validate,
        |r| Some(format!("{}/{}", r.clip_id, r.field_name)),
    )
}

pub fn load_clips(path: &Path) -> Result<Vec<MusicClip>> {
    load_records(path, MusicClip::validate, |r| Some(r.id.clone()))
}

/// Parses one JSON object per non-blank line. Every failure is reported with
/// its 1-based line number.
fn load_records<T, V, K>(path: &Path, validate: V, key: K) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    V: Fn(&T) -> Result<()>,
    K: Fn(&T) -> Option<String>,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let located = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: T = serde_json::from_str(line).map_err(|e| located(e.to_string()))?;
        validate(&record).map_err(|e| located(e.to_string()))?;
        if let Some(k) = key(&record) {
            if !seen.insert(k.clone()) {
                return Err(located(Error::DuplicateId(k).to_string()));
            }
        }
        out.push(record);
    }
    Ok(out)
}

/// Writes records one per line, preserving input order.
pub fn save_dataset<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Short,
    Long,
    Mixed,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Partition::Short),
            "long" => Ok(Partition::Long),
            "mixed" => Ok(Partition::Mixed),
            other => Err(Error::InvalidArgument(format!("unknown partition `{other}`"))),
        }
    }
}

pub fn partition(records: &[QAPair], selector: Partition) -> Vec<QAPair> {
    records
        .iter()
        .filter(|r| match selector {
            Partition::Short => r.version == Version::Short,
            Partition::Long => r.version == Version::Long,
            Partition::Mixed => true,
        })
        .cloned()
        .collect()
}

pub fn select_split(records: &[QAPair], split: Split) -> Vec<QAPair> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Caption records used for pre-training: only the `caption_writing` variant.
pub fn pretrain_captions(records: &[CaptionRecord]) -> Vec<CaptionRecord> {
    records
        .iter()
        .filter(|r| r.field_name == PRETRAIN_CAPTION_FIELD)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa(version: Version) -> QAPair {
        QAPair {
            clip_id: "c1".into(),
            question: "What is the tempo?".into(),
            answer: "It is slow.".into(),
            version,
            split: Split::Train,
            provenance: None,
            filter_flags: BTreeSet::new(),
        }
    }

    #[test]
    fn loads_two_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        save_dataset(&[qa(Version::Short), qa(Version::Long)], &p).unwrap();
        let loaded = load_dataset(&p, DatasetKind::Qa).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn missing_answer_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        fs::write(
            &p,
            r#"{"clip_id":"a","question":"q?","version":"short","split":"train"}"#,
        )
        .unwrap();
        let err = load_qa(&p).unwrap_err();
        match &err {
            Error::Record { line, message, .. } => {
                assert_eq!(*line, 1);
                assert!(message.contains("answer"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        let good = serde_json::to_string(&qa(Version::Short)).unwrap();
        let bad = good.replace("\"short\"", "\"medium\"");
        fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match load_qa(&p).unwrap_err() {
            Error::Record { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_clip_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clips.jsonl");
        let clip = MusicClip {
            id: "x".into(),
            source_ref: String::new(),
            duration_s: 1.0,
            content: ClipContent::Frames(vec![vec![0.0; 4]; 2]),
        };
        save_dataset(&[clip.clone(), clip], &p).unwrap();
        assert!(matches!(load_clips(&p).unwrap_err(), Error::Record { line: 2, .. }));
    }

    #[test]
    fn waveform_length_must_match_duration() {
        let clip = MusicClip {
            id: "w".into(),
            source_ref: String::new(),
            duration_s: 0.5,
            content: ClipContent::Waveform {
                sample_rate: 8,
                samples: vec![0.0; 4],
            },
        };
        clip.validate().unwrap();
        let mut bad = clip.clone();
        bad.duration_s = 0.0;
        bad.content = ClipContent::Waveform {
            sample_rate: 8,
            samples: vec![],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_list_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        save_dataset::<QAPair>(&[], &p).unwrap();
        assert!(load_qa(&p).unwrap().is_empty());
    }

    #[test]
    fn single_pair_is_one_line_with_all_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        let mut r = qa(Version::Long);
        r.provenance = Some(Provenance {
            generator_model: "gpt".into(),
            prompt_hash: "abc".into(),
        });
        r.filter_flags.insert("word_count:120".into());
        save_dataset(&[r], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        for key in ["clip_id", "question", "answer", "version", "split", "provenance", "filter_flags"] {
            assert!(text.contains(key), "{key}");
        }
    }

    #[test]
    fn partition_selectors() {
        let records: Vec<_> = [Version::Short, Version::Short, Version::Long, Version::Short, Version::Long]
            .into_iter()
            .map(qa)
            .collect();
        assert_eq!(partition(&records, Partition::Short).len(), 3);
        assert_eq!(partition(&records, Partition::Mixed), records);
        let shorts = partition(&records, Partition::Short);
        assert!(partition(&shorts, Partition::Long).is_empty());
    }

    #[test]
    fn terminal_punctuation_rule() {
        assert!(ends_with_terminal_punctuation("It is a rock song.  "));
        assert!(ends_with_terminal_punctuation("(yes)"));
        assert!(!ends_with_terminal_punctuation("It is a rock song"));
        assert!(!ends_with_terminal_punctuation("   "));
    }
}
