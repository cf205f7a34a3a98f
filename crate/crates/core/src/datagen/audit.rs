//! Audit sheets for manual quality review of generated pairs, and the
//! percentage summary computed once annotators have filled them in.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{QAPair, Version};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rating {
    Yes,
    Unsure,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputQuality {
    Excellent,
    Pass,
    Fail,
}

fn parse_rating(s: &str) -> Option<std::result::Result<Rating, String>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => None,
        "y" | "yes" => Some(Ok(Rating::Yes)),
        "u" | "unsure" => Some(Ok(Rating::Unsure)),
        "n" | "no" => Some(Ok(Rating::No)),
        other => Some(Err(format!("invalid rating `{other}`"))),
    }
}

fn parse_quality(s: &str) -> Option<std::result::Result<OutputQuality, String>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => None,
        "excellent" | "excellence" => Some(Ok(OutputQuality::Excellent)),
        "pass" | "passed" | "fair" => Some(Ok(OutputQuality::Pass)),
        "fail" | "failed" => Some(Ok(OutputQuality::Fail)),
        other => Some(Err(format!("invalid output quality `{other}`"))),
    }
}

// Blank annotation cells are empty strings on disk.
mod blank {
    use super::*;

    pub fn ser_rating<S: Serializer>(v: &Option<Rating>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(match v {
            None => "",
            Some(Rating::Yes) => "yes",
            Some(Rating::Unsure) => "unsure",
            Some(Rating::No) => "no",
        })
    }

    pub fn de_rating<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Rating>, D::Error> {
        let s = String::deserialize(d)?;
        parse_rating(&s).transpose().map_err(serde::de::Error::custom)
    }

    pub fn ser_quality<S: Serializer>(v: &Option<OutputQuality>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(match v {
            None => "",
            Some(OutputQuality::Excellent) => "excellent",
            Some(OutputQuality::Pass) => "pass",
            Some(OutputQuality::Fail) => "fail",
        })
    }

    pub fn de_quality<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<OutputQuality>, D::Error> {
        let s = String::deserialize(d)?;
        parse_quality(&s).transpose().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub index: usize,
    pub clip_id: String,
    pub version: Version,
    pub question: String,
    pub answer: String,
    #[serde(serialize_with = "blank::ser_rating", deserialize_with = "blank::de_rating", default)]
    pub clarity: Option<Rating>,
    #[serde(serialize_with = "blank::ser_rating", deserialize_with = "blank::de_rating", default)]
    pub feasibility: Option<Rating>,
    #[serde(serialize_with = "blank::ser_rating", deserialize_with = "blank::de_rating", default)]
    pub practicality: Option<Rating>,
    #[serde(serialize_with = "blank::ser_quality", deserialize_with = "blank::de_quality", default)]
    pub output_quality: Option<OutputQuality>,
}

impl AuditRow {
    pub fn is_complete(&self) -> bool {
        self.clarity.is_some()
            && self.feasibility.is_some()
            && self.practicality.is_some()
            && self.output_quality.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditSheet {
    pub rows: Vec<AuditRow>,
}

/// Number of rows drawn for `fraction` of `n` items: `⌊fraction · n⌋`,
/// guarded against representation error just below an integer.
pub fn audit_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Seed-deterministic sample of `⌊fraction · N⌋` pairs with blank
/// annotation fields, in dataset order.
pub fn sample_audit(dataset: &[QAPair], fraction: f64, seed: u64) -> Result<AuditSheet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("audit fraction {fraction} not in (0, 1]")));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset to audit"));
    }
    let k = audit_size(dataset.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, dataset.len(), k).into_vec();
    picked.sort_unstable();
    let rows = picked
        .into_iter()
        .map(|i| {
            let p = &dataset[i];
            AuditRow {
                index: i,
                clip_id: p.clip_id.clone(),
                version: p.version,
                question: p.question.clone(),
                answer: p.answer.clone(),
                clarity: None,
                feasibility: None,
                practicality: None,
                output_quality: None,
            }
        })
        .collect();
    Ok(AuditSheet { rows })
}

/// Percentages over completed rows of one dataset version.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub rows: usize,
    pub clarity: f64,
    pub feasibility: f64,
    pub practicality: f64,
    pub excellent: f64,
    pub not_failed: f64,
}

/// Per-version summary over rows whose four annotation fields are filled.
pub fn summarize(rows: &[AuditRow]) -> BTreeMap<Version, AuditSummary> {
    let mut groups: BTreeMap<Version, Vec<&AuditRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_complete()) {
        groups.entry(r.version).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(v, rs)| {
            let n = rs.len() as f64;
            let pct = |f: &dyn Fn(&AuditRow) -> bool| 100.0 * rs.iter().filter(|r| f(r)).count() as f64 / n;
            let summary = AuditSummary {
                rows: rs.len(),
                clarity: pct(&|r| r.clarity == Some(Rating::Yes)),
                feasibility: pct(&|r| r.feasibility == Some(Rating::Yes)),
                practicality: pct(&|r| r.practicality == Some(Rating::Yes)),
                excellent: pct(&|r| r.output_quality == Some(OutputQuality::Excellent)),
                not_failed: pct(&|r| r.output_quality != Some(OutputQuality::Fail)),
            };
            (v, summary)
        })
        .collect()
}

/// Text table with one column per dataset version.
pub fn render_summary(summary: &BTreeMap<Version, AuditSummary>) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<32}", "");
    for v in summary.keys() {
        let _ = write!(out, "{:>10}", format!("MI {v}"));
    }
    out.push('\n');
    type Line = (&'static str, fn(&AuditSummary) -> f64);
    let lines: [Line; 5] = [
        ("Instruction has Clarity", |s| s.clarity),
        ("Instruction has Feasibility", |s| s.feasibility),
        ("Instruction has Practicality", |s| s.practicality),
        ("Output Quality excellent", |s| s.excellent),
        ("Output Quality not failed", |s| s.not_failed),
    ];
    for (label, get) in lines {
        let _ = write!(out, "{label:<32}");
        for s in summary.values() {
            let _ = write!(out, "{:>9.1}%", get(s));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<32}", "Annotated rows");
    for s in summary.values() {
        let _ = write!(out, "{:>10}", s.rows);
    }
    out.push('\n');
    out
}
