use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::prompts::PromptVersion;
use crate::data::ends_with_terminal_punctuation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ParseError,
    BadKeys,
    EmptyField,
    NoTerminalPunct,
    FailedVerification,
    RuntimeError,
}

/// A question/answer pair as returned by the generator, before metadata is
/// attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationOutcome {
    pub raw: String,
    pub pairs: Vec<RawPair>,
    pub drop_reasons: BTreeSet<DropReason>,
}

/// Locates the outermost `{ … }` span, so surrounding prose or code fences
/// are ignored.
fn object_span(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn expected_keys(version: PromptVersion) -> Vec<(String, String)> {
    match version {
        PromptVersion::V1 => (1..=5)
            .map(|i| (format!("Question {i}"), format!("Answer {i}")))
            .collect(),
        PromptVersion::V2 => vec![("Q".into(), "A".into())],
    }
}

pub fn parse_response(raw: &str, version: PromptVersion) -> GenerationOutcome {
    let fail = |reason| GenerationOutcome {
        raw: raw.to_string(),
        pairs: Vec::new(),
        drop_reasons: BTreeSet::from([reason]),
    };
    let Some(span) = object_span(raw) else {
        return fail(DropReason::ParseError);
    };
    let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(span) else {
        return fail(DropReason::ParseError);
    };
    let keys = expected_keys(version);
    if map.len() != keys.len() * 2 {
        return fail(DropReason::BadKeys);
    }
    let mut pairs = Vec::with_capacity(keys.len());
    for (qk, ak) in keys {
        match (map.get(&qk), map.get(&ak)) {
            (Some(serde_json::Value::String(q)), Some(serde_json::Value::String(a))) => pairs.push(RawPair {
                question: q.trim().to_string(),
                answer: a.trim().to_string(),
            }),
            _ => return fail(DropReason::BadKeys),
        }
    }
    GenerationOutcome {
        raw: raw.to_string(),
        pairs,
        drop_reasons: BTreeSet::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hygiene {
    Keep,
    Drop(BTreeSet<DropReason>),
}

pub fn hygiene_filter(pair: &RawPair) -> Hygiene {
    let mut reasons = BTreeSet::new();
    if pair.question.trim().is_empty() || pair.answer.trim().is_empty() {
        reasons.insert(DropReason::EmptyField);
    }
    if !ends_with_terminal_punctuation(&pair.answer) {
        reasons.insert(DropReason::NoTerminalPunct);
    }
    if reasons.is_empty() {
        Hygiene::Keep
    } else {
        Hygiene::Drop(reasons)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v1_object(skip: Option<&str>) -> String {
        let mut m = serde_json::Map::new();
        for i in 1..=5 {
            m.insert(format!("Question {i}"), format!("Question number {i}?").into());
            m.insert(format!("Answer {i}"), format!("Answer number {i}.").into());
        }
        if let Some(k) = skip {
            m.remove(k);
        }
        serde_json::Value::Object(m).to_string()
    }

    #[test]
    fn well_formed_v2() {
        let o = parse_response(r#"{"Q": "Can you describe it?", "A": "It is calm."}"#, PromptVersion::V2);
        assert_eq!(o.pairs.len(), 1);
        assert!(o.drop_reasons.is_empty());
    }

    #[test]
    fn well_formed_v1_in_code_fence() {
        let raw = format!("Sure! Here you go:\n```json\n{}\n```\nEnjoy.", v1_object(None));
        let o = parse_response(&raw, PromptVersion::V1);
        assert_eq!(o.pairs.len(), 5);
        assert_eq!(o.pairs[2].question, "Question number 3?");
    }

    #[test]
    fn missing_answer_is_bad_keys() {
        let o = parse_response(&v1_object(Some("Answer 3")), PromptVersion::V1);
        assert!(o.pairs.is_empty());
        assert_eq!(o.drop_reasons, BTreeSet::from([DropReason::BadKeys]));
    }

    #[test]
    fn extra_key_is_bad_keys() {
        let o = parse_response(r#"{"Q": "q?", "A": "a.", "note": "x"}"#, PromptVersion::V2);
        assert_eq!(o.drop_reasons, BTreeSet::from([DropReason::BadKeys]));
    }

    #[test]
    fn prose_is_parse_error() {
        let o = parse_response("I cannot help with that.", PromptVersion::V1);
        assert_eq!(o.drop_reasons, BTreeSet::from([DropReason::ParseError]));
        let o = parse_response("{not json}", PromptVersion::V2);
        assert_eq!(o.drop_reasons, BTreeSet::from([DropReason::ParseError]));
    }

    #[test]
    fn hygiene_rules() {
        let pair = |a: &str| RawPair {
            question: "What genre?".into(),
            answer: a.into(),
        };
        assert_eq!(
            hygiene_filter(&pair("It is a rock song")),
            Hygiene::Drop(BTreeSet::from([DropReason::NoTerminalPunct]))
        );
        assert_eq!(hygiene_filter(&pair("It is a rock song.")), Hygiene::Keep);
        assert_eq!(
            hygiene_filter(&pair("The song could serve as the soundtrack of an anime.")),
            Hygiene::Keep
        );
        let empty_q = RawPair {
            question: " ".into(),
            answer: "Fine.".into(),
        };
        assert_eq!(hygiene_filter(&empty_q), Hygiene::Drop(BTreeSet::from([DropReason::EmptyField])));
    }
}
