use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::client::{complete_with_retries, ChatClient, ClientError, RetryPolicy};
use super::parse::{hygiene_filter, parse_response, DropReason, Hygiene, RawPair};
use super::prompts::{render_prompt, render_verification, PromptVersion};
use crate::data::{CaptionRecord, Provenance, QAPair, Split};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Positive,
    Negative,
}

/// Leading "yes"/"no", case-insensitive, after stripping quotes and
/// markdown emphasis. Anything else is negative.
pub fn parse_verdict(reply: &str) -> Verdict {
    let t = reply
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '`'))
        .to_ascii_lowercase();
    let first: String = t.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    if first == "yes" {
        Verdict::Positive
    } else {
        Verdict::Negative
    }
}

/// Asks the client whether the pair is grounded in the caption.
pub fn verify_pair(
    caption: &str,
    pair: &RawPair,
    client: &dyn ChatClient,
    seed: u64,
    policy: RetryPolicy,
) -> Result<Verdict, ClientError> {
    let prompt = render_verification(caption, &pair.question, &pair.answer);
    complete_with_retries(client, &prompt, seed, policy).map(|r| parse_verdict(&r))
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub seed: u64,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            retry: RetryPolicy::default(),
            concurrency: 1,
        }
    }
}

/// Pair-level accounting: `kept + Σ dropped = generated`, where a response
/// counts as the number of pairs its prompt asks for.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub captions: usize,
    pub generated: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

impl RunReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped.values().sum()
    }

    pub fn is_balanced(&self) -> bool {
        self.kept + self.dropped_total() == self.generated
    }

    fn absorb(&mut self, other: &CaptionResult) {
        self.generated += other.generated;
        self.kept += other.kept.len();
        for (r, n) in &other.dropped {
            *self.dropped.entry(*r).or_insert(0) += n;
        }
    }
}

#[derive(Debug, Default)]
struct CaptionResult {
    generated: usize,
    kept: Vec<QAPair>,
    dropped: BTreeMap<DropReason, usize>,
}

impl CaptionResult {
    fn drop(&mut self, reason: DropReason, n: usize) {
        *self.dropped.entry(reason).or_insert(0) += n;
    }
}

/// Per-call seed derived from the run seed, caption index and call slot.
fn call_seed(seed: u64, caption: usize, slot: usize) -> u64 {
    let mut x = seed ^ (caption as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (slot as u64) << 48;
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^ (x >> 33)
}

fn process_caption(
    idx: usize,
    rec: &CaptionRecord,
    version: PromptVersion,
    client: &dyn ChatClient,
    opts: &PipelineOptions,
) -> CaptionResult {
    let expected = version.pairs_per_response();
    let mut out = CaptionResult {
        generated: expected,
        ..Default::default()
    };
    let prompt = match render_prompt(version, &rec.caption) {
        Ok(p) => p,
        Err(_) => {
            out.drop(DropReason::ParseError, expected);
            return out;
        }
    };
    let raw = match complete_with_retries(client, &prompt, call_seed(opts.seed, idx, 0), opts.retry) {
        Ok(r) => r,
        Err(_) => {
            out.drop(DropReason::RuntimeError, expected);
            return out;
        }
    };
    let outcome = parse_response(&raw, version);
    if let Some(reason) = outcome.drop_reasons.iter().next() {
        out.drop(*reason, expected);
        return out;
    }
    let provenance = Provenance {
        generator_model: client.model_name(),
        prompt_hash: prompt.hash(),
    };
    for (slot, pair) in outcome.pairs.iter().enumerate() {
        if let Hygiene::Drop(reasons) = hygiene_filter(pair) {
            let first = reasons.into_iter().next().unwrap_or(DropReason::NoTerminalPunct);
            out.drop(first, 1);
            continue;
        }
        match verify_pair(&rec.caption, pair, client, call_seed(opts.seed, idx, slot + 1), opts.retry) {
            Err(_) => out.drop(DropReason::RuntimeError, 1),
            Ok(Verdict::Negative) => out.drop(DropReason::FailedVerification, 1),
            Ok(Verdict::Positive) => {
                let mut flags = BTreeSet::new();
                if version == PromptVersion::V2 {
                    flags.insert(format!("word_count:{}", pair.answer.split_whitespace().count()));
                }
                out.kept.push(QAPair {
                    clip_id: rec.clip_id.clone(),
                    question: pair.question.clone(),
                    answer: pair.answer.clone(),
                    version: version.dataset_version(),
                    split: rec.split.unwrap_or(Split::Train),
                    provenance: Some(provenance.clone()),
                    filter_flags: flags,
                });
            }
        }
    }
    out
}

/// Generates, filters and verifies Q&A pairs for every caption. Failures
/// become drop reasons; the run never aborts. Output order follows caption
/// order regardless of `concurrency`.
pub fn run_pipeline(
    captions: &[CaptionRecord],
    version: PromptVersion,
    client: &dyn ChatClient,
    opts: &PipelineOptions,
) -> (Vec<QAPair>, RunReport) {
    let workers = opts.concurrency.max(1).min(captions.len().max(1));
    let results: Vec<CaptionResult> = if workers == 1 {
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| process_caption(i, c, version, client, opts))
            .collect()
    } else {
        let slots: Mutex<Vec<Option<CaptionResult>>> = Mutex::new((0..captions.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= captions.len() {
                        break;
                    }
                    let r = process_caption(i, &captions[i], version, client, opts);
                    slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|p| p.into_inner())
            .into_iter()
            .map(Option::unwrap_or_default)
            .collect()
    };

    let mut report = RunReport {
        captions: captions.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for r in results {
        report.absorb(&r);
        kept.extend(r.kept);
    }
    (kept, report)
}
