//! Independent reference implementations and fixtures shared by the
//! integration tests. The oracles deliberately avoid the library's code
//! paths: plain loops, full tables and direct formulas.

#![allow(dead_code)]

use std::collections::BTreeSet;

use musilingo::data::{CaptionRecord, ClipContent, MusicClip, QAPair, Split, Version};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_stemmers::{Algorithm, Stemmer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Character-scan tokenizer: lowercase runs of alphanumeric characters.
pub fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// All n-grams by explicit slicing; counts by pairwise comparison.
fn count_in(gram: &[String], tokens: &[String]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&s| tokens[s..s + gram.len()] == *gram)
        .count()
}

/// Sentence BLEU-n by n-gram enumeration; product form of the geometric mean.
pub fn oracle_bleu(cand: &str, refr: &str, n: usize) -> f64 {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for k in 1..=n {
        let total = if c.len() >= k { c.len() - k + 1 } else { 0 };
        // distinct candidate n-grams, each clipped by its reference count
        let mut seen: Vec<&[String]> = Vec::new();
        let mut matched = 0;
        for s in 0..total {
            let g = &c[s..s + k];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            matched += count_in(g, &c).min(count_in(g, &r));
        }
        let p = if k == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        prod *= p;
    }
    if prod == 0.0 {
        return 0.0;
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * prod.powf(1.0 / n as f64)
}

/// LCS via the full `(m+1) × (n+1)` table.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn oracle_rouge_l(cand: &str, refr: &str) -> f64 {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = oracle_lcs(&c, &r) as f64;
    let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
    if p + rc == 0.0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    }
}

/// METEOR straight from the formula. Alignment: for each candidate token in
/// order, scan the reference left to right for the first free equal token;
/// exact stage first, then the same scan on stems.
pub fn oracle_meteor(cand: &str, refr: &str) -> f64 {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let cs: Vec<String> = c.iter().map(|t| stemmer.stem(t).to_string()).collect();
    let rs: Vec<String> = r.iter().map(|t| stemmer.stem(t).to_string()).collect();
    let mut align: Vec<Option<usize>> = vec![None; c.len()];
    let mut ref_taken = vec![false; r.len()];
    for (ck, rk) in [(&c, &r), (&cs, &rs)] {
        for i in 0..c.len() {
            if align[i].is_some() {
                continue;
            }
            for j in 0..r.len() {
                if !ref_taken[j] && ck[i] == rk[j] {
                    align[i] = Some(j);
                    ref_taken[j] = true;
                    break;
                }
            }
        }
    }
    let m = align.iter().filter(|a| a.is_some()).count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let alpha = 0.9;
    let f = p * rc / (alpha * p + (1.0 - alpha) * rc);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

const WORDS: [&str; 14] = [
    "the", "a", "soft", "piano", "drums", "drum", "playing", "play", "Guitar", "guitars", "slow", "jazz", "song",
    "songs",
];
const SEPS: [&str; 5] = [" ", " ", ", ", ". ", "! "];

/// Short random sentence over a small vocabulary with inflections, mixed
/// case and punctuation; may be empty.
pub fn random_sentence(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(SEPS[rng.gen_range(0..SEPS.len())]);
        }
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    s
}

/// Clip with a seeded random waveform.
pub fn waveform_clip(id: &str, seed: u64, samples: usize, sample_rate: u32) -> MusicClip {
    let mut r = rng(seed);
    MusicClip {
        id: id.to_string(),
        source_ref: String::new(),
        duration_s: samples as f64 / f64::from(sample_rate),
        content: ClipContent::Waveform {
            sample_rate,
            samples: (0..samples).map(|_| r.gen_range(-1.0..1.0)).collect(),
        },
    }
}

pub fn caption(clip_id: &str, text: &str) -> CaptionRecord {
    CaptionRecord {
        clip_id: clip_id.to_string(),
        caption: text.to_string(),
        field_name: "caption_writing".into(),
        split: None,
    }
}

pub fn qa(clip_id: &str, q: &str, a: &str, version: Version, split: Split) -> QAPair {
    QAPair {
        clip_id: clip_id.to_string(),
        question: q.to_string(),
        answer: a.to_string(),
        version,
        split,
        provenance: None,
        filter_flags: BTreeSet::new(),
    }
}

/// The eight short captions used by the overfit reproduction.
pub const OVERFIT_CAPTIONS: [&str; 8] = [
    "calm piano.",
    "loud drums.",
    "sad violin.",
    "happy flute.",
    "slow jazz.",
    "fast rock.",
    "soft harp.",
    "dark synth.",
];

/// Settings under which the adapter alone can memorize eight captions
/// through the frozen toy backends.
pub const OVERFIT_OVERRIDES: [&str; 8] = [
    "encoder.dim=64",
    "encoder.frames=64",
    "lm.dim=64",
    "adapter.compression=4",
    "trainer.lr=3e-2",
    "trainer.steps=500",
    "trainer.batch_size=8",
    "trainer.warmup_frac=0.02",
];
