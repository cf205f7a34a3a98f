use std::collections::{HashMap, VecDeque};

use rust_stemmers::{Algorithm, Stemmer};

use super::tokenize;

/// Recall weight in the parameterized harmonic mean.
pub const METEOR_ALPHA: f64 = 0.9;
/// Fragmentation exponent.
pub const METEOR_BETA: f64 = 3.0;
/// Maximum fragmentation penalty.
pub const METEOR_GAMMA: f64 = 0.5;

/// Pairs the i-th unmatched candidate occurrence of each key with the i-th
/// unmatched reference occurrence of the same key.
fn align_stage(
    cand_keys: &[String],
    ref_keys: &[String],
    cand_used: &mut [bool],
    ref_used: &mut [bool],
    pairs: &mut Vec<(usize, usize)>,
) {
    let mut free: HashMap<&str, VecDeque<usize>> = HashMap::new();
    for (j, k) in ref_keys.iter().enumerate() {
        if !ref_used[j] {
            free.entry(k.as_str()).or_default().push_back(j);
        }
    }
    for (i, k) in cand_keys.iter().enumerate() {
        if cand_used[i] {
            continue;
        }
        if let Some(j) = free.get_mut(k.as_str()).and_then(VecDeque::pop_front) {
            cand_used[i] = true;
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
}

/// METEOR with exact and Porter-stem matching stages (no synonym stage).
/// `score = Fmean · (1 − γ·(chunks/matches)^β)` with
/// `Fmean = P·R / (α·P + (1−α)·R)`.
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; refr.len()];
    let mut pairs = Vec::new();
    align_stage(&cand, &refr, &mut cand_used, &mut ref_used, &mut pairs);

    let stemmer = Stemmer::create(Algorithm::English);
    let stem = |ts: &[String]| -> Vec<String> { ts.iter().map(|t| stemmer.stem(t).into_owned()).collect() };
    align_stage(&stem(&cand), &stem(&refr), &mut cand_used, &mut ref_used, &mut pairs);

    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    pairs.sort_unstable();
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();

    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / refr.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}
