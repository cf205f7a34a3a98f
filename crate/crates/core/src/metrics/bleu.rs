use std::collections::HashMap;

use super::tokenize;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level cumulative BLEU-`n` (geometric mean of 1..=n modified
/// precisions) with brevity penalty. Orders `k >= 2` use add-one smoothing on
/// both numerator and denominator; unigram precision is unsmoothed, so no
/// unigram overlap means 0. An empty candidate or reference scores 0.
pub fn bleu_n(candidate: &str, reference: &str, n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let c = ngram_counts(&cand, k);
        let r = ngram_counts(&refr, k);
        let matched: usize = c
            .iter()
            .map(|(g, cnt)| (*cnt).min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(k - 1);
        let p = if k == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// `100 × mean(BLEU-1..4)`.
pub fn b_u(candidate: &str, reference: &str) -> f64 {
    let sum: f64 = (1..=4).map(|n| bleu_n(candidate, reference, n)).sum();
    100.0 * sum / 4.0
}
