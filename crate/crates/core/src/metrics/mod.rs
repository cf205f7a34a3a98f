//! Text-generation metrics: B-U (mean of BLEU-1..4), METEOR, ROUGE-L and a
//! BERT-Score style greedy embedding match.
//!
//! BLEU, ROUGE-L and METEOR share one tokenizer: lowercase, maximal runs of
//! alphanumeric characters. Punctuation is dropped.

mod bert;
mod bleu;
mod meteor;
mod report;
mod rouge;

pub use bert::{bert_s, HashEmbedder, TokenEmbedder};
pub use bleu::{b_u, bleu_n};
pub use meteor::{meteor, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA};
pub use report::{evaluate_corpus, CorpusScores, EvalReport, PairScores};
pub use rouge::{lcs_len, rouge_l};

pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Harmonic mean, 0 when either side is 0.
pub(crate) fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
