use serde::{Deserialize, Serialize};

use super::{b_u, bert_s, meteor, rouge_l, TokenEmbedder};
use crate::error::{Error, Result};

/// Scores for one (candidate, reference) pair. `bu` is on the 0–100 scale,
/// the others on 0–1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub bu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bert_s: f64,
}

/// Arithmetic means of the per-pair scores, same scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub bert_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub corpus: CorpusScores,
    pub pairs: Vec<PairScores>,
}

pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, S)], embedder: &dyn TokenEmbedder) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let scores: Vec<PairScores> = pairs
        .iter()
        .map(|(c, r)| {
            let (c, r) = (c.as_ref(), r.as_ref());
            PairScores {
                bu: b_u(c, r),
                meteor: meteor(c, r),
                rouge_l: rouge_l(c, r),
                bert_s: bert_s(c, r, embedder),
            }
        })
        .collect();
    let n = scores.len() as f64;
    let mean = |f: fn(&PairScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let corpus = CorpusScores {
        bu: mean(|s| s.bu),
        meteor: mean(|s| s.meteor),
        rouge_l: mean(|s| s.rouge_l),
        bert_s: mean(|s| s.bert_s),
    };
    Ok(EvalReport {
        count: scores.len(),
        corpus,
        pairs: scores,
    })
}

impl EvalReport {
    /// Table row in display units: every column on the 0–100 scale. METEOR
    /// is reported under M-R and ROUGE-L under R-L.
    pub fn table(&self, label: &str) -> String {
        let c = &self.corpus;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>7} {:>7} {:>7} {:>8}\n",
            "Model", "B-U", "M-R", "R-L", "BERT-S"
        ));
        out.push_str(&format!(
            "{:<24} {:>7.1} {:>7.1} {:>7.1} {:>8.1}\n",
            label,
            c.bu,
            100.0 * c.meteor,
            100.0 * c.rouge_l,
            100.0 * c.bert_s
        ));
        out.push_str(&format!("({} pairs)\n", self.count));
        out
    }
}
