use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{f1, tokenize};

/// Maps a token sequence to one vector per token.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>>;
}

/// Context-free embedder: each token's vector is drawn from a generator
/// seeded by a hash of the token, so equal tokens always get equal vectors.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TokenEmbedder for HashEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(t.as_bytes()) ^ self.seed);
                (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Greedy-matching F1 over token cosines. Each token's best cosine is
/// clamped to `[0, 1]`, keeping the score in `[0, 1]`.
pub fn bert_s(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let ce = embedder.embed(&cand);
    let re = embedder.embed(&refr);
    let best = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let total: f64 = xs
            .iter()
            .map(|x| {
                ys.iter()
                    .map(|y| cosine(x, y))
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, 1.0)
            })
            .sum();
        total / xs.len() as f64
    };
    f1(best(&ce, &re), best(&re, &ce))
}
