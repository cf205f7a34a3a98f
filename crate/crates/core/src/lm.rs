//! Frozen autoregressive language models and decoding.

use candle_core::{IndexOp, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BackendKind, LmConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Block, Init};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One id per UTF-8 byte, plus two reserved ids.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOS: u32 = 256;
    pub const PAD: u32 = 257;
    pub const VOCAB: usize = 258;

    pub fn tokenize(&self, s: &str) -> TokenSequence {
        TokenSequence {
            ids: self.encode_bytes(s.as_bytes()),
            text: s.to_string(),
        }
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| u32::from(b)).collect()
    }

    /// Byte ids back to bytes; reserved ids are skipped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

pub trait LanguageModel: Send + Sync {
    /// Text embedding width `D_t`.
    fn dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn max_len(&self) -> usize;
    fn tokenize(&self, s: &str) -> TokenSequence;
    fn detokenize(&self, ids: &[u32]) -> String;
    /// `[n × D_t]` embeddings for token ids.
    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor>;
    /// Next-token logits for `[B × S × D_t]` (or `[S × D_t]`) input embeddings;
    /// output is `[B × S × V]` (or `[S × V]`). Position `i` sees only `≤ i`.
    fn forward_logits(&self, embeddings: &Tensor) -> Result<Tensor>;
    fn parameter_digest(&self) -> Result<String>;
}

pub fn build_lm(cfg: &LmConfig) -> Result<Box<dyn LanguageModel>> {
    match cfg.backend {
        BackendKind::Toy => Ok(Box::new(ToyLm::new(cfg)?)),
        BackendKind::Pretrained => Err(Error::Backend(
            "no pretrained language model is linked into this build; implement `LanguageModel` \
             for it and construct the model programmatically"
                .into(),
        )),
    }
}

/// Byte-level causal transformer with seed-derived, never-updated weights.
/// The output head is the token embedding divided by its init scale, so
/// small residual embeddings still give unit-scale logit directions.
#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: LmConfig,
    tokenizer: ByteTokenizer,
    token_emb: Tensor,
    head: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
}

impl ToyLm {
    pub fn new(cfg: &LmConfig) -> Result<Self> {
        let mut init = Init::new(cfg.seed);
        let d = cfg.dim;
        let token_emb = init.normal(&[ByteTokenizer::VOCAB, d], cfg.embed_std)?;
        let pos_emb = init.normal(&[cfg.max_len, d], cfg.embed_std)?;
        let head = (&token_emb / cfg.embed_std)?.t()?.contiguous()?;
        let blocks = (0..cfg.layers)
            .map(|_| Block::new(&mut init, d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = init.ones(d)?;
        Ok(Self {
            cfg: cfg.clone(),
            tokenizer: ByteTokenizer,
            token_emb,
            head,
            pos_emb,
            blocks,
            final_norm,
        })
    }
}

impl LanguageModel for ToyLm {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn vocab_size(&self) -> usize {
        ByteTokenizer::VOCAB
    }

    fn eos_id(&self) -> u32 {
        ByteTokenizer::EOS
    }

    fn pad_id(&self) -> u32 {
        ByteTokenizer::PAD
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn tokenize(&self, s: &str) -> TokenSequence {
        self.tokenizer.tokenize(s)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        self.tokenizer.detokenize(ids)
    }

    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= ByteTokenizer::VOCAB) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of vocabulary")));
        }
        let idx = Tensor::new(ids, &nn::device())?;
        Ok(self.token_emb.index_select(&idx, 0)?)
    }

    fn forward_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let batched = embeddings.rank() == 3;
        let x = if batched {
            embeddings.clone()
        } else {
            embeddings.unsqueeze(0)?
        };
        let (_, s, d) = x.dims3()?;
        if d != self.cfg.dim {
            return Err(Error::Shape(format!("input dim {d}, model dim {}", self.cfg.dim)));
        }
        if s == 0 {
            return Err(Error::Empty("input sequence"));
        }
        if s > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {s} exceeds lm.max_len {}",
                self.cfg.max_len
            )));
        }
        let mut h = x.broadcast_add(&self.pos_emb.narrow(0, 0, s)?)?;
        for block in &self.blocks {
            h = block.forward(&h, true)?;
        }
        let h = nn::rms_norm(&h, &self.final_norm)?;
        let logits = h.broadcast_matmul(&self.head)?;
        Ok(if batched { logits } else { logits.squeeze(0)? })
    }

    fn parameter_digest(&self) -> Result<String> {
        let mut tensors = vec![&self.token_emb, &self.pos_emb, &self.final_norm];
        for b in &self.blocks {
            tensors.extend(b.tensors());
        }
        nn::digest_tensors(tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl Decode {
    /// Temperature 0 means greedy.
    pub fn from_temperature(temperature: f64, seed: u64) -> Self {
        if temperature > 0.0 {
            Decode::Sample { temperature, seed }
        } else {
            Decode::Greedy
        }
    }
}

/// Autoregressively extends `prefix` (`[S × D_t]` input embeddings) until
/// end-of-sequence or `max_new` tokens. Returns the generated ids without
/// the end-of-sequence marker.
pub fn generate_ids(
    lm: &dyn LanguageModel,
    prefix: &Tensor,
    decode: Decode,
    max_new: usize,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::InvalidArgument("max_new must be >= 1".into()));
    }
    let mut rng = match decode {
        Decode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decode::Greedy => None,
    };
    let mut out: Vec<u32> = Vec::new();
    let mut seq = prefix.clone();
    while out.len() < max_new && seq.dims()[0] < lm.max_len() {
        let logits = lm.forward_logits(&seq)?;
        let last = logits.i(logits.dims()[0] - 1)?.to_vec1::<f64>()?;
        let next = match (decode, rng.as_mut()) {
            (Decode::Sample { temperature, .. }, Some(rng)) => sample(&last, temperature, rng)?,
            _ => argmax(&last),
        };
        if next == lm.eos_id() {
            break;
        }
        out.push(next);
        seq = Tensor::cat(&[&seq, &lm.embed_tokens(&[next])?], 0)?;
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<u32> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("cannot sample: {e}")))?;
    Ok(dist.sample(rng) as u32)
}
