//! Small transformer building blocks shared by the toy encoder and the toy
//! language model. All tensors are `f64` on the CPU. Parameters are plain
//! tensors (never `Var`s), so backprop can flow *through* these blocks into
//! their inputs but never into the weights themselves.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Deterministic Gaussian initializer. Every call draws from one ChaCha
/// stream, so the order of calls defines the parameter layout.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &device())?)
    }

    pub fn ones(&mut self, len: usize) -> Result<Tensor> {
        Ok(Tensor::ones(len, DTYPE, &device())?)
    }
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = x.broadcast_div(&(ms + 1e-6)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?)
}

/// Softmax over the last dimension. The max shift is detached: it cancels
/// analytically, so no gradient needs to flow through it.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `x · w` for `x` of shape `[.., in]` and `w` of shape `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(w)?)
}

/// One pre-norm transformer block: self-attention followed by a GELU MLP,
/// both with residual connections.
#[derive(Debug, Clone)]
pub struct Block {
    heads: usize,
    attn_norm: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_norm: Tensor,
    w1: Tensor,
    w2: Tensor,
}

impl Block {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = 4 * dim;
        Ok(Self {
            heads,
            attn_norm: init.ones(dim)?,
            wq: init.normal(&[dim, dim], s)?,
            wk: init.normal(&[dim, dim], s)?,
            wv: init.normal(&[dim, dim], s)?,
            wo: init.normal(&[dim, dim], s)?,
            mlp_norm: init.ones(dim)?,
            w1: init.normal(&[dim, hidden], s)?,
            w2: init.normal(&[hidden, dim], 1.0 / (hidden as f64).sqrt())?,
        })
    }

    /// `x`: `[B, S, D]`. With `causal`, position `i` attends only to `j <= i`.
    pub fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, s, d) = x.dims3()?;
        let hd = d / self.heads;

        let h = rms_norm(x, &self.attn_norm)?;
        let split = |w: &Tensor| -> Result<Tensor> {
            Ok(linear(&h, w)?
                .reshape((b, s, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(&self.wq)?, split(&self.wk)?, split(&self.wv)?);
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        if causal {
            scores = scores.broadcast_add(&causal_mask(s)?)?;
        }
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.contiguous()?.reshape((b, s, d))?;
        let x = (x + linear(&attn, &self.wo)?)?;

        let h = rms_norm(&x, &self.mlp_norm)?;
        let h = linear(&linear(&h, &self.w1)?.gelu()?, &self.w2)?;
        Ok((x + h)?)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w1,
            &self.w2,
        ]
    }
}

fn causal_mask(s: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..s)
        .flat_map(|i| (0..s).map(move |j| if j <= i { 0.0 } else { -1e300 }))
        .collect();
    Ok(Tensor::from_vec(data, (s, s), &device())?)
}

/// SHA-256 over the little-endian bytes of every tensor, in order.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update((t.dims().len() as u64).to_le_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex(&hasher.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Row-major copy of a 2-D tensor.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_vec2::<f64>()?)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (r, c), &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let a = Init::new(7).normal(&[3, 4], 1.0).unwrap();
        let b = Init::new(7).normal(&[3, 4], 1.0).unwrap();
        assert_eq!(digest_tensors([&a]).unwrap(), digest_tensors([&b]).unwrap());
        let c = Init::new(8).normal(&[3, 4], 1.0).unwrap();
        assert_ne!(digest_tensors([&a]).unwrap(), digest_tensors([&c]).unwrap());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Init::new(1).normal(&[4, 9], 3.0).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_block_ignores_future() {
        let mut init = Init::new(3);
        let block = Block::new(&mut init, 8, 2).unwrap();
        let x = init.normal(&[1, 5, 8], 1.0).unwrap();
        let y = block.forward(&x, true).unwrap();
        let mut rows = x.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        rows[4][0] += 10.0;
        let x2 = from_rows(&rows).unwrap().unsqueeze(0).unwrap();
        let y2 = block.forward(&x2, true).unwrap();
        let a = y.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let b = y2.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a[..4], b[..4]);
        assert_ne!(a[4], b[4]);
    }
}
