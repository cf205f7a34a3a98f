//! The trainable bridge between encoder and language model: a linear
//! projection into the text-embedding space followed by temporal mean
//! pooling over consecutive groups of `t` frames.

use candle_core::{Tensor, Var};

use crate::encoder::{aggregate_layers, LayerWeights, LayeredFeatures};
use crate::error::{Error, Result};
use crate::nn::{self, Init, DTYPE};

#[derive(Debug, Clone)]
pub struct AdapterState {
    /// `[D_m × D_t]`
    pub weight: Var,
    /// `[D_t]`, absent when the bias is disabled.
    pub bias: Option<Var>,
    pub compression: usize,
}

impl AdapterState {
    /// Fan-in scaled Gaussian weight, zero bias.
    pub fn init(music_dim: usize, text_dim: usize, compression: usize, bias: bool, seed: u64) -> Result<Self> {
        if compression == 0 {
            return Err(Error::InvalidArgument("compression length must be >= 1".into()));
        }
        let w = Init::new(seed).normal(&[music_dim, text_dim], 1.0 / (music_dim as f64).sqrt())?;
        let bias = if bias {
            Some(Var::zeros(text_dim, DTYPE, &nn::device())?)
        } else {
            None
        };
        Ok(Self {
            weight: Var::from_tensor(&w)?,
            bias,
            compression,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, compression: usize) -> Result<Self> {
        if compression == 0 {
            return Err(Error::InvalidArgument("compression length must be >= 1".into()));
        }
        let (_, dt) = weight.dims2()?;
        if let Some(b) = &bias {
            if b.dims() != [dt] {
                return Err(Error::Shape(format!("bias {:?} for text dim {dt}", b.dims())));
            }
        }
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: bias.map(|b| Var::from_tensor(&b)).transpose()?,
            compression,
        })
    }

    pub fn music_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn vars(&self) -> Vec<&Var> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|v| v.elem_count()).sum()
    }
}

/// Compressed music tokens ready to be spliced into the LM input,
/// `[T′ × D_t]` with `T′ = ⌈T/t⌉`.
#[derive(Debug, Clone)]
pub struct MusicEmbedding {
    pub values: Tensor,
}

impl MusicEmbedding {
    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }
}

/// `x · W + b` row-wise.
pub fn project(x: &Tensor, a: &AdapterState) -> Result<Tensor> {
    let (_, dm) = x.dims2()?;
    if dm != a.music_dim() {
        return Err(Error::Shape(format!(
            "music features have dim {dm}, adapter expects {}",
            a.music_dim()
        )));
    }
    let out = x.matmul(a.weight.as_tensor())?;
    Ok(match &a.bias {
        Some(b) => out.broadcast_add(b.as_tensor())?,
        None => out,
    })
}

/// Mean over consecutive row groups of size `t`; the last group may be
/// shorter and is averaged over its actual size.
pub fn temporal_compress(m: &Tensor, t: usize) -> Result<MusicEmbedding> {
    if t == 0 {
        return Err(Error::InvalidArgument("compression length must be >= 1".into()));
    }
    let (rows, _) = m.dims2()?;
    if rows == 0 {
        return Err(Error::Empty("sequence to compress"));
    }
    let groups = (0..rows.div_ceil(t))
        .map(|g| {
            let start = g * t;
            let len = t.min(rows - start);
            m.narrow(0, start, len)?.mean_keepdim(0)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(MusicEmbedding {
        values: Tensor::cat(&groups, 0)?,
    })
}

/// Weighted layer average, then projection, then compression.
pub fn adapt(feats: &LayeredFeatures, w: &LayerWeights, a: &AdapterState) -> Result<MusicEmbedding> {
    let pooled = aggregate_layers(feats, w)?;
    let projected = project(&pooled, a)?;
    temporal_compress(&projected, a.compression)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    #[test]
    fn identity_projection() {
        let x = Init::new(1).normal(&[5, 4], 1.0).unwrap();
        let eye = Tensor::eye(4, DTYPE, &nn::device()).unwrap();
        let a = AdapterState::from_parts(eye, Some(Tensor::zeros(4, DTYPE, &nn::device()).unwrap()), 1).unwrap();
        assert_eq!(rows(&project(&x, &a).unwrap()), rows(&x));
    }

    #[test]
    fn zero_input_yields_bias_rows() {
        let mut a = AdapterState::init(3, 2, 1, true, 4).unwrap();
        a.bias = Some(Var::new(&[0.5, -2.0], &nn::device()).unwrap());
        let x = Tensor::zeros((3, 3), DTYPE, &nn::device()).unwrap();
        for r in rows(&project(&x, &a).unwrap()) {
            assert_eq!(r, vec![0.5, -2.0]);
        }
    }

    #[test]
    fn projection_dim_mismatch() {
        let a = AdapterState::init(3, 2, 1, true, 4).unwrap();
        let x = Tensor::zeros((3, 5), DTYPE, &nn::device()).unwrap();
        assert!(matches!(project(&x, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn compress_t1_is_identity() {
        let x = Init::new(2).normal(&[7, 3], 1.0).unwrap();
        let out = temporal_compress(&x, 1).unwrap();
        assert_eq!(out.len(), 7);
        assert_eq!(rows(&out.values), rows(&x));
    }

    #[test]
    fn compress_pairs() {
        let x = Tensor::new(&[[1.0, 1.0], [3.0, 3.0], [5.0, 5.0], [7.0, 7.0]], &nn::device()).unwrap();
        let out = temporal_compress(&x, 2).unwrap();
        assert_eq!(rows(&out.values), vec![vec![2.0, 2.0], vec![6.0, 6.0]]);
    }

    #[test]
    fn compress_partial_group_keeps_last_row() {
        let x = Init::new(3).normal(&[5, 2], 1.0).unwrap();
        let out = temporal_compress(&x, 2).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(rows(&out.values)[2], rows(&x)[4]);
    }

    #[test]
    fn compress_rejects_empty_and_zero() {
        let x = Tensor::zeros((0, 2), DTYPE, &nn::device()).unwrap();
        assert!(matches!(temporal_compress(&x, 2), Err(Error::Empty(_))));
        let y = Tensor::zeros((2, 2), DTYPE, &nn::device()).unwrap();
        assert!(temporal_compress(&y, 0).is_err());
    }

    #[test]
    fn bias_can_be_disabled() {
        let a = AdapterState::init(4, 3, 2, false, 1).unwrap();
        assert!(a.bias.is_none());
        assert_eq!(a.num_parameters(), 12);
    }
}
