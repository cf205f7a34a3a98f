//! Frozen music encoders and the learnable weighted average over their
//! layer outputs.

use std::f64::consts::PI;

use candle_core::{Tensor, Var};

use crate::config::{BackendKind, EncoderConfig};
use crate::data::{ClipContent, MusicClip};
use crate::error::{Error, Result};
use crate::nn::{self, Block, Init, DTYPE};

/// Hidden states of every encoder layer for one clip, `[layers × T × D_m]`.
#[derive(Debug, Clone)]
pub struct LayeredFeatures {
    pub states: Tensor,
}

impl LayeredFeatures {
    pub fn new(states: Tensor) -> Result<Self> {
        let (l, t, d) = states.dims3()?;
        if l == 0 || t == 0 || d == 0 {
            return Err(Error::Empty("layered features"));
        }
        let all_finite = states
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidArgument("encoder produced non-finite states".into()));
        }
        Ok(Self { states })
    }

    pub fn num_layers(&self) -> usize {
        self.states.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.states.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.states.dims()[2]
    }
}

/// Trainable layer-mixing logits; the mixing weights are their softmax.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub logits: Var,
}

impl LayerWeights {
    /// Uniform weights over `n` layers.
    pub fn uniform(n: usize) -> Result<Self> {
        Ok(Self {
            logits: Var::zeros(n, DTYPE, &nn::device())?,
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Ok(Self {
            logits: Var::from_tensor(&Tensor::new(logits, &nn::device())?)?,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> Result<Tensor> {
        nn::softmax_last(self.logits.as_tensor())
    }
}

/// `Σ_ℓ softmax(logits)[ℓ] · states[ℓ]`, shape `[T × D_m]`.
pub fn aggregate_layers(feats: &LayeredFeatures, w: &LayerWeights) -> Result<Tensor> {
    if w.len() != feats.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} encoder layers",
            w.len(),
            feats.num_layers()
        )));
    }
    let weights = w.weights()?.reshape((w.len(), 1, 1))?;
    Ok(feats.states.broadcast_mul(&weights)?.sum(0)?)
}

pub trait MusicEncoder: Send + Sync {
    fn encode(&self, clip: &MusicClip) -> Result<LayeredFeatures>;

    /// Number of layer outputs returned by `encode`.
    fn num_states(&self) -> usize;

    fn feature_dim(&self) -> usize;

    fn parameter_digest(&self) -> Result<String>;
}

pub fn build_encoder(cfg: &EncoderConfig) -> Result<Box<dyn MusicEncoder>> {
    Ok(match cfg.backend {
        BackendKind::Toy => Box::new(ToyEncoder::new(cfg)?),
        BackendKind::Pretrained => Box::new(PrecomputedEncoder::new(cfg)),
    })
}

/// Small bidirectional transformer with seed-derived, never-updated weights.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    cfg: EncoderConfig,
    input_proj: Tensor,
    blocks: Vec<Block>,
}

impl ToyEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        let mut init = Init::new(cfg.seed);
        let d = cfg.dim;
        let input_proj = init.normal(&[d, d], 1.0 / (d as f64).sqrt())?;
        let blocks = (0..cfg.layers)
            .map(|_| Block::new(&mut init, d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input_proj,
            blocks,
        })
    }

    fn frame_features(&self, clip: &MusicClip) -> Result<Tensor> {
        let d = self.cfg.dim;
        match &clip.content {
            ClipContent::Waveform { samples, .. } => {
                let frames = self.cfg.frames;
                if samples.len() < frames {
                    return Err(Error::InvalidArgument(format!(
                        "clip `{}` has {} samples, fewer than {frames} frames",
                        clip.id,
                        samples.len()
                    )));
                }
                let rows: Vec<Vec<f64>> = (0..frames)
                    .map(|f| {
                        let lo = f * samples.len() / frames;
                        let hi = (f + 1) * samples.len() / frames;
                        dct_features(&samples[lo..hi], d)
                    })
                    .collect();
                nn::from_rows(&rows)
            }
            ClipContent::Frames(rows) => {
                if rows.is_empty() {
                    return Err(Error::Empty("clip frames"));
                }
                if rows[0].len() != d {
                    return Err(Error::Shape(format!(
                        "clip `{}` frame dim {} but encoder dim {d}",
                        clip.id,
                        rows[0].len()
                    )));
                }
                nn::from_rows(rows)
            }
            ClipContent::Layers(_) => Err(Error::InvalidArgument(format!(
                "clip `{}` carries precomputed layer states; use the pretrained encoder backend",
                clip.id
            ))),
        }
    }
}

/// First `d` DCT-II coefficients of a frame, squashed with `tanh`.
fn dct_features(frame: &[f64], d: usize) -> Vec<f64> {
    let n = frame.len() as f64;
    let scale = (2.0 / n).sqrt();
    (0..d)
        .map(|k| {
            let c: f64 = frame
                .iter()
                .enumerate()
                .map(|(s, x)| x * (PI / n * (s as f64 + 0.5) * k as f64).cos())
                .sum();
            (scale * c).tanh()
        })
        .collect()
}

fn sinusoidal_positions(t: usize, d: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|p| {
            (0..d)
                .map(|i| {
                    let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let a = p as f64 * freq;
                    if i % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect();
    nn::from_rows(&rows)
}

impl MusicEncoder for ToyEncoder {
    fn encode(&self, clip: &MusicClip) -> Result<LayeredFeatures> {
        let frames = self.frame_features(clip)?;
        let (t, d) = frames.dims2()?;
        let h0 = (nn::linear(&frames, &self.input_proj)? + sinusoidal_positions(t, d)?)?;
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        let mut h = h0.unsqueeze(0)?;
        if self.cfg.include_embedding_layer {
            states.push(h.clone());
        }
        for block in &self.blocks {
            h = block.forward(&h, false)?;
            states.push(h.clone());
        }
        // Frozen: cut every path back into the encoder.
        LayeredFeatures::new(Tensor::cat(&states, 0)?.detach())
    }

    fn num_states(&self) -> usize {
        self.cfg.layers + usize::from(self.cfg.include_embedding_layer)
    }

    fn feature_dim(&self) -> usize {
        self.cfg.dim
    }

    fn parameter_digest(&self) -> Result<String> {
        let mut tensors = vec![&self.input_proj];
        for b in &self.blocks {
            tensors.extend(b.tensors());
        }
        nn::digest_tensors(tensors)
    }
}

/// Adapter for features exported offline from a pretrained encoder: clips
/// carry their `[L+1][T][D_m]` states directly.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    cfg: EncoderConfig,
}

impl PrecomputedEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        Self { cfg: cfg.clone() }
    }
}

impl MusicEncoder for PrecomputedEncoder {
    fn encode(&self, clip: &MusicClip) -> Result<LayeredFeatures> {
        let ClipContent::Layers(layers) = &clip.content else {
            return Err(Error::Backend(format!(
                "pretrained encoder needs precomputed layer states for clip `{}`",
                clip.id
            )));
        };
        if layers.len() != self.cfg.layers + 1 {
            return Err(Error::Shape(format!(
                "clip `{}` has {} layer states, expected {}",
                clip.id,
                layers.len(),
                self.cfg.layers + 1
            )));
        }
        let skip = usize::from(!self.cfg.include_embedding_layer);
        let mut states = Vec::new();
        for layer in &layers[skip..] {
            if layer.is_empty() || layer[0].len() != self.cfg.dim {
                return Err(Error::Shape(format!(
                    "clip `{}` feature dim does not match encoder.dim {}",
                    clip.id, self.cfg.dim
                )));
            }
            states.push(nn::from_rows(layer)?.unsqueeze(0)?);
        }
        LayeredFeatures::new(Tensor::cat(&states, 0)?)
    }

    fn num_states(&self) -> usize {
        self.cfg.layers + usize::from(self.cfg.include_embedding_layer)
    }

    fn feature_dim(&self) -> usize {
        self.cfg.dim
    }

    fn parameter_digest(&self) -> Result<String> {
        Ok(nn::hex(b"precomputed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn toy_cfg(frames: usize) -> EncoderConfig {
        let mut c = RunConfig::default().encoder;
        c.frames = frames;
        c
    }

    fn wave_clip(samples: Vec<f64>) -> MusicClip {
        MusicClip {
            id: "w".into(),
            source_ref: String::new(),
            duration_s: samples.len() as f64 / 100.0,
            content: ClipContent::Waveform {
                sample_rate: 100,
                samples,
            },
        }
    }

    #[test]
    fn toy_shape_law() {
        let cfg = toy_cfg(8);
        let enc = ToyEncoder::new(&cfg).unwrap();
        let clip = wave_clip((0..400).map(|i| (i as f64 * 0.1).sin()).collect());
        let f = enc.encode(&clip).unwrap();
        assert_eq!(f.states.dims(), &[cfg.layers + 1, 8, cfg.dim]);
    }

    #[test]
    fn encode_is_bit_deterministic() {
        let enc = ToyEncoder::new(&toy_cfg(8)).unwrap();
        let clip = wave_clip((0..400).map(|i| (i as f64 * 0.37).cos()).collect());
        let a = enc.encode(&clip).unwrap().states.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = enc.encode(&clip).unwrap().states.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        let other = ToyEncoder::new(&toy_cfg(8)).unwrap();
        let c = other.encode(&clip).unwrap().states.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_signal_is_finite() {
        let enc = ToyEncoder::new(&toy_cfg(8)).unwrap();
        let f = enc.encode(&wave_clip(vec![0.0; 160])).unwrap();
        assert!(f
            .states
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn frame_dim_mismatch_is_error() {
        let enc = ToyEncoder::new(&toy_cfg(8)).unwrap();
        let clip = MusicClip {
            id: "f".into(),
            source_ref: String::new(),
            duration_s: 1.0,
            content: ClipContent::Frames(vec![vec![0.0; 3]; 4]),
        };
        assert!(matches!(enc.encode(&clip), Err(Error::Shape(_))));
    }

    #[test]
    fn too_short_clip_is_error() {
        let enc = ToyEncoder::new(&toy_cfg(8)).unwrap();
        assert!(enc.encode(&wave_clip(vec![0.1; 3])).is_err());
    }

    #[test]
    fn embedding_layer_switch_drops_one_state() {
        let mut cfg = toy_cfg(4);
        cfg.include_embedding_layer = false;
        let enc = ToyEncoder::new(&cfg).unwrap();
        let f = enc.encode(&wave_clip(vec![0.5; 40])).unwrap();
        assert_eq!(f.num_layers(), cfg.layers);
        assert_eq!(enc.num_states(), cfg.layers);
    }

    #[test]
    fn precomputed_backend_reads_layers() {
        let mut cfg = toy_cfg(4);
        cfg.backend = BackendKind::Pretrained;
        cfg.layers = 1;
        cfg.dim = 2;
        let enc = PrecomputedEncoder::new(&cfg);
        let clip = MusicClip {
            id: "p".into(),
            source_ref: String::new(),
            duration_s: 1.0,
            content: ClipContent::Layers(vec![vec![vec![1.0, 2.0]; 3], vec![vec![3.0, 4.0]; 3]]),
        };
        let f = enc.encode(&clip).unwrap();
        assert_eq!(f.states.dims(), &[2, 3, 2]);
        let wave = wave_clip(vec![0.0; 10]);
        assert!(matches!(enc.encode(&wave), Err(Error::Backend(_))));
    }

    #[test]
    fn one_hot_weights_select_layer() {
        let enc = ToyEncoder::new(&toy_cfg(6)).unwrap();
        let f = enc.encode(&wave_clip((0..60).map(|i| i as f64 / 60.0).collect())).unwrap();
        let n = f.num_layers();
        for k in 0..n {
            let mut logits = vec![-1e4; n];
            logits[k] = 0.0;
            let w = LayerWeights::from_logits(&logits).unwrap();
            let out = aggregate_layers(&f, &w).unwrap().to_vec2::<f64>().unwrap();
            let want = f.states.get(k).unwrap().to_vec2::<f64>().unwrap();
            assert_eq!(out, want);
        }
    }

    #[test]
    fn identical_layers_are_weight_invariant() {
        let layer = Init::new(5).normal(&[1, 4, 3], 1.0).unwrap();
        let feats = LayeredFeatures::new(Tensor::cat(&[&layer, &layer, &layer], 0).unwrap()).unwrap();
        let w = LayerWeights::from_logits(&[0.3, -1.2, 2.0]).unwrap();
        let out = aggregate_layers(&feats, &w).unwrap().to_vec2::<f64>().unwrap();
        let want = layer.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (r, s) in out.iter().zip(&want) {
            for (a, b) in r.iter().zip(s) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_length_mismatch() {
        let layer = Init::new(5).normal(&[2, 4, 3], 1.0).unwrap();
        let feats = LayeredFeatures::new(layer).unwrap();
        let w = LayerWeights::uniform(3).unwrap();
        assert!(matches!(aggregate_layers(&feats, &w), Err(Error::Shape(_))));
    }
}
