//! Binary adapter checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then the raw little-endian `f64` payload in the order layer
//! logits, `W` (row-major), `b`. Optimizer state needed to resume lives in
//! a separate sidecar file next to the checkpoint.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::encoder::LayerWeights;
use crate::error::{Error, Result};
use crate::model::MusiLingo;
use crate::nn;

use super::optim::{AdamW, Moments};
use super::Stage;

const MAGIC: &[u8; 8] = b"MSLGCKPT";
const OPTIM_MAGIC: &[u8; 8] = b"MSLGOPTM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    config_digest: String,
    step: u64,
    compression: usize,
    num_states: usize,
    music_dim: usize,
    text_dim: usize,
    bias: bool,
}

/// Trainable parameters plus the identity of the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub step: u64,
    pub compression: usize,
    pub layer_logits: Vec<f64>,
    pub music_dim: usize,
    pub text_dim: usize,
    /// Row-major `[music_dim × text_dim]`.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn take_f64s(buf: &mut &[u8], n: usize, what: &str) -> Result<Vec<f64>> {
    let b = take(buf, n * 8, what)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn capture(model: &MusiLingo, config_digest: &str, step: u64) -> Result<Self> {
        let a = &model.adapter;
        Ok(Self {
            config_digest: config_digest.to_string(),
            step,
            compression: a.compression,
            layer_logits: flat(model.layer_weights.logits.as_tensor())?,
            music_dim: a.music_dim(),
            text_dim: a.text_dim(),
            weight: flat(a.weight.as_tensor())?,
            bias: a.bias.as_ref().map(|b| flat(b.as_tensor())).transpose()?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config_digest: self.config_digest.clone(),
            step: self.step,
            compression: self.compression,
            num_states: self.layer_logits.len(),
            music_dim: self.music_dim,
            text_dim: self.text_dim,
            bias: self.bias.is_some(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        put_f64s(&mut out, &self.layer_logits);
        put_f64s(&mut out, &self.weight);
        if let Some(b) = &self.bias {
            put_f64s(&mut out, b);
        }
        Ok(out)
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        if take(&mut buf, 8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not an adapter checkpoint (bad magic)".into()));
        }
        let version = take_u32(&mut buf, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = take_u32(&mut buf, "header length")? as usize;
        let h: Header = serde_json::from_slice(take(&mut buf, len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let layer_logits = take_f64s(&mut buf, h.num_states, "layer logits")?;
        let weight = take_f64s(&mut buf, h.music_dim * h.text_dim, "weight")?;
        let bias = if h.bias {
            Some(take_f64s(&mut buf, h.text_dim, "bias")?)
        } else {
            None
        };
        if !buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
        }
        Ok(Self {
            config_digest: h.config_digest,
            step: h.step,
            compression: h.compression,
            layer_logits,
            music_dim: h.music_dim,
            text_dim: h.text_dim,
            weight,
            bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Refuses a checkpoint written under a different model config unless
    /// `force` is set.
    pub fn check_digest(&self, expected: &str, force: bool) -> Result<()> {
        if self.config_digest != expected && !force {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {}, current config {expected} (use --force to override)",
                self.config_digest
            )));
        }
        Ok(())
    }

    /// Installs the parameters into `model`. Shapes must match.
    pub fn apply(&self, model: &mut MusiLingo) -> Result<()> {
        let (dm, dt) = (model.adapter.music_dim(), model.adapter.text_dim());
        if (self.music_dim, self.text_dim) != (dm, dt) {
            return Err(Error::Checkpoint(format!(
                "adapter shape {}x{} does not match model {dm}x{dt}",
                self.music_dim, self.text_dim
            )));
        }
        if self.layer_logits.len() != model.layer_weights.len() {
            return Err(Error::Checkpoint(format!(
                "{} layer logits, model has {} states",
                self.layer_logits.len(),
                model.layer_weights.len()
            )));
        }
        let dev = nn::device();
        let weight = Tensor::from_vec(self.weight.clone(), (dm, dt), &dev)?;
        let bias = self
            .bias
            .as_ref()
            .map(|b| Tensor::from_vec(b.clone(), dt, &dev))
            .transpose()?;
        model.adapter = AdapterState::from_parts(weight, bias, self.compression)?;
        model.layer_weights = LayerWeights::from_logits(&self.layer_logits)?;
        Ok(())
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(nn::hex(&Sha256::digest(self.to_bytes()?)))
    }
}

/// Path of the optimizer sidecar for a checkpoint.
pub fn optim_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".optim");
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimHeader {
    stage: Stage,
    step: u64,
    ema: Option<f64>,
    sizes: Vec<usize>,
}

/// Optimizer moments and loss EMA, enough to resume a stage exactly.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub stage: Stage,
    pub step: u64,
    pub ema: Option<f64>,
    pub moments: Vec<Moments>,
}

impl OptimState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut m_flat = Vec::new();
        let mut sizes = Vec::new();
        for mo in &self.moments {
            let (m, v) = (flat(&mo.m)?, flat(&mo.v)?);
            sizes.push(m.len());
            m_flat.push((m, v));
        }
        let header = serde_json::to_vec(&OptimHeader {
            stage: self.stage,
            step: self.step,
            ema: self.ema,
            sizes,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(OPTIM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (m, v) in &m_flat {
            put_f64s(&mut out, m);
            put_f64s(&mut out, v);
        }
        write_file(path, &out)
    }

    /// Loads moments, reshaping each to the matching optimizer slot.
    pub fn load(path: &Path, like: &AdamW) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut buf = bytes.as_slice();
        if take(&mut buf, 8, "magic")? != OPTIM_MAGIC {
            return Err(Error::Checkpoint("not an optimizer sidecar (bad magic)".into()));
        }
        let version = take_u32(&mut buf, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported optimizer state version {version}")));
        }
        let len = take_u32(&mut buf, "header length")? as usize;
        let h: OptimHeader = serde_json::from_slice(take(&mut buf, len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad optimizer header: {e}")))?;
        if h.sizes.len() != like.moments.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameter count".into()));
        }
        let mut moments = Vec::new();
        for (n, slot) in h.sizes.iter().zip(&like.moments) {
            if *n != slot.m.elem_count() {
                return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
            }
            let shape = slot.m.shape().clone();
            let m = Tensor::from_vec(take_f64s(&mut buf, *n, "first moment")?, shape.clone(), &nn::device())?;
            let v = Tensor::from_vec(take_f64s(&mut buf, *n, "second moment")?, shape, &nn::device())?;
            moments.push(Moments { m, v });
        }
        if !buf.is_empty() {
            return Err(Error::Checkpoint("trailing bytes in optimizer state".into()));
        }
        Ok(Self {
            stage: h.stage,
            step: h.step,
            ema: h.ema,
            moments,
        })
    }
}
