//! Run configuration.
//!
//! The on-disk form is a flat key-value document (TOML syntax, dotted keys):
//!
//! ```toml
//! encoder.layers = 2
//! adapter.compression = 4
//! trainer.lr = 1e-4
//! prompt.answer_prefix = "###Assistant:"
//! ```
//!
//! Every field is addressable by its dotted key, both in the file and through
//! `--set key=value` overrides on the command line. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    Pretrained,
}

impl FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "pretrained" => Ok(BackendKind::Pretrained),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::Pretrained => "pretrained",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backend: BackendKind,
    /// Transformer blocks `L`.
    pub layers: usize,
    /// Frame feature dim `D_m`.
    pub dim: usize,
    /// Frames per clip `T` when framing raw audio.
    pub frames: usize,
    pub heads: usize,
    pub seed: u64,
    /// Whether the pre-transformer embedding output takes part in the
    /// weighted layer average (`L+1` terms instead of `L`).
    pub include_embedding_layer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Temporal compression length `t`.
    pub compression: usize,
    pub bias: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub backend: BackendKind,
    /// Text embedding dim `D_t`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Standard deviation of token and position embeddings in the residual
    /// stream. The tied output head is rescaled to unit-variance rows.
    pub embed_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub batch_size: usize,
    /// Fixed step budget; 0 means `epochs` full passes.
    pub steps: u64,
    pub epochs: u64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub ema: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every N steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataConfig {
    pub clips: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub musicqa: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub pre_music: String,
    pub post_music: String,
    pub answer_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub min_interval_ms: u64,
    pub concurrency: usize,
    pub timeout_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub lm: LmConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub prompt: PromptConfig,
    pub decode: DecodeConfig,
    pub datagen: DatagenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                backend: BackendKind::Toy,
                layers: 2,
                dim: 16,
                frames: 16,
                heads: 2,
                seed: 17,
                include_embedding_layer: true,
            },
            adapter: AdapterConfig {
                compression: 4,
                bias: true,
                seed: 23,
            },
            lm: LmConfig {
                backend: BackendKind::Toy,
                dim: 32,
                layers: 2,
                heads: 4,
                max_len: 512,
                embed_std: 0.1,
                seed: 29,
            },
            trainer: TrainerConfig {
                batch_size: 8,
                steps: 0,
                epochs: 2,
                lr: 1e-4,
                warmup_frac: 0.02,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                grad_clip: 1.0,
                ema: 0.99,
                seed: 0,
                checkpoint_every: 0,
            },
            data: DataConfig::default(),
            prompt: PromptConfig {
                pre_music: String::new(),
                post_music: String::new(),
                answer_prefix: "###Assistant:".into(),
            },
            decode: DecodeConfig {
                max_new: 128,
                temperature: 0.0,
                seed: 0,
            },
            datagen: DatagenConfig {
                endpoint: "https://api.openai.com/v1/chat/completions".into(),
                model: "gpt-3.5-turbo".into(),
                api_key_env: "OPENAI_API_KEY".into(),
                max_attempts: 3,
                backoff_ms: 500,
                min_interval_ms: 0,
                concurrency: 1,
                timeout_s: 60,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Loads a config file on top of the defaults. Relative data paths are
    /// resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_kv_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.clips,
            &mut self.data.captions,
            &mut self.data.qa,
            &mut self.data.musicqa,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder.backend" => self.encoder.backend = value.parse()?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.dim" => self.encoder.dim = parse(key, value)?,
            "encoder.frames" => self.encoder.frames = parse(key, value)?,
            "encoder.heads" => self.encoder.heads = parse(key, value)?,
            "encoder.seed" => self.encoder.seed = parse(key, value)?,
            "encoder.include_embedding_layer" => {
                self.encoder.include_embedding_layer = parse_bool(key, value)?
            }
            "adapter.compression" => self.adapter.compression = parse(key, value)?,
            "adapter.bias" => self.adapter.bias = parse_bool(key, value)?,
            "adapter.seed" => self.adapter.seed = parse(key, value)?,
            "lm.backend" => self.lm.backend = value.parse()?,
            "lm.dim" => self.lm.dim = parse(key, value)?,
            "lm.layers" => self.lm.layers = parse(key, value)?,
            "lm.heads" => self.lm.heads = parse(key, value)?,
            "lm.max_len" => self.lm.max_len = parse(key, value)?,
            "lm.embed_std" => self.lm.embed_std = parse(key, value)?,
            "lm.seed" => self.lm.seed = parse(key, value)?,
            "trainer.batch_size" => self.trainer.batch_size = parse(key, value)?,
            "trainer.steps" => self.trainer.steps = parse(key, value)?,
            "trainer.epochs" => self.trainer.epochs = parse(key, value)?,
            "trainer.lr" => self.trainer.lr = parse(key, value)?,
            "trainer.warmup_frac" => self.trainer.warmup_frac = parse(key, value)?,
            "trainer.weight_decay" => self.trainer.weight_decay = parse(key, value)?,
            "trainer.beta1" => self.trainer.beta1 = parse(key, value)?,
            "trainer.beta2" => self.trainer.beta2 = parse(key, value)?,
            "trainer.eps" => self.trainer.eps = parse(key, value)?,
            "trainer.grad_clip" => self.trainer.grad_clip = parse(key, value)?,
            "trainer.ema" => self.trainer.ema = parse(key, value)?,
            "trainer.seed" => self.trainer.seed = parse(key, value)?,
            "trainer.checkpoint_every" => self.trainer.checkpoint_every = parse(key, value)?,
            "data.clips" => self.data.clips = opt_path(value),
            "data.captions" => self.data.captions = opt_path(value),
            "data.qa" => self.data.qa = opt_path(value),
            "data.musicqa" => self.data.musicqa = opt_path(value),
            "prompt.pre_music" => self.prompt.pre_music = value.to_string(),
            "prompt.post_music" => self.prompt.post_music = value.to_string(),
            "prompt.answer_prefix" => self.prompt.answer_prefix = value.to_string(),
            "decode.max_new" => self.decode.max_new = parse(key, value)?,
            "decode.temperature" => self.decode.temperature = parse(key, value)?,
            "decode.seed" => self.decode.seed = parse(key, value)?,
            "datagen.endpoint" => self.datagen.endpoint = value.to_string(),
            "datagen.model" => self.datagen.model = value.to_string(),
            "datagen.api_key_env" => self.datagen.api_key_env = value.to_string(),
            "datagen.max_attempts" => self.datagen.max_attempts = parse(key, value)?,
            "datagen.backoff_ms" => self.datagen.backoff_ms = parse(key, value)?,
            "datagen.min_interval_ms" => self.datagen.min_interval_ms = parse(key, value)?,
            "datagen.concurrency" => self.datagen.concurrency = parse(key, value)?,
            "datagen.timeout_s" => self.datagen.timeout_s = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order, then re-validates.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.layers", self.encoder.layers),
            ("encoder.dim", self.encoder.dim),
            ("encoder.frames", self.encoder.frames),
            ("encoder.heads", self.encoder.heads),
            ("adapter.compression", self.adapter.compression),
            ("lm.dim", self.lm.dim),
            ("lm.layers", self.lm.layers),
            ("lm.heads", self.lm.heads),
            ("lm.max_len", self.lm.max_len),
            ("trainer.batch_size", self.trainer.batch_size),
            ("datagen.concurrency", self.datagen.concurrency),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{k}` must be >= 1")));
            }
        }
        if !self.encoder.dim.is_multiple_of(self.encoder.heads) {
            return Err(Error::Config("encoder.dim must be divisible by encoder.heads".into()));
        }
        if !(self.lm.embed_std.is_finite() && self.lm.embed_std > 0.0) {
            return Err(Error::Config("lm.embed_std must be finite and > 0".into()));
        }
        if !self.lm.dim.is_multiple_of(self.lm.heads) {
            return Err(Error::Config("lm.dim must be divisible by lm.heads".into()));
        }
        if !(self.trainer.lr >= 0.0 && self.trainer.lr.is_finite()) {
            return Err(Error::Config("trainer.lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.trainer.warmup_frac) {
            return Err(Error::Config("trainer.warmup_frac must be in [0, 1)".into()));
        }
        if self.datagen.max_attempts == 0 {
            return Err(Error::Config("datagen.max_attempts must be >= 1".into()));
        }
        Ok(())
    }

    /// Digest of everything that fixes parameter shapes and the frozen
    /// backends. Checkpoints refuse to load under a different digest.
    pub fn model_digest(&self) -> String {
        let model = serde_json::json!({
            "encoder": self.encoder,
            "adapter": self.adapter,
            "lm": self.lm,
        });
        let mut h = Sha256::new();
        h.update(model.to_string().as_bytes());
        crate::nn::hex(&h.finalize())
    }

    /// Canonical flat rendering, loadable by [`RunConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten_json("", &value, &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn flatten_json(prefix: &str, value: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match value {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, v, out);
            }
        }
        serde_json::Value::Null => {
            out.insert(prefix.to_string(), "\"\"".into());
        }
        serde_json::Value::Number(n) if n.is_f64() => {
            // keep a decimal point so TOML reads it back as a float
            let f = n.as_f64().unwrap_or_default();
            out.insert(prefix.to_string(), format!("{f:?}"));
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
