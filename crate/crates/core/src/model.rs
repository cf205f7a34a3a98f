//! The assembled system: frozen encoder, trainable adapter and layer
//! weights, frozen language model.

use candle_core::Var;

use crate::adapter::{adapt, AdapterState, MusicEmbedding};
use crate::config::RunConfig;
use crate::data::MusicClip;
use crate::encoder::{build_encoder, LayerWeights, LayeredFeatures, MusicEncoder};
use crate::error::{Error, Result};
use crate::lm::{build_lm, generate_ids, Decode, LanguageModel};
use crate::sequence::{build_instruct_prefix, build_pretrain_prefix, PromptTemplate};

/// Question used to request a caption through the Q&A interface.
pub const CAPTION_QUESTION: &str = "Please give a caption to the music";

pub struct MusiLingo {
    pub encoder: Box<dyn MusicEncoder>,
    pub lm: Box<dyn LanguageModel>,
    pub layer_weights: LayerWeights,
    pub adapter: AdapterState,
    pub template: PromptTemplate,
}

/// What the generated text should answer.
#[derive(Debug, Clone, Copy)]
pub enum Prompt<'a> {
    /// Pre-training layout: the model continues directly after the music.
    Caption,
    /// Instruction layout with the answer prefix.
    Question(&'a str),
}

impl MusiLingo {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let encoder = build_encoder(&cfg.encoder)?;
        let lm = build_lm(&cfg.lm)?;
        Self::new(encoder, lm, cfg)
    }

    /// Builds with explicit backends, initializing the trainable state from
    /// the config seeds.
    pub fn new(encoder: Box<dyn MusicEncoder>, lm: Box<dyn LanguageModel>, cfg: &RunConfig) -> Result<Self> {
        let layer_weights = LayerWeights::uniform(encoder.num_states())?;
        let adapter = AdapterState::init(
            encoder.feature_dim(),
            lm.dim(),
            cfg.adapter.compression,
            cfg.adapter.bias,
            cfg.adapter.seed,
        )?;
        Ok(Self {
            encoder,
            lm,
            layer_weights,
            adapter,
            template: PromptTemplate::from(&cfg.prompt),
        })
    }

    /// Trainable parameters in a fixed order: layer logits, W, b.
    pub fn trainable_vars(&self) -> Vec<&Var> {
        let mut v = vec![&self.layer_weights.logits];
        v.extend(self.adapter.vars());
        v
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn encode(&self, clip: &MusicClip) -> Result<LayeredFeatures> {
        self.encoder.encode(clip)
    }

    pub fn embed_music(&self, feats: &LayeredFeatures) -> Result<MusicEmbedding> {
        adapt(feats, &self.layer_weights, &self.adapter)
    }

    pub fn generate(
        &self,
        feats: &LayeredFeatures,
        prompt: Prompt<'_>,
        decode: Decode,
        max_new: usize,
    ) -> Result<String> {
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be >= 1".into()));
        }
        let music = self.embed_music(feats)?;
        let prefix = match prompt {
            Prompt::Caption => build_pretrain_prefix(&music, &self.template, self.lm.as_ref())?,
            Prompt::Question(q) => {
                let q = self.lm.tokenize(q);
                build_instruct_prefix(&music, &q, &self.template, self.lm.as_ref())?
            }
        };
        let ids = generate_ids(self.lm.as_ref(), &prefix.embeddings.detach(), decode, max_new)?;
        Ok(self.lm.detokenize(&ids))
    }
}
