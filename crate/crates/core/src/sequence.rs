//! Assembly of mixed music/text input sequences and the masked LM loss.
//!
//! Shift convention: position `i` predicts the token at `i + 1`. The loss
//! mask lives in target space, so `loss_mask[i]` marks the token at `i` as a
//! prediction target (scored from the logits at `i - 1`).

use candle_core::{Tensor, D};

use crate::adapter::MusicEmbedding;
use crate::config::PromptConfig;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenSequence};
use crate::nn;

pub const DEFAULT_ANSWER_PREFIX: &str = "###Assistant:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub pre_music: String,
    pub post_music: String,
    pub answer_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pre_music: String::new(),
            post_music: String::new(),
            answer_prefix: DEFAULT_ANSWER_PREFIX.to_string(),
        }
    }
}

impl From<&PromptConfig> for PromptTemplate {
    fn from(c: &PromptConfig) -> Self {
        Self {
            pre_music: c.pre_music.clone(),
            post_music: c.post_music.clone(),
            answer_prefix: c.answer_prefix.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Template text placed before the music tokens.
    Preamble,
    Music,
    Prompt,
    /// Caption (pre-training) or answer (instruction tuning).
    Answer,
}

#[derive(Debug, Clone)]
pub struct MixedSequence {
    /// `[S × D_t]`
    pub embeddings: Tensor,
    pub segment_tags: Vec<Segment>,
    pub loss_mask: Vec<bool>,
    /// Token id at each position; pad id on music positions.
    pub target_ids: Vec<u32>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.segment_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_tags.is_empty()
    }
}

struct Builder<'a> {
    lm: &'a dyn LanguageModel,
    parts: Vec<Tensor>,
    tags: Vec<Segment>,
    mask: Vec<bool>,
    ids: Vec<u32>,
}

impl<'a> Builder<'a> {
    fn new(lm: &'a dyn LanguageModel) -> Self {
        Self {
            lm,
            parts: Vec::new(),
            tags: Vec::new(),
            mask: Vec::new(),
            ids: Vec::new(),
        }
    }

    fn text(&mut self, ids: &[u32], tag: Segment, target: bool) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        self.parts.push(self.lm.embed_tokens(ids)?);
        self.tags.extend(std::iter::repeat_n(tag, ids.len()));
        self.mask.extend(std::iter::repeat_n(target, ids.len()));
        self.ids.extend_from_slice(ids);
        Ok(())
    }

    fn music(&mut self, music: &MusicEmbedding) -> Result<()> {
        if music.dim() != self.lm.dim() {
            return Err(Error::Shape(format!(
                "music embedding dim {} but language model dim {}",
                music.dim(),
                self.lm.dim()
            )));
        }
        let n = music.len();
        self.parts.push(music.values.clone());
        self.tags.extend(std::iter::repeat_n(Segment::Music, n));
        self.mask.extend(std::iter::repeat_n(false, n));
        self.ids.extend(std::iter::repeat_n(self.lm.pad_id(), n));
        Ok(())
    }

    fn finish(self) -> Result<MixedSequence> {
        Ok(MixedSequence {
            embeddings: Tensor::cat(&self.parts, 0)?,
            segment_tags: self.tags,
            loss_mask: self.mask,
            target_ids: self.ids,
        })
    }
}

/// `[pre | music | post | caption]`, loss on caption positions only.
pub fn build_pretrain(
    music: &MusicEmbedding,
    caption: &TokenSequence,
    tmpl: &PromptTemplate,
    lm: &dyn LanguageModel,
) -> Result<MixedSequence> {
    if caption.is_empty() {
        return Err(Error::Empty("caption"));
    }
    let mut b = build_pretrain_prefix_inner(music, tmpl, lm)?;
    b.text(&caption.ids, Segment::Answer, true)?;
    b.finish()
}

fn build_pretrain_prefix_inner<'a>(
    music: &MusicEmbedding,
    tmpl: &PromptTemplate,
    lm: &'a dyn LanguageModel,
) -> Result<Builder<'a>> {
    let mut b = Builder::new(lm);
    b.text(&lm.tokenize(&tmpl.pre_music).ids, Segment::Preamble, false)?;
    b.music(music)?;
    b.text(&lm.tokenize(&tmpl.post_music).ids, Segment::Prompt, false)?;
    Ok(b)
}

/// Generation prefix for captioning in the pre-training layout.
pub fn build_pretrain_prefix(
    music: &MusicEmbedding,
    tmpl: &PromptTemplate,
    lm: &dyn LanguageModel,
) -> Result<MixedSequence> {
    build_pretrain_prefix_inner(music, tmpl, lm)?.finish()
}

fn build_instruct_prefix_inner<'a>(
    music: &MusicEmbedding,
    question: &TokenSequence,
    tmpl: &PromptTemplate,
    lm: &'a dyn LanguageModel,
) -> Result<Builder<'a>> {
    if question.is_empty() {
        return Err(Error::Empty("question"));
    }
    if tmpl.answer_prefix.is_empty() {
        return Err(Error::InvalidArgument("answer prefix must be non-empty for instruction tuning".into()));
    }
    let mut b = build_pretrain_prefix_inner(music, tmpl, lm)?;
    b.text(&question.ids, Segment::Prompt, false)?;
    b.text(&lm.tokenize(&tmpl.answer_prefix).ids, Segment::Prompt, false)?;
    Ok(b)
}

/// `[pre | music | post | question | answer_prefix | answer]`, loss on
/// answer positions only; the prefix is conditioning context.
pub fn build_instruct(
    music: &MusicEmbedding,
    question: &TokenSequence,
    answer: &TokenSequence,
    tmpl: &PromptTemplate,
    lm: &dyn LanguageModel,
) -> Result<MixedSequence> {
    if answer.is_empty() {
        return Err(Error::Empty("answer"));
    }
    let mut b = build_instruct_prefix_inner(music, question, tmpl, lm)?;
    b.text(&answer.ids, Segment::Answer, true)?;
    b.finish()
}

/// Generation prefix for a question: everything up to and including the
/// answer prefix.
pub fn build_instruct_prefix(
    music: &MusicEmbedding,
    question: &TokenSequence,
    tmpl: &PromptTemplate,
    lm: &dyn LanguageModel,
) -> Result<MixedSequence> {
    build_instruct_prefix_inner(music, question, tmpl, lm)?.finish()
}

/// Tokenized training target: the text followed by end-of-sequence, so the
/// model learns where to stop.
pub fn target_tokens(lm: &dyn LanguageModel, text: &str) -> TokenSequence {
    let mut t = lm.tokenize(text);
    t.ids.push(lm.eos_id());
    t
}

/// Right-padded batch of sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B × S_max × D_t]`
    pub embeddings: Tensor,
    pub target_ids: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
}

/// Pads on the right with the pad-token embedding. Padded positions are
/// mask-false; under causal attention no real position can see them.
pub fn collate(seqs: &[MixedSequence], lm: &dyn LanguageModel) -> Result<Batch> {
    if seqs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let max = seqs.iter().map(MixedSequence::len).max().unwrap_or(0);
    let pad = lm.pad_id();
    let mut rows = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len());
    let mut masks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let missing = max - s.len();
        let emb = if missing > 0 {
            let pads = lm.embed_tokens(&vec![pad; missing])?;
            Tensor::cat(&[&s.embeddings, &pads], 0)?
        } else {
            s.embeddings.clone()
        };
        rows.push(emb);
        let mut t = s.target_ids.clone();
        t.resize(max, pad);
        targets.push(t);
        let mut m = s.loss_mask.clone();
        m.resize(max, false);
        masks.push(m);
    }
    Ok(Batch {
        embeddings: Tensor::stack(&rows, 0)?,
        target_ids: targets,
        loss_mask: masks,
    })
}

/// Mean next-token cross-entropy over mask-true positions of one sequence.
/// `logits`: `[S × V]`.
pub fn masked_lm_loss(logits: &Tensor, target_ids: &[u32], mask: &[bool]) -> Result<Tensor> {
    let logits = logits.unsqueeze(0)?;
    batch_masked_lm_loss(&logits, &[target_ids.to_vec()], &[mask.to_vec()])
}

/// Token-level mean over every mask-true position of the batch.
/// `logits`: `[B × S × V]`.
pub fn batch_masked_lm_loss(logits: &Tensor, target_ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Tensor> {
    let (b, s, v) = logits.dims3()?;
    if target_ids.len() != b || mask.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} targets", target_ids.len())));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, (ids, m)) in target_ids.iter().zip(mask).enumerate() {
        if ids.len() != s || m.len() != s {
            return Err(Error::Shape(format!(
                "sequence length {s} but {} targets / {} mask entries",
                ids.len(),
                m.len()
            )));
        }
        for i in 1..s {
            if m[i] {
                if ids[i] as usize >= v {
                    return Err(Error::InvalidArgument(format!("target id {} >= vocab {v}", ids[i])));
                }
                rows.push((bi * s + i - 1) as u32);
                targets.push(ids[i]);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("loss mask selects no positions".into()));
    }
    let n = rows.len();
    let flat = logits.reshape((b * s, v))?;
    let picked = flat.index_select(&Tensor::new(rows.as_slice(), &nn::device())?, 0)?;
    let logp = nn::log_softmax_last(&picked)?;
    let idx = Tensor::new(targets.as_slice(), &nn::device())?.reshape((n, 1))?;
    let nll = logp.gather(&idx, D::Minus1)?.neg()?;
    Ok(nll.mean_all()?)
}
