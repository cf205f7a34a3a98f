//! Two-stage adapter training: caption pre-training, then instruction
//! tuning on question/answer pairs. Only the layer logits and the adapter
//! receive updates; encoder features are computed once up front.

pub mod checkpoint;
pub mod optim;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{CaptionRecord, MusicClip, QAPair};
use crate::encoder::LayeredFeatures;
use crate::error::{Error, Result};
use crate::model::MusiLingo;
use crate::sequence::{batch_masked_lm_loss, build_instruct, build_pretrain, collate, target_tokens};

pub use checkpoint::{optim_path, Checkpoint, OptimState};
use optim::{clipped_grads, AdamW, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// One training pair with its clip already encoded. `question` is `None`
/// for captions.
#[derive(Debug, Clone)]
pub struct Example {
    pub feats: LayeredFeatures,
    pub question: Option<String>,
    pub target: String,
}

/// Encodes each referenced clip once and pairs it with its text.
fn encode_all<'a>(
    model: &MusiLingo,
    clips: &[MusicClip],
    items: impl Iterator<Item = (&'a str, Option<String>, String)>,
) -> Result<Vec<Example>> {
    let by_id: HashMap<&str, &MusicClip> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut cache: HashMap<String, LayeredFeatures> = HashMap::new();
    let mut out = Vec::new();
    for (clip_id, question, target) in items {
        let feats = match cache.get(clip_id) {
            Some(f) => f.clone(),
            None => {
                let clip = by_id
                    .get(clip_id)
                    .ok_or_else(|| Error::InvalidRecord(format!("no clip with id `{clip_id}`")))?;
                let f = model.encode(clip)?;
                cache.insert(clip_id.to_string(), f.clone());
                f
            }
        };
        out.push(Example { feats, question, target });
    }
    Ok(out)
}

pub fn caption_examples(model: &MusiLingo, clips: &[MusicClip], captions: &[CaptionRecord]) -> Result<Vec<Example>> {
    encode_all(
        model,
        clips,
        captions.iter().map(|c| (c.clip_id.as_str(), None, c.caption.clone())),
    )
}

pub fn qa_examples(model: &MusiLingo, clips: &[MusicClip], pairs: &[QAPair]) -> Result<Vec<Example>> {
    encode_all(
        model,
        clips,
        pairs
            .iter()
            .map(|p| (p.clip_id.as_str(), Some(p.question.clone()), p.answer.clone())),
    )
}

/// Optimizer state and position within a stage.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed updates.
    pub step: u64,
    pub optimizer: AdamW,
    pub ema: Option<f64>,
}

impl TrainState {
    pub fn new(model: &MusiLingo, stage: Stage, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            stage,
            step: 0,
            optimizer: AdamW::new(&cfg.trainer, &model.trainable_vars())?,
            ema: None,
        })
    }

    fn to_optim(&self) -> OptimState {
        OptimState {
            stage: self.stage,
            step: self.step,
            ema: self.ema,
            moments: self.optimizer.moments.clone(),
        }
    }
}

/// Number of updates in a stage: the fixed budget if set, otherwise
/// `epochs · ⌈N / B⌉`.
pub fn total_steps(n: usize, cfg: &RunConfig) -> u64 {
    if cfg.trainer.steps > 0 {
        return cfg.trainer.steps;
    }
    cfg.trainer.epochs * n.div_ceil(cfg.trainer.batch_size) as u64
}

/// Example indices for update `step`: each epoch walks a fresh permutation
/// seeded by `(seed, epoch)`; the last batch of an epoch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) as usize * batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order[offset..(offset + batch_size).min(n)].to_vec()
}

/// Masked LM loss of a batch under the current parameters.
pub fn batch_loss(model: &MusiLingo, batch: &[&Example]) -> Result<candle_core::Tensor> {
    let lm = model.lm.as_ref();
    let seqs = batch
        .iter()
        .map(|ex| {
            let music = model.embed_music(&ex.feats)?;
            let target = target_tokens(lm, &ex.target);
            match &ex.question {
                None => build_pretrain(&music, &target, &model.template, lm),
                Some(q) => build_instruct(&music, &lm.tokenize(q), &target, &model.template, lm),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let b = collate(&seqs, lm)?;
    let logits = lm.forward_logits(&b.embeddings)?;
    batch_masked_lm_loss(&logits, &b.target_ids, &b.loss_mask)
}

/// One optimizer update on `batch`. Returns the pre-update loss.
pub fn train_step(model: &MusiLingo, state: &mut TrainState, batch: &[&Example], lr: f64, cfg: &RunConfig) -> Result<f64> {
    let loss = batch_loss(model, batch)?;
    let value = loss.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: value,
            step: state.step,
            stage: state.stage.to_string(),
        });
    }
    let vars = model.trainable_vars();
    let grads = loss.backward()?;
    let (grads, _) = clipped_grads(&grads, &vars, cfg.trainer.grad_clip)?;
    state.optimizer.step(&vars, &grads, lr, state.step + 1)?;
    state.step += 1;
    let a = cfg.trainer.ema;
    state.ema = Some(state.ema.map_or(value, |e| a * e + (1.0 - a) * value));
    Ok(value)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub ema: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Where a stage writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    /// Final checkpoint path; intermediate ones get a `.step<N>` suffix.
    pub checkpoint: Option<PathBuf>,
    /// Line-delimited training log.
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

fn intermediate_path(path: &Path, step: u64) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

fn save_state(model: &MusiLingo, state: &TrainState, digest: &str, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::capture(model, digest, state.step)?;
    ck.save(path)?;
    state.to_optim().save(&optim_path(path))?;
    Ok(ck)
}

/// Runs a stage to completion from `state`, which may be a resumed state.
/// The data order depends only on the trainer seed and the step index, so a
/// resumed run replays the uninterrupted one exactly.
pub fn run_stage(
    model: &MusiLingo,
    examples: &[Example],
    mut state: TrainState,
    cfg: &RunConfig,
    out: &StageOutput,
) -> Result<StageResult> {
    if examples.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let total = total_steps(examples.len(), cfg);
    let schedule = Schedule::new(cfg.trainer.lr, cfg.trainer.warmup_frac, total);
    let digest = cfg.model_digest();
    let mut log = match &out.log {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    while state.step < total {
        let idx = batch_indices(examples.len(), cfg.trainer.batch_size, cfg.trainer.seed, state.step);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let lr = schedule.lr(state.step);
        let loss = train_step(model, &mut state, &batch, lr, cfg)?;
        losses.push(loss);
        if let Some((p, w)) = log.as_mut() {
            let rec = LogRecord {
                step: state.step,
                stage: state.stage,
                loss,
                ema: state.ema.unwrap_or(loss),
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        let every = cfg.trainer.checkpoint_every;
        if let Some(path) = &out.checkpoint {
            if every > 0 && state.step.is_multiple_of(every) && state.step < total {
                save_state(model, &state, &digest, &intermediate_path(path, state.step))?;
            }
        }
    }
    if let Some((p, w)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let checkpoint = match &out.checkpoint {
        Some(path) => save_state(model, &state, &digest, path)?,
        None => Checkpoint::capture(model, &digest, state.step)?,
    };
    Ok(StageResult {
        steps: state.step,
        losses,
        checkpoint,
    })
}

/// Restores parameters and optimizer state written by an interrupted run of
/// the same stage.
pub fn resume(model: &mut MusiLingo, path: &Path, stage: Stage, cfg: &RunConfig, force: bool) -> Result<TrainState> {
    let ck = Checkpoint::load(path)?;
    ck.check_digest(&cfg.model_digest(), force)?;
    ck.apply(model)?;
    let mut state = TrainState::new(model, stage, cfg)?;
    let opt = OptimState::load(&optim_path(path), &state.optimizer)?;
    if opt.stage != stage || opt.step != ck.step {
        return Err(Error::Checkpoint(format!(
            "optimizer state is for {} step {}, checkpoint for {stage} step {}",
            opt.stage, opt.step, ck.step
        )));
    }
    state.optimizer.moments = opt.moments;
    state.step = opt.step;
    state.ema = opt.ema;
    Ok(state)
}

/// Caption pre-training from the model's current parameters.
pub fn pretrain(
    model: &MusiLingo,
    clips: &[MusicClip],
    captions: &[CaptionRecord],
    cfg: &RunConfig,
    state: Option<TrainState>,
    out: &StageOutput,
) -> Result<StageResult> {
    if captions.is_empty() {
        return Err(Error::Empty("caption dataset"));
    }
    let examples = caption_examples(model, clips, captions)?;
    let state = match state {
        Some(s) => s,
        None => TrainState::new(model, Stage::Pretrain, cfg)?,
    };
    run_stage(model, &examples, state, cfg, out)
}

/// Instruction tuning. Starts from `init` (typically a pre-training
/// checkpoint) with a fresh optimizer, unless `state` resumes an earlier
/// fine-tuning run.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut MusiLingo,
    clips: &[MusicClip],
    pairs: &[QAPair],
    init: Option<&Checkpoint>,
    cfg: &RunConfig,
    force: bool,
    state: Option<TrainState>,
    out: &StageOutput,
) -> Result<StageResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("question/answer dataset"));
    }
    let state = match state {
        Some(s) => s,
        None => {
            if let Some(ck) = init {
                ck.check_digest(&cfg.model_digest(), force)?;
                ck.apply(model)?;
            }
            TrainState::new(model, Stage::Finetune, cfg)?
        }
    };
    let examples = qa_examples(model, clips, pairs)?;
    run_stage(model, &examples, state, cfg, out)
}
