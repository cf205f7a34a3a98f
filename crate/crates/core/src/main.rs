use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use musilingo::config::RunConfig;
use musilingo::data::{self, MusicClip, Partition, QAPair, Split};
use musilingo::datagen::{
    self, ChatClient, HttpChatClient, PipelineOptions, PromptVersion, RetryPolicy, SyntheticClient,
};
use musilingo::lm::Decode;
use musilingo::metrics::{evaluate_corpus, HashEmbedder};
use musilingo::model::{MusiLingo, Prompt, CAPTION_QUESTION};
use musilingo::train::{self, Checkpoint, Stage, StageOutput};
use musilingo::Error;

/// Music question answering and captioning with a frozen encoder, a frozen
/// language model and a trained linear adapter.
#[derive(Debug, Parser)]
#[command(name = "musilingo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Caption pre-training of the adapter.
    Pretrain(PretrainArgs),
    /// Instruction tuning on question/answer pairs.
    Finetune(FinetuneArgs),
    /// Generate question/answer pairs from captions with a chat model.
    Datagen(DatagenArgs),
    /// Draw a blank audit sheet from a generated dataset.
    AuditSample(AuditSampleArgs),
    /// Percentages from a filled-in audit sheet.
    AuditSummarize(AuditSummarizeArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Answer a question about a clip, or every pair of a dataset.
    Infer(InferArgs),
    /// Caption a clip (a question with the fixed captioning prompt).
    Caption(CaptionArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Config file with dotted `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set trainer.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets `trainer.seed` and `decode.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the config snapshot, logs and default outputs.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("trainer.seed", &seed.to_string())?;
            cfg.set("decode.seed", &seed.to_string())?;
        }
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        if let Some(dir) = &self.run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let snap = dir.join("config.toml");
            std::fs::write(&snap, cfg.to_kv_string()).map_err(|e| Error::io(&snap, e))?;
        }
        Ok(cfg)
    }

    fn in_run_dir(&self, name: &str) -> Option<PathBuf> {
        self.run_dir.as_ref().map(|d| d.join(name))
    }

    fn output(&self, explicit: &Option<PathBuf>, default_name: &str) -> anyhow::Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.in_run_dir(default_name))
            .ok_or_else(|| Error::InvalidArgument("either --out or --run-dir is required".into()).into())
    }
}

fn required(path: Option<PathBuf>, flag: &str, key: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| Error::InvalidArgument(format!("missing {flag} (or config key `{key}`)")).into())
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Clip file; defaults to `data.clips`.
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Caption file; defaults to `data.captions`.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Final checkpoint path; defaults to `<run-dir>/pretrain.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint written under a different model config.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartitionArg {
    Short,
    Long,
    Mixed,
    Musicqa,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Starting checkpoint, usually from pre-training.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mixed")]
    partition: PartitionArg,
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Question/answer file; defaults to `data.qa`, or `data.musicqa` for
    /// the musicqa partition.
    #[arg(long)]
    qa: Option<PathBuf>,
    /// Final checkpoint path; defaults to `<run-dir>/finetune.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VersionArg {
    V1,
    V2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClientArg {
    /// Offline deterministic responder.
    Mock,
    /// OpenAI-compatible endpoint from the `datagen.*` config keys.
    Http,
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long, value_enum)]
    version: VersionArg,
    #[arg(long, value_enum, default_value = "mock")]
    client: ClientArg,
    /// Output dataset; the run report goes to `<out>.report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AuditSampleArgs {
    #[arg(long)]
    qa: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AuditSummarizeArgs {
    /// Filled-in audit sheet.
    #[arg(long)]
    sheet: PathBuf,
    /// Also write the summary as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, split: Option<&str>) -> bool {
        match (self, split) {
            (SplitArg::All, _) | (_, None) => true,
            (SplitArg::Train, Some(s)) => s == "train",
            (SplitArg::Test, Some(s)) => s == "test",
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions, one JSON object per line.
    #[arg(long)]
    pred: PathBuf,
    /// References, one JSON object per line, aligned with the predictions.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Keep only reference records of this split (records without a split
    /// are always kept).
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Report path: JSON here, text table at `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "MusiLingo")]
    label: String,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Maximum generated tokens; defaults to `decode.max_new`.
    #[arg(long)]
    max_new: Option<usize>,
    /// Sampling temperature; 0 is greedy. Defaults to `decode.temperature`.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Single mode: clip to ask about.
    #[arg(long, requires = "question", conflicts_with = "qa")]
    clip_id: Option<String>,
    #[arg(long)]
    question: Option<String>,
    /// Batch mode: answer every pair of this dataset.
    #[arg(long, requires = "out")]
    qa: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Batch output, one `{clip_id, question, prediction}` per line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clips: Option<PathBuf>,
    #[arg(long)]
    clip_id: String,
    /// Continue directly after the music as in caption pre-training,
    /// instead of asking the captioning question.
    #[arg(long)]
    pretrain_layout: bool,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage, 2 data, 3 runtime.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        Some(err) if err.is_data_error() || matches!(err, Error::Io { .. }) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Datagen(a) => datagen_cmd(a),
        Command::AuditSample(a) => audit_sample(a),
        Command::AuditSummarize(a) => audit_summarize(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Caption(a) => caption(a),
    }
}

fn load_clips(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Vec<MusicClip>> {
    let path = required(flag.or_else(|| cfg.data.clips.clone()), "--clips", "data.clips")?;
    Ok(data::load_clips(&path)?)
}

fn report_stage(stage: Stage, r: &train::StageResult, ckpt: &Path) {
    let last = r.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{stage}: {} steps, final loss {last:.6}, checkpoint {}",
        r.steps,
        ckpt.display()
    );
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let clips = load_clips(a.clips, &cfg)?;
    let cap_path = required(a.captions.or_else(|| cfg.data.captions.clone()), "--captions", "data.captions")?;
    let captions = data::pretrain_captions(&data::load_captions(&cap_path)?);
    let out = a.common.output(&a.out, "pretrain.ckpt")?;
    let mut model = MusiLingo::from_config(&cfg)?;
    let state = match &a.resume {
        Some(p) => Some(train::resume(&mut model, p, Stage::Pretrain, &cfg, a.force)?),
        None => None,
    };
    let stage_out = StageOutput {
        checkpoint: Some(out.clone()),
        log: a.common.in_run_dir("pretrain.log.jsonl"),
    };
    let r = train::pretrain(&model, &clips, &captions, &cfg, state, &stage_out)?;
    report_stage(Stage::Pretrain, &r, &out);
    Ok(())
}

fn finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let clips = load_clips(a.clips, &cfg)?;
    let (pairs, key) = match a.partition {
        PartitionArg::Musicqa => (a.qa.or_else(|| cfg.data.musicqa.clone()), "data.musicqa"),
        _ => (a.qa.or_else(|| cfg.data.qa.clone()), "data.qa"),
    };
    let all = data::load_qa(&required(pairs, "--qa", key)?)?;
    let selected = match a.partition {
        PartitionArg::Short => data::partition(&all, Partition::Short),
        PartitionArg::Long => data::partition(&all, Partition::Long),
        PartitionArg::Mixed | PartitionArg::Musicqa => all,
    };
    let pairs = data::select_split(&selected, Split::Train);
    let out = a.common.output(&a.out, "finetune.ckpt")?;
    let mut model = MusiLingo::from_config(&cfg)?;
    let state = match &a.resume {
        Some(p) => Some(train::resume(&mut model, p, Stage::Finetune, &cfg, a.force)?),
        None => None,
    };
    let init = a.init.as_deref().map(Checkpoint::load).transpose()?;
    let stage_out = StageOutput {
        checkpoint: Some(out.clone()),
        log: a.common.in_run_dir("finetune.log.jsonl"),
    };
    let r = train::finetune(&mut model, &clips, &pairs, init.as_ref(), &cfg, a.force, state, &stage_out)?;
    report_stage(Stage::Finetune, &r, &out);
    Ok(())
}

fn datagen_cmd(a: DatagenArgs) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let captions = data::load_captions(&a.captions)?;
    let version = match a.version {
        VersionArg::V1 => PromptVersion::V1,
        VersionArg::V2 => PromptVersion::V2,
    };
    let d = &cfg.datagen;
    let client: Box<dyn ChatClient> = match a.client {
        ClientArg::Mock => Box::new(SyntheticClient),
        ClientArg::Http => Box::new(
            HttpChatClient::new(
                d.endpoint.clone(),
                d.model.clone(),
                d.api_key_env.clone(),
                Duration::from_secs(d.timeout_s),
                Duration::from_millis(d.min_interval_ms),
            )
            .context("building http client")?,
        ),
    };
    let opts = PipelineOptions {
        seed: a.common.seed.unwrap_or(cfg.trainer.seed),
        retry: RetryPolicy {
            max_attempts: d.max_attempts,
            base_delay: Duration::from_millis(d.backoff_ms),
        },
        concurrency: d.concurrency,
    };
    let (pairs, report) = datagen::run_pipeline(&captions, version, client.as_ref(), &opts);
    data::save_dataset(&pairs, &a.out)?;
    let report_json = serde_json::to_string_pretty(&report)?;
    let report_path = PathBuf::from(format!("{}.report.json", a.out.display()));
    std::fs::write(&report_path, &report_json).map_err(|e| Error::io(&report_path, e))?;
    println!("{report_json}");
    if report.generated > 0 && report.kept == 0 {
        bail!("no pairs survived filtering; see {}", report_path.display());
    }
    Ok(())
}

fn audit_sample(a: AuditSampleArgs) -> anyhow::Result<()> {
    let pairs = data::load_qa(&a.qa)?;
    let sheet = datagen::sample_audit(&pairs, a.fraction, a.seed)?;
    data::save_dataset(&sheet.rows, &a.out)?;
    println!("{} rows written to {}", sheet.rows.len(), a.out.display());
    Ok(())
}

fn audit_summarize(a: AuditSummarizeArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.sheet).map_err(|e| Error::io(&a.sheet, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: datagen::AuditRow = serde_json::from_str(line).map_err(|e| Error::Record {
            path: a.sheet.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    let summary = datagen::summarize(&rows);
    if summary.is_empty() {
        return Err(Error::Empty("completed audit rows").into());
    }
    print!("{}", datagen::render_summary(&summary));
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&summary)?;
        std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

/// Text of each line-delimited JSON record, with its `split` if present.
fn read_texts(path: &Path, fields: &[&str]) -> anyhow::Result<Vec<(String, Option<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let text = fields
            .iter()
            .find_map(|f| value.get(*f).and_then(|v| v.as_str()))
            .ok_or_else(|| bad(format!("record has none of the fields {fields:?}")))?;
        let split = value.get("split").and_then(|v| v.as_str()).map(str::to_string);
        out.push((text.to_string(), split));
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let preds = read_texts(&a.pred, &["prediction", "answer", "caption", "text"])?;
    let refs: Vec<_> = read_texts(&a.reference, &["answer", "caption", "reference", "text"])?
        .into_iter()
        .filter(|(_, s)| a.split.keeps(s.as_deref()))
        .collect();
    if preds.len() != refs.len() {
        return Err(Error::InvalidRecord(format!(
            "{} predictions but {} references",
            preds.len(),
            refs.len()
        ))
        .into());
    }
    let pairs: Vec<(String, String)> = preds.into_iter().zip(refs).map(|((p, _), (r, _))| (p, r)).collect();
    let report = evaluate_corpus(&pairs, &HashEmbedder::default())?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.out, json).map_err(|e| Error::io(&a.out, e))?;
    let table = report.table(&a.label);
    let txt = PathBuf::from(format!("{}.txt", a.out.display()));
    std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    print!("{table}");
    Ok(())
}

/// Model with a checkpoint applied, plus the decode settings.
fn load_model(
    common: &Common,
    ckpt: &Path,
    force: bool,
    d: &DecodeArgs,
) -> anyhow::Result<(RunConfig, MusiLingo, Decode, usize)> {
    let cfg = common.load()?;
    let ck = Checkpoint::load(ckpt)?;
    ck.check_digest(&cfg.model_digest(), force)?;
    let mut model = MusiLingo::from_config(&cfg)?;
    ck.apply(&mut model)?;
    let temperature = d.temperature.unwrap_or(cfg.decode.temperature);
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be >= 0")).into());
    }
    let decode = Decode::from_temperature(temperature, cfg.decode.seed);
    let max_new = d.max_new.unwrap_or(cfg.decode.max_new);
    Ok((cfg, model, decode, max_new))
}

fn find_clip<'a>(clips: &'a [MusicClip], id: &str) -> anyhow::Result<&'a MusicClip> {
    clips
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::InvalidRecord(format!("no clip with id `{id}`")).into())
}

#[derive(Serialize)]
struct Prediction<'a> {
    clip_id: &'a str,
    question: &'a str,
    prediction: String,
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let (cfg, model, decode, max_new) = load_model(&a.common, &a.checkpoint, a.force, &a.decode)?;
    let clips = load_clips(a.clips, &cfg)?;
    if let Some(qa_path) = &a.qa {
        let out = a.out.as_ref().expect("clap requires --out with --qa");
        let pairs: Vec<QAPair> = data::load_qa(qa_path)?
            .into_iter()
            .filter(|p| a.split.keeps(Some(if p.split == Split::Test { "test" } else { "train" })))
            .collect();
        let mut cache = std::collections::HashMap::new();
        let mut preds = Vec::with_capacity(pairs.len());
        for p in &pairs {
            if !cache.contains_key(&p.clip_id) {
                cache.insert(p.clip_id.clone(), model.encode(find_clip(&clips, &p.clip_id)?)?);
            }
            let feats = &cache[&p.clip_id];
            preds.push(Prediction {
                clip_id: &p.clip_id,
                question: &p.question,
                prediction: model.generate(feats, Prompt::Question(&p.question), decode, max_new)?,
            });
        }
        data::save_dataset(&preds, out)?;
        println!("{} predictions written to {}", preds.len(), out.display());
        return Ok(());
    }
    let (Some(id), Some(q)) = (&a.clip_id, &a.question) else {
        return Err(Error::InvalidArgument("give --clip-id with --question, or --qa with --out".into()).into());
    };
    let feats = model.encode(find_clip(&clips, id)?)?;
    println!("{}", model.generate(&feats, Prompt::Question(q), decode, max_new)?);
    Ok(())
}

fn caption(a: CaptionArgs) -> anyhow::Result<()> {
    let (cfg, model, decode, max_new) = load_model(&a.common, &a.checkpoint, a.force, &a.decode)?;
    let clips = load_clips(a.clips, &cfg)?;
    let feats = model.encode(find_clip(&clips, &a.clip_id)?)?;
    let prompt = if a.pretrain_layout {
        Prompt::Caption
    } else {
        Prompt::Question(CAPTION_QUESTION)
    };
    println!("{}", model.generate(&feats, prompt, decode, max_new)?);
    Ok(())
}
