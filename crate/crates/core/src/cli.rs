//! Command-line front end: `train`, `evaluate`, `generate`, `inspect` and `serve`.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bridging::{PredictionDump, SelectionMode};
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{
    build_vocabulary, encode_all, encode_sample, load_dataset, verify_ood, DatasetSplit,
    DialogueSample, KeywordInventory, SplitName,
};
use crate::error::{Error, Result};
use crate::generator::{generate, trace_lines, DecodeSettings, GenerationContext, TraceLine};
use crate::metrics::{evaluate_split, target_achieved, DEFAULT_STOPWORDS};
use crate::model::DialogueModel;
use crate::scenario::BiasEntry;
use crate::serve::{serve, AppState};
use crate::trainer::{fit, FitData, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "tgdial",
    version,
    about = "Target-guided proactive dialogue: train, evaluate, inspect and serve"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints under the output directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Generate responses for samples of a split as JSON lines.
    Generate(GenerateArgs),
    /// Dump bias, keyword predictions, selection and a decoding trace for one sample.
    Inspect(InspectArgs),
    /// Run the REST session API.
    Serve(ServeArgs),
}

/// Overrides shared by every subcommand that builds a [`RunConfig`].
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `dataset_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SelectionMode>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Scale of the scenario bias.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub no_csm: bool,
    #[arg(long)]
    pub no_ikb: bool,
    /// Drop the knowledge term from the scenario bias.
    #[arg(long)]
    pub drop_k: bool,
    /// Drop the profile term from the scenario bias.
    #[arg(long)]
    pub drop_u: bool,
}

fn parse_mode(s: &str) -> std::result::Result<SelectionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test_id")]
    pub split: SplitName,
    /// Directory for the JSON report, table and per-sample outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    /// Only this sample; every sample when omitted.
    #[arg(long)]
    pub index: Option<usize>,
    /// JSONL output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: SplitName,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Number of scenario-bias tokens to list.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// JSON output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Seconds of inactivity before a session is dropped.
    #[arg(long, default_value_t = 1800)]
    pub idle_secs: u64,
}

impl RunArgs {
    /// Config file (or defaults) with command-line overrides applied. When no
    /// file is given, `base` supplies the starting point.
    pub fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => base.unwrap_or_default(),
        };
        if let Some(d) = &self.data {
            cfg.dataset_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if self.no_csm {
            cfg.ablation.use_csm = false;
        }
        if self.no_ikb {
            cfg.ablation.use_ikb = false;
        }
        cfg.ablation.drop_k |= self.drop_k;
        cfg.ablation.drop_u |= self.drop_u;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Starting config for commands that read a checkpoint: the model and the
/// loss settings it was trained with.
fn checkpoint_base(ckpt: &Checkpoint) -> RunConfig {
    RunConfig {
        m: ckpt.meta.loss.m,
        lambda: ckpt.meta.loss.lambda,
        ablation: ckpt.meta.loss.ablation,
        max_decode_len: RunConfig::default()
            .max_decode_len
            .min(ckpt.meta.model.max_tgt_len),
        model: ckpt.meta.model.clone(),
        optimizer: ckpt.meta.optimizer.clone(),
        ..RunConfig::default()
    }
}

fn decode_settings(cfg: &RunConfig, model: &DialogueModel) -> DecodeSettings {
    let mut s = cfg.decode_settings();
    s.max_len = s.max_len.min(model.config.max_tgt_len);
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn load_split_for(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<DatasetSplit> {
    let (split, _) = load_dataset(&cfg.dataset_dir, Some(&ckpt.inventory))?;
    Ok(split)
}

fn pick(split: &DatasetSplit, name: SplitName, index: usize) -> Result<&DialogueSample> {
    let samples = split.get(name);
    samples.get(index).ok_or_else(|| {
        Error::Validation(format!(
            "index {index} is out of range for {name} ({} samples)",
            samples.len()
        ))
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resumed = args
        .checkpoint
        .as_deref()
        .map(load_checkpoint)
        .transpose()?;
    let mut cfg = args.run.resolve(resumed.as_ref().map(checkpoint_base))?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let (mut trainer, vocab, inventory, split) = match resumed {
        Some(ckpt) => {
            let split = load_split_for(&ckpt, &cfg)?;
            let (mut trainer, vocab, inventory) = Trainer::resume(ckpt)?;
            trainer.opt.epochs = cfg.optimizer.epochs;
            (trainer, vocab, inventory, split)
        }
        None => {
            let (split, inventory) = load_dataset(&cfg.dataset_dir, None)?;
            let vocab = build_vocabulary(&split.train, &inventory, cfg.vocab_min_count);
            let (mut model_cfg, opt) = cfg.seeded();
            model_cfg.vocab_size = vocab.len();
            let model = DialogueModel::new(&model_cfg, inventory.n_types(), inventory.n_topics())?;
            let trainer = Trainer::new(model, opt, cfg.loss_options())?;
            (trainer, vocab, inventory, split)
        }
    };
    let limits = trainer.model.config.limits();
    let m = trainer.loss.m;
    let train = encode_all(&split.train, &vocab, &inventory, m, limits)?;
    let dev = encode_all(&split.dev, &vocab, &inventory, m, limits)?;
    write_text(
        &cfg.output_dir.join("run_config.toml"),
        &cfg.to_toml_string(),
    )?;
    println!(
        "training {} ({}) on {} samples, vocab {}, {} types, {} topics",
        cfg.output_dir.display(),
        trainer.loss.ablation.label(),
        train.len(),
        vocab.len(),
        inventory.n_types(),
        inventory.n_topics()
    );
    let data = FitData {
        train: &train,
        dev: &dev,
        dev_samples: &split.dev,
        vocab: &vocab,
        inventory: &inventory,
    };
    let settings = decode_settings(&cfg, &trainer.model);
    let total = trainer.opt.epochs;
    let outcome = fit(
        &mut trainer,
        &data,
        &cfg.output_dir,
        Some(settings),
        |e, improved| {
            let dev = e
                .dev_loss
                .map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
            println!(
                "epoch {:>3}/{total} step {:>6} train {:.4} dev {dev}{}",
                e.epoch,
                e.step,
                e.train_loss,
                if improved { " *" } else { "" }
            );
        },
    )?;
    if let Some(report) = &outcome.dev_report {
        print!("{}", report.table());
    }
    println!("best checkpoint: {}", outcome.best.display());
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = args.run.resolve(Some(checkpoint_base(&ckpt)))?;
    let split = load_split_for(&ckpt, &cfg)?;
    if args.split == SplitName::TestOod {
        let report = verify_ood(&split, &ckpt.inventory);
        if !report.disjoint {
            return Err(Error::Validation(format!(
                "test_ood shares target topics with train: {}",
                report.offenders.join(", ")
            )));
        }
    }
    let settings = decode_settings(&cfg, &ckpt.model);
    let (report, outputs) = evaluate_split(
        &ckpt.model,
        &ckpt.vocab,
        &ckpt.inventory,
        split.get(args.split),
        args.split.as_str(),
        settings,
        DEFAULT_STOPWORDS,
    )?;
    print!("{}", report.table());
    if let Some(dir) = &args.out {
        let stem = format!("{}_{}", args.split, settings.mode);
        write_text(
            &dir.join(format!("{stem}.json")),
            &serde_json::to_string_pretty(&report)?,
        )?;
        write_text(&dir.join(format!("{stem}.txt")), &report.table())?;
        let mut lines = String::new();
        for o in &outputs {
            lines.push_str(&serde_json::to_string(o)?);
            lines.push('\n');
        }
        write_text(&dir.join(format!("{stem}_samples.jsonl")), &lines)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GeneratedLine<'a> {
    index: usize,
    target: String,
    generated: String,
    reference: &'a str,
    achieved: bool,
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = args.run.resolve(Some(checkpoint_base(&ckpt)))?;
    let split = load_split_for(&ckpt, &cfg)?;
    let settings = decode_settings(&cfg, &ckpt.model);
    let samples = split.get(args.split);
    let indices: Vec<usize> = match args.index {
        Some(i) => {
            pick(&split, args.split, i)?;
            vec![i]
        }
        None => (0..samples.len()).collect(),
    };
    let mut text = String::new();
    for i in indices {
        let s = &samples[i];
        let wrap = |e: Error| Error::Sample {
            index: i,
            source: Box::new(e),
        };
        let ex = encode_sample(
            s,
            &ckpt.vocab,
            &ckpt.inventory,
            settings.m,
            ckpt.model.config.limits(),
        )
        .map_err(wrap)?;
        let ctx = GenerationContext::prepare(&ckpt.model, &ex, settings).map_err(wrap)?;
        let out = generate(&ckpt.model, &ctx, &ckpt.vocab).map_err(wrap)?;
        let topic = ckpt.inventory.topic_name(s.target.topic_id);
        let line = GeneratedLine {
            index: i,
            target: format!("{} | {topic}", ckpt.inventory.type_name(s.target.type_id)),
            achieved: target_achieved(&out.text, topic),
            generated: out.text,
            reference: &s.reference,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    match &args.out {
        Some(path) => write_text(path, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

#[derive(Debug, Serialize)]
pub struct BiasSection {
    pub uniform: bool,
    pub top: Vec<BiasEntry>,
}

#[derive(Debug, Serialize)]
pub struct SelectionSection {
    pub mode: SelectionMode,
    #[serde(rename = "type")]
    pub types: Vec<String>,
    #[serde(rename = "topic")]
    pub topics: Vec<String>,
    pub fallback: [bool; 2],
}

/// Output of `inspect`.
#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub split: SplitName,
    pub index: usize,
    pub variant: String,
    pub target: String,
    pub bias: BiasSection,
    pub keywords: Option<PredictionDump>,
    pub selection: Option<SelectionSection>,
    pub generated: String,
    pub reference: String,
    pub trace: Vec<TraceLine>,
}

pub fn inspect_sample(
    ckpt: &Checkpoint,
    split: SplitName,
    index: usize,
    sample: &DialogueSample,
    settings: DecodeSettings,
    k: usize,
) -> Result<(InspectReport, GenerationContext)> {
    let inv: &KeywordInventory = &ckpt.inventory;
    let ex = encode_sample(
        sample,
        &ckpt.vocab,
        inv,
        settings.m,
        ckpt.model.config.limits(),
    )?;
    let ctx = GenerationContext::prepare(&ckpt.model, &ex, settings)?;
    let out = generate(&ckpt.model, &ctx, &ckpt.vocab)?;
    let selection = ctx.selection.as_ref().map(|s| SelectionSection {
        mode: s.mode,
        types: s
            .type_ids()
            .into_iter()
            .map(|i| inv.type_name(i).to_string())
            .collect(),
        topics: s
            .topic_ids()
            .into_iter()
            .map(|i| inv.topic_name(i).to_string())
            .collect(),
        fallback: s.fallback,
    });
    let keywords = match (&ctx.distribution, &ctx.selection) {
        (Some(d), Some(s)) => Some(PredictionDump::new(d, s, inv)),
        _ => None,
    };
    let report = InspectReport {
        split,
        index,
        variant: settings.ablation.label(),
        target: format!(
            "{} | {}",
            inv.type_name(sample.target.type_id),
            inv.topic_name(sample.target.topic_id)
        ),
        bias: BiasSection {
            uniform: !settings.ablation.use_csm,
            top: ctx.bias.top_k(&ckpt.vocab, k),
        },
        keywords,
        selection,
        trace: trace_lines(&out, &ctx, &ckpt.vocab),
        generated: out.text,
        reference: sample.reference.clone(),
    };
    Ok((report, ctx))
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = args.run.resolve(Some(checkpoint_base(&ckpt)))?;
    let split = load_split_for(&ckpt, &cfg)?;
    let sample = pick(&split, args.split, args.index)?;
    let settings = decode_settings(&cfg, &ckpt.model);
    let (report, _) = inspect_sample(&ckpt, args.split, args.index, sample, settings, args.k)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => write_text(path, &text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = args.run.resolve(Some(checkpoint_base(&ckpt)))?;
    let settings = decode_settings(&cfg, &ckpt.model);
    let state = AppState::new(
        ckpt.model,
        ckpt.vocab,
        ckpt.inventory,
        settings,
        Duration::from_secs(args.idle_secs),
    )?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("starting the async runtime", e))?;
    eprintln!(
        "serving {} on http://{}",
        args.checkpoint.display(),
        args.bind
    );
    runtime.block_on(serve(Arc::new(state), args.bind))
}

/// Entry point for the binary: parses arguments, runs, and maps errors to a
/// non-zero exit status.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
