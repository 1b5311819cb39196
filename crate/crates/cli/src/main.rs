use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tcanet::data::synth::{generate_corpus, write_teacher_store, SynthConfig};
use tcanet::data::teacher::verify_store;
use tcanet::data::{load_dataset, LoadOptions, Split, TeacherStore};
use tcanet::model::ModelConfig;
use tcanet::trainer::{
    evaluate_split, finetune, infer, load_model, open_dataset, pretrain_lgcsiam, pretrain_wvc, JsonLines, Stage,
    TrainConfig, TrainReport,
};
use tcanet::Model32;

/// Small-footprint keyword spotting: pretraining, fine-tuning, evaluation
/// and inference for TCANet.
#[derive(Parser)]
#[command(name = "tcanet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distil teacher embeddings into the encoder.
    PretrainWvc(TrainArgs),
    /// Contrastive (and optionally distillation) pretraining on unlabelled audio.
    PretrainLgcsiam(TrainArgs),
    /// Supervised fine-tuning; reports test accuracy of the best checkpoint.
    Finetune(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Classify WAV files (16 kHz mono) with a checkpoint.
    Infer {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Write the dataset manifest (one JSON object per utterance).
    ExportManifest {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the layer table and parameter counts.
    Describe {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Generate a synthetic Speech-Commands-style corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        speakers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a stand-in teacher store for a corpus (for pipeline testing).
    SynthTeacher {
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check every record of a teacher store.
    Verify { store: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// A JSON run configuration plus the common overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON training configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    teacher_store: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Directory for checkpoints, metrics and the final report.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue an interrupted run from its `last.kwsc` (pass the same --run-dir).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_json_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(f) = self.label_fraction {
            cfg.label_fraction = f;
        }
        if let Some(p) = &self.data_root {
            cfg.data_root = Some(p.clone());
        }
        if let Some(p) = &self.teacher_store {
            cfg.teacher_store = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        Ok(cfg)
    }

    fn model(&self) -> Result<(TrainConfig, Model32)> {
        let cfg = self.load()?;
        let path = cfg.checkpoint.clone().context("--checkpoint is required")?;
        let model = load_model(&path, &cfg.model).with_context(|| format!("loading {}", path.display()))?;
        Ok((cfg, model))
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{value}")?;
    Ok(())
}

fn train(stage: Stage, args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    cfg.stage = stage;
    if let Some(dir) = &args.run_dir {
        cfg.run_dir = Some(dir.clone());
    }
    if let Some(path) = &args.resume {
        cfg.resume = Some(path.clone());
    }
    if let Some(n) = args.max_epochs {
        cfg.max_epochs = Some(n);
    }
    let mut sink = JsonLines::new(vec![Box::new(io::stdout())]);
    let report: TrainReport = match stage {
        Stage::Wvc => pretrain_wvc(&cfg, &mut sink)?,
        Stage::Lgcsiam => pretrain_lgcsiam(&cfg, &mut sink)?,
        Stage::Finetune => finetune(&cfg, &mut sink)?,
    };
    print_json(&json!({
        "event": "report",
        "best_epoch": report.best_epoch,
        "best_val_metric": report.best_val_metric,
        "test_accuracy": report.test_accuracy,
        "best_checkpoint": report.best_checkpoint,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainWvc(args) => train(Stage::Wvc, &args),
        Command::PretrainLgcsiam(args) => train(Stage::Lgcsiam, &args),
        Command::Finetune(args) => train(Stage::Finetune, &args),
        Command::Evaluate { common, split } => {
            let (cfg, mut model) = common.model()?;
            let ds = open_dataset(&cfg)?;
            let result = evaluate_split(&mut model, &ds, split.into(), cfg.eval_batch_size)?;
            print_json(&json!({ "event": "evaluate", "split": Split::from(split), "result": result }))
        }
        Command::Infer { common, wavs } => {
            let (_, mut model) = common.model()?;
            for wav in wavs {
                let p = infer(&mut model, &wav).with_context(|| format!("classifying {}", wav.display()))?;
                print_json(&json!({ "event": "prediction", "file": wav, "prediction": p }))?;
            }
            Ok(())
        }
        Command::ExportManifest { common, out } => {
            let cfg = common.load()?;
            let root = cfg.data_root.clone().context("--data-root is required")?;
            let mut manifest = load_dataset(&root, &LoadOptions::default())?;
            if let Some(store) = &cfg.teacher_store {
                manifest.attach_teacher(&TeacherStore::open(store)?);
            }
            match out {
                Some(path) => {
                    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    let mut w = BufWriter::new(file);
                    manifest.write_json_lines(&mut w)?;
                    w.flush()?;
                }
                None => manifest.write_json_lines(io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Describe { common } => {
            let model_cfg: ModelConfig = common.load()?.model;
            let desc = Model32::new(model_cfg)?.describe();
            print_json(&serde_json::to_value(desc)?)
        }
        Command::SynthCorpus { out, speakers, seed } => {
            let summary = generate_corpus(&out, &SynthConfig { speakers, seed, ..SynthConfig::default() })?;
            print_json(&json!({ "event": "corpus", "summary": summary }))
        }
        Command::SynthTeacher { data_root, out, seed } => {
            let manifest = load_dataset(&data_root, &LoadOptions::default())?;
            let records = write_teacher_store(&manifest, &out, seed)?;
            print_json(&json!({ "event": "teacher_store", "path": out, "records": records }))
        }
        Command::Verify { store } => {
            let report = verify_store(&store);
            print_json(&json!({ "event": "verify", "ok": report.ok(), "report": report }))?;
            if !report.ok() {
                bail!("{} of {} records failed verification", report.failures.len(), report.records);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
