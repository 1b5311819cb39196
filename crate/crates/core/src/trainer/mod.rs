//! Staged training: teacher distillation, joint contrastive pretraining and
//! supervised fine-tuning, plus evaluation and single-clip inference.

mod eval;
mod session;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{self, Dataset, LoadOptions, TeacherStore};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

pub use eval::{evaluate, evaluate_split, infer, load_model, EvalResult, Prediction};
pub use session::{trainable_filter, Session, StepLosses};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Encoder + WVC head against teacher embeddings.
    Wvc,
    /// Weighted contrastive + distillation objective on unlabelled audio.
    Lgcsiam,
    /// Weighted cross-entropy + contrastive + distillation on labelled audio.
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Wvc => "wvc",
            Stage::Lgcsiam => "lgcsiam",
            Stage::Finetune => "finetune",
        })
    }
}

/// Everything a training run needs; loadable from JSON with defaults for
/// missing fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub patience_epochs: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    /// Defaults to 30 / 30 / 60 for the wvc / lgcsiam / finetune stages.
    pub max_epochs: Option<usize>,
    /// Caps optimizer steps per epoch (reduced-budget runs).
    pub max_steps_per_epoch: Option<usize>,
    /// Caps the utterances of the pretraining pool.
    pub max_pretrain_utterances: Option<usize>,
    pub seed: u64,
    pub label_fraction: f64,
    /// Share of unknown-word and of silence utterances in supervised epochs.
    pub extra_fraction: f64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Disable waveform and spectrogram augmentation entirely.
    pub no_augment: bool,
    pub data_root: Option<PathBuf>,
    /// Unlabelled audio directory for the pretraining stages; defaults to
    /// the training split of `data_root`.
    pub unlabeled_root: Option<PathBuf>,
    pub teacher_store: Option<PathBuf>,
    /// Weights to start from (ignored with `fresh_init`).
    pub checkpoint: Option<PathBuf>,
    pub fresh_init: bool,
    /// Continue an interrupted run from its `last.kwsc`.
    pub resume: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub skip_missing_teacher: bool,
    pub cache_audio: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 3.0,
            patience_epochs: 3,
            min_lr: 1e-4,
            max_epochs: None,
            max_steps_per_epoch: None,
            max_pretrain_utterances: None,
            seed: 0,
            label_fraction: 1.0,
            extra_fraction: 0.1,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            no_augment: false,
            data_root: None,
            unlabeled_root: None,
            teacher_store: None,
            checkpoint: None,
            fresh_init: false,
            resume: None,
            run_dir: None,
            skip_missing_teacher: false,
            cache_audio: true,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn epochs(&self) -> usize {
        self.max_epochs.unwrap_or(match self.stage {
            Stage::Wvc | Stage::Lgcsiam => 30,
            Stage::Finetune => 60,
        })
    }

    /// Whether the stage's objective includes the distillation term.
    pub fn uses_teacher(&self) -> bool {
        match self.stage {
            Stage::Wvc => true,
            Stage::Lgcsiam => self.weights.lambda2 > 0.0,
            Stage::Finetune => self.weights.gamma3 > 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.patience_epochs == 0 {
            return Err(Error::Config("patience must be at least one epoch".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr decay factor must exceed 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch norm".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config("label fraction must lie in (0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.extra_fraction) {
            return Err(Error::Config("unknown/silence share must lie in [0, 0.5)".into()));
        }
        self.weights.validate()?;
        self.model.validate()?;
        self.augment.validate()
    }

    pub fn augment_config(&self) -> Option<&AugmentConfig> {
        (!self.no_augment).then_some(&self.augment)
    }
}

/// Reduce-on-plateau learning rate: divide by `factor` once the monitored
/// metric has not improved for `patience` consecutive epochs, then restart
/// the count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr0: f64,
    pub factor: f64,
    pub patience: usize,
    /// Higher metric is better (accuracy) or lower (loss).
    pub maximize: bool,
    pub decays: u32,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, maximize: bool) -> Self {
        Self { lr0, factor, patience, maximize, decays: 0, best: None, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr0 / self.factor.powi(self.decays as i32)
    }

    /// Records one epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(b) if self.maximize => metric > b,
            Some(b) => metric < b,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.decays += 1;
                self.stale = 0;
            }
        }
        improved
    }
}

/// Learning rate after feeding `history` to a fresh scheduler.
pub fn lr_schedule(lr0: f64, factor: f64, patience: usize, history: &[f64]) -> f64 {
    let mut s = PlateauScheduler::new(lr0, factor, patience, true);
    history.iter().for_each(|&m| {
        s.observe(m);
    });
    s.lr()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: Stage,
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_ce: Option<f64>,
    pub train_lgcsiam: Option<f64>,
    pub train_wvc: Option<f64>,
    /// Validation loss (pretraining) or accuracy in percent (fine-tuning).
    pub val_metric: f64,
    pub lr: f64,
    pub best: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// The learning rates used by each epoch.
    pub fn lr_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Metric {
    Step {
        stage: Stage,
        epoch: usize,
        step: u64,
        lr: f64,
        #[serde(flatten)]
        losses: StepLosses,
    },
    Epoch(EpochReport),
    Test {
        accuracy: f64,
        correct: usize,
        total: usize,
    },
}

/// Receives metrics as they are produced.
pub trait MetricsSink {
    fn emit(&mut self, metric: &Metric);
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn emit(&mut self, _: &Metric) {}
}

impl MetricsSink for Vec<Metric> {
    fn emit(&mut self, metric: &Metric) {
        self.push(metric.clone());
    }
}

/// Writes one JSON object per line to each writer.
pub struct JsonLines {
    outs: Vec<Box<dyn Write>>,
}

impl JsonLines {
    pub fn new(outs: Vec<Box<dyn Write>>) -> Self {
        Self { outs }
    }
}

impl MetricsSink for JsonLines {
    fn emit(&mut self, metric: &Metric) {
        let line = serde_json::to_string(metric).expect("metrics serialise");
        for out in &mut self.outs {
            if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
                log::warn!("metrics write failed: {e}");
            }
        }
    }
}

/// Labelled Speech Commands data for `cfg.data_root`.
pub fn open_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let root = cfg
        .data_root
        .as_ref()
        .ok_or_else(|| Error::Config("no data root given".into()))?;
    Dataset::new(data::load_dataset(root, &LoadOptions::default())?, cfg.cache_audio)
}

/// Pretraining audio: `cfg.unlabeled_root` when set, else `cfg.data_root`.
pub fn open_pretrain_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.unlabeled_root {
        Some(root) => Dataset::new(data::load_unlabeled(root, &LoadOptions::default())?, cfg.cache_audio),
        None => open_dataset(cfg),
    }
}

pub fn open_teacher(cfg: &TrainConfig) -> Result<Option<TeacherStore>> {
    if !cfg.uses_teacher() {
        return Ok(None);
    }
    let path = cfg
        .teacher_store
        .as_ref()
        .ok_or_else(|| Error::Config(format!("stage {} needs a teacher store", cfg.stage)))?;
    let store = TeacherStore::open(path)?;
    if store.is_empty() {
        return Err(Error::Config(format!("teacher store {} is empty", path.display())));
    }
    Ok(Some(store))
}

fn run_stage(cfg: &TrainConfig, stage: Stage, sink: &mut dyn MetricsSink) -> Result<(TrainReport, Session<'static>)> {
    let mut cfg = cfg.clone();
    cfg.stage = stage;
    cfg.validate()?;
    let ds = match stage {
        Stage::Finetune => open_dataset(&cfg)?,
        _ => open_pretrain_dataset(&cfg)?,
    };
    let teacher = open_teacher(&cfg)?;
    // The session borrows its data for the whole run; the CLI runs one stage
    // per process, so leaking the two owners is harmless.
    let ds: &'static Dataset = Box::leak(Box::new(ds));
    let teacher: Option<&'static TeacherStore> = teacher.map(|t| &*Box::leak(Box::new(t)));
    let mut session = Session::new(cfg, ds, teacher)?;
    let report = session.fit(sink)?;
    Ok((report, session))
}

/// Distillation pretraining of the encoder and WVC head.
pub fn pretrain_wvc(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainReport> {
    Ok(run_stage(cfg, Stage::Wvc, sink)?.0)
}

/// Joint contrastive (and optionally distillation) pretraining.
pub fn pretrain_lgcsiam(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainReport> {
    Ok(run_stage(cfg, Stage::Lgcsiam, sink)?.0)
}

/// Supervised fine-tuning; the report includes the best checkpoint's test
/// accuracy.
pub fn finetune(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainReport> {
    Ok(run_stage(cfg, Stage::Finetune, sink)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_rule_examples() {
        assert!((lr_schedule(0.1, 3.0, 3, &[80.0, 79.0, 78.0, 77.0]) - 0.1 / 3.0).abs() < 1e-15);
        assert_eq!(lr_schedule(0.1, 3.0, 3, &[1.0, 2.0, 3.0, 4.0, 5.0]), 0.1);
        let two = lr_schedule(0.1, 3.0, 3, &[80.0, 79.0, 78.0, 77.0, 76.0, 75.0, 74.0]);
        assert!((two - 0.1 / 9.0).abs() < 1e-15);
        // Equal to the best is not an improvement.
        assert!((lr_schedule(0.1, 3.0, 3, &[80.0, 80.0, 80.0, 80.0]) - 0.1 / 3.0).abs() < 1e-15);
        // A new best resets the count.
        assert_eq!(lr_schedule(0.1, 3.0, 3, &[80.0, 79.0, 78.0, 81.0, 80.0, 79.0]), 0.1);
    }

    #[test]
    fn minimising_scheduler() {
        let mut s = PlateauScheduler::new(1.0, 3.0, 2, false);
        assert!(s.observe(5.0));
        assert!(s.observe(4.0));
        assert!(!s.observe(4.5));
        assert!(!s.observe(4.0));
        assert!((s.lr() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_and_json() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"stage":"wvc","seed":7}"#).unwrap();
        assert_eq!(cfg.stage, Stage::Wvc);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.epochs(), 30);
        assert_eq!(cfg.weights.lambda1, 0.1);
        assert!(cfg.validate().is_ok());
        let ft = TrainConfig::default();
        assert_eq!(ft.epochs(), 60);
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience_epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { label_fraction: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
