use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{EpochReport, Metric, MetricsSink, PlateauScheduler, Stage, TrainConfig, TrainReport};
use crate::augment::AugmentConfig;
use crate::data::batch::EVAL_SEED;
use crate::data::{
    batches, compose_epoch, eval_indices, label_subset, make_batch, shuffled, Batch, BatchContext, BatchMode, Dataset,
    Split, TeacherStore,
};
use crate::error::{Error, Result};
use crate::losses::{aligned_wvc_loss, cross_entropy, lgcsiam_loss, one_hot, LossWeights};
use crate::model::{part, Bound};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::ops::{self, Mode};
use crate::tensor::optim::{OptimizerState, Sgd};
use crate::tensor::{Tape, Tensor, Var};
use crate::Model32;

const VELOCITY_PREFIX: &str = "optim.velocity.";

/// Loss values of one step (or one epoch's means). Terms with zero weight
/// are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lgcsiam: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wvc: Option<f64>,
}

/// Parameters a stage optimises. Heads whose loss term has zero weight stay
/// frozen, as does everything outside the stage's objective.
pub fn trainable_filter(cfg: &TrainConfig) -> impl Fn(&str) -> bool + Copy {
    let w = &cfg.weights;
    // encoder, decoder, classifier, wvc head, siamese head
    let parts: [bool; 5] = match cfg.stage {
        Stage::Wvc => [true, false, false, true, false],
        Stage::Lgcsiam => [true, w.lambda1 > 0.0, false, w.lambda2 > 0.0, w.lambda1 > 0.0],
        Stage::Finetune => [true, true, true, w.gamma3 > 0.0, w.gamma2 > 0.0],
    };
    move |name: &str| {
        [part::ENCODER, part::DECODER, part::CLASSIFIER, part::WVC_HEAD, part::SIAM_HEAD]
            .iter()
            .zip(parts)
            .any(|(prefix, on)| on && name.starts_with(prefix))
    }
}

/// Weighted terms of a stage objective and the batches they need.
#[derive(Clone, Copy, Debug)]
struct Objective {
    mode: BatchMode,
    ce: Option<f64>,
    lgcsiam: Option<f64>,
    wvc: Option<f64>,
}

impl Objective {
    fn of(cfg: &TrainConfig) -> Result<Self> {
        let w = &cfg.weights;
        let on = |v: f64| (v > 0.0).then_some(v);
        let obj = match cfg.stage {
            Stage::Wvc => Objective { mode: BatchMode::Wvc, ce: None, lgcsiam: None, wvc: Some(1.0) },
            Stage::Lgcsiam => {
                let (lgcsiam, wvc) = (on(w.lambda1), on(w.lambda2));
                let mode = match (lgcsiam, wvc) {
                    (Some(_), Some(_)) => BatchMode::Joint,
                    (Some(_), None) => BatchMode::Siamese,
                    (None, _) => BatchMode::Wvc,
                };
                Objective { mode, ce: None, lgcsiam, wvc }
            }
            Stage::Finetune => {
                let (ce, lgcsiam, wvc) = (on(w.gamma1), on(w.gamma2), on(w.gamma3));
                let mode = if wvc.is_some() {
                    BatchMode::Joint
                } else if lgcsiam.is_some() {
                    BatchMode::Siamese
                } else {
                    BatchMode::Supervised
                };
                Objective { mode, ce, lgcsiam, wvc }
            }
        };
        if obj.ce.is_none() && obj.lgcsiam.is_none() && obj.wvc.is_none() {
            return Err(Error::Config(format!("every loss weight of stage {} is zero", cfg.stage)));
        }
        Ok(obj)
    }
}

/// Student input for the distillation term: the first view where its
/// augmentation kept the timing intact, the clean features elsewhere.
/// `None` means the first view can be used as is.
fn distillation_input(batch: &Batch) -> Option<Tensor<f32>> {
    let clean = batch.clean.as_ref()?;
    let keep: Vec<bool> = batch.records.first()?.iter().map(|r| r.preserves_timing()).collect();
    if keep.iter().all(|&k| k) {
        return None;
    }
    let row = clean.numel() / keep.len();
    let mut data = batch.x1.data().to_vec();
    for (b, &k) in keep.iter().enumerate() {
        if !k {
            data[b * row..][..row].copy_from_slice(&clean.data()[b * row..][..row]);
        }
    }
    Some(Tensor::new(batch.x1.shape(), data).expect("shape of the first view"))
}

fn objective_loss<'t>(
    model: &mut Model32,
    obj: &Objective,
    w: &LossWeights,
    tape: &'t Tape<f32>,
    p: &Bound<'t, f32>,
    batch: &Batch,
    mode: Mode,
) -> Result<(Var<'t, f32>, StepLosses)> {
    let e1 = model.encoder_forward(p, tape.constant(batch.x1.clone()), mode)?;
    let mut terms = Vec::with_capacity(3);
    let mut losses = StepLosses::default();
    let d1 = if obj.ce.is_some() || obj.lgcsiam.is_some() {
        Some(model.decoder_forward(p, e1)?)
    } else {
        None
    };

    if let (Some(weight), Some(d1)) = (obj.ce, d1) {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("cross-entropy needs a fully labelled batch"))?;
        let y = one_hot(labels, model.config().classes)?;
        let ce = cross_entropy(model.classify(p, d1)?, &y)?;
        losses.ce = Some(ce.item());
        terms.push((ce, weight));
    }
    if let (Some(weight), Some(d1)) = (obj.lgcsiam, d1) {
        let x2 = batch
            .x2
            .as_ref()
            .ok_or_else(|| Error::contract("contrastive loss needs a second view"))?;
        let e2 = model.encoder_forward(p, tape.constant(x2.clone()), mode)?;
        let d2 = model.decoder_forward(p, e2)?;
        let z1 = model.siam_projection(p, d1)?;
        let z2 = model.siam_projection(p, d2)?;
        let l = lgcsiam_loss(z1, z2, w.tau, w.symmetric_local)?;
        losses.lgcsiam = Some(l.item());
        terms.push((l, weight));
    }
    if let (Some(weight), Some(teacher)) = (obj.wvc, &batch.teacher) {
        let e = match distillation_input(batch) {
            Some(x) => model.encoder_forward(p, tape.constant(x), mode)?,
            None => e1,
        };
        let e = if batch.teacher_index.len() == batch.len() {
            e
        } else {
            ops::select_rows(e, &batch.teacher_index)?
        };
        let student = model.wvc_projection(p, e)?;
        let l = aligned_wvc_loss(student, tape.constant(teacher.clone()))?;
        losses.wvc = Some(l.item());
        terms.push((l, weight));
    }
    let loss = ops::weighted_sum(&terms)?;
    losses.loss = loss.item();
    Ok((loss, losses))
}

#[derive(Default)]
struct Means {
    n: usize,
    loss: f64,
    ce: Option<f64>,
    lgcsiam: Option<f64>,
    wvc: Option<f64>,
}

impl Means {
    fn add(&mut self, l: &StepLosses, weight: usize) {
        let w = weight as f64;
        let acc = |slot: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *slot = Some(slot.unwrap_or(0.0) + w * v);
            }
        };
        self.n += weight;
        self.loss += w * l.loss;
        acc(&mut self.ce, l.ce);
        acc(&mut self.lgcsiam, l.lgcsiam);
        acc(&mut self.wvc, l.wvc);
    }

    fn finish(&self) -> StepLosses {
        let n = self.n.max(1) as f64;
        StepLosses {
            loss: self.loss / n,
            ce: self.ce.map(|v| v / n),
            lgcsiam: self.lgcsiam.map(|v| v / n),
            wvc: self.wvc.map(|v| v / n),
        }
    }
}

/// Splits an f64 into two f32 values whose sum restores it to ~48 bits.
fn split_f64(v: f64) -> (f32, f32) {
    let hi = v as f32;
    (hi, (v - hi as f64) as f32)
}

/// One training run of one stage: model, optimizer, schedule and progress.
pub struct Session<'a> {
    cfg: TrainConfig,
    ds: &'a Dataset,
    teacher: Option<&'a TeacherStore>,
    objective: Objective,
    model: Model32,
    opt: Sgd<f32>,
    sched: PlateauScheduler,
    pool: Vec<usize>,
    val: Vec<usize>,
    /// Completed epochs.
    epoch: usize,
    step: u64,
    best: Option<Checkpoint>,
    best_epoch: Option<usize>,
    report: TrainReport,
    metrics_file: Option<BufWriter<File>>,
}

impl<'a> Session<'a> {
    /// Prepares a run. Weights come from `cfg.resume` if set, else from
    /// `cfg.checkpoint` unless `cfg.fresh_init`, else a seeded init.
    pub fn new(cfg: TrainConfig, ds: &'a Dataset, teacher: Option<&'a TeacherStore>) -> Result<Self> {
        cfg.validate()?;
        let objective = Objective::of(&cfg)?;
        if objective.wvc.is_some() && teacher.is_none() {
            return Err(Error::Config(format!("stage {} needs a teacher store", cfg.stage)));
        }

        let mut model = match (&cfg.checkpoint, cfg.fresh_init) {
            (Some(path), false) => {
                let mut m = Model32::new(cfg.model.clone())?;
                m.load_from(&Checkpoint::load(path)?)?;
                m
            }
            _ => Model32::init(cfg.model.clone(), cfg.seed)?,
        };
        model.set_trainable(trainable_filter(&cfg));

        let (pool, val) = match cfg.stage {
            Stage::Finetune => {
                let (subset, warnings) = label_subset(&ds.manifest, cfg.label_fraction, cfg.seed)?;
                warnings.iter().for_each(|w| log::warn!("{w}"));
                (subset, eval_indices(&ds.manifest, Split::Val))
            }
            _ => {
                let speech = |split| -> Vec<usize> {
                    ds.manifest
                        .indices(split)
                        .into_iter()
                        .filter(|&i| ds.manifest.entries[i].offset.is_none())
                        .collect()
                };
                let mut pool = shuffled(&speech(Split::Train), cfg.seed, u64::MAX);
                if let Some(cap) = cfg.max_pretrain_utterances {
                    pool.truncate(cap);
                }
                pool.sort_unstable();
                (pool, speech(Split::Val))
            }
        };
        if pool.len() < 2 {
            return Err(Error::Config(format!("{} training utterances are too few for a batch", pool.len())));
        }
        if val.is_empty() {
            return Err(Error::Config("the validation split is empty".into()));
        }

        let opt = Sgd::new(OptimizerState::new(cfg.lr0, cfg.momentum, cfg.weight_decay)?);
        let sched = PlateauScheduler::new(
            cfg.lr0,
            cfg.lr_decay_factor,
            cfg.patience_epochs,
            cfg.stage == Stage::Finetune,
        );
        let mut session = Self {
            cfg,
            ds,
            teacher,
            objective,
            model,
            opt,
            sched,
            pool,
            val,
            epoch: 0,
            step: 0,
            best: None,
            best_epoch: None,
            report: TrainReport::default(),
            metrics_file: None,
        };
        if let Some(path) = session.cfg.resume.clone() {
            session.restore(&path)?;
        }
        Ok(session)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model32 {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model32 {
        &mut self.model
    }

    pub fn into_model(self) -> Model32 {
        self.model
    }

    /// Training utterances (before per-epoch composition).
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.sched.lr()
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    fn context<'c>(&self, seed: u64, epoch: u64, augment: Option<&'c AugmentConfig>) -> BatchContext<'c>
    where
        'a: 'c,
    {
        BatchContext {
            seed,
            epoch,
            augment,
            teacher: self.teacher,
            skip_missing_teacher: self.cfg.skip_missing_teacher,
            student_frames: self.cfg.model.encoded_frames(),
        }
    }

    /// The batch of `indices` exactly as epoch `epoch` would build it.
    pub fn batch(&self, indices: &[usize], epoch: usize) -> Result<Batch> {
        let ctx = self.context(self.cfg.seed, epoch as u64, self.cfg.augment_config());
        make_batch(self.ds, indices, self.objective.mode, &ctx)
    }

    /// Training order of epoch `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        match self.cfg.stage {
            Stage::Finetune => {
                compose_epoch(&self.ds.manifest, &self.pool, self.cfg.seed, epoch as u64, self.cfg.extra_fraction)
            }
            _ => shuffled(&self.pool, self.cfg.seed, epoch as u64),
        }
    }

    /// Objective value of `batch` without touching any state.
    pub fn loss(&mut self, batch: &Batch, mode: Mode) -> Result<StepLosses> {
        let tape = Tape::new();
        let p = self.model.bind(&tape);
        if mode == Mode::Train {
            // Train-mode batch norm moves the running statistics; put them back.
            let saved: Vec<Tensor<f32>> = self.model.params().buffers().map(|(_, t)| t.clone()).collect();
            let out = objective_loss(&mut self.model, &self.objective, &self.cfg.weights, &tape, &p, batch, mode);
            for ((_, t), s) in self.model.params_mut().buffers_mut().zip(saved) {
                *t = s;
            }
            return Ok(out?.1);
        }
        Ok(objective_loss(&mut self.model, &self.objective, &self.cfg.weights, &tape, &p, batch, mode)?.1)
    }

    /// One optimizer step on `batch` at the scheduler's learning rate.
    ///
    /// A non-finite gradient leaves the parameters untouched and is
    /// reported as [`Error::NonFiniteGradient`].
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let tape = Tape::new();
        let p = self.model.bind(&tape);
        let (loss, losses) =
            objective_loss(&mut self.model, &self.objective, &self.cfg.weights, &tape, &p, batch, Mode::Train)?;
        let store = self.model.params_mut();
        store.zero_grad();
        tape.backward_into(loss, store)?;
        self.opt.set_lr(self.sched.lr());
        self.opt.step(store, trainable_filter(&self.cfg))?;
        self.step += 1;
        Ok(losses)
    }

    /// Validation metric: accuracy in percent when fine-tuning, else the
    /// objective on the validation split with fixed-seed augmentation.
    pub fn validate(&mut self) -> Result<f64> {
        if self.cfg.stage == Stage::Finetune {
            return Ok(evaluate(&mut self.model, self.ds, &self.val, self.cfg.eval_batch_size)?.accuracy);
        }
        let augment = self.cfg.augment_config().cloned();
        let ctx = self.context(EVAL_SEED, 0, augment.as_ref());
        let mut means = Means::default();
        let val = self.val.clone();
        for idx in batches(&val, self.cfg.eval_batch_size) {
            let batch = make_batch(self.ds, idx, self.objective.mode, &ctx)?;
            if batch.is_empty() {
                continue;
            }
            let losses = self.loss(&batch, Mode::Eval)?;
            means.add(&losses, batch.len());
        }
        if means.n == 0 {
            return Err(Error::Config("no validation utterance could be used".into()));
        }
        Ok(means.finish().loss)
    }

    /// Runs the next epoch: training steps, validation, schedule update and
    /// checkpoints.
    pub fn run_epoch(&mut self, sink: &mut dyn MetricsSink) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.sched.lr();
        let order = self.epoch_order(epoch);
        let augment = self.cfg.augment_config().cloned();
        let ctx = self.context(self.cfg.seed, epoch as u64, augment.as_ref());
        let mut means = Means::default();
        let mut steps = 0;
        for idx in batches(&order, self.cfg.batch_size) {
            if self.cfg.max_steps_per_epoch.is_some_and(|m| steps >= m) {
                break;
            }
            let batch = make_batch(self.ds, idx, self.objective.mode, &ctx)?;
            if batch.len() < 2 {
                continue;
            }
            match self.train_step(&batch) {
                Ok(losses) => {
                    steps += 1;
                    means.add(&losses, 1);
                    self.emit(
                        sink,
                        &Metric::Step { stage: self.cfg.stage, epoch: epoch + 1, step: self.step, lr, losses },
                    );
                }
                Err(Error::NonFiniteGradient(name)) => {
                    log::warn!("epoch {}: non-finite gradient in `{name}`; step skipped", epoch + 1);
                }
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            return Err(Error::Config(format!("epoch {} made no optimizer step", epoch + 1)));
        }

        let val_metric = self.validate()?;
        let best = self.sched.observe(val_metric);
        self.epoch += 1;
        if best {
            self.best_epoch = Some(self.epoch);
            self.report.best_epoch = self.best_epoch;
            self.report.best_val_metric = Some(val_metric);
        }
        let last = self.checkpoint();
        if best {
            self.best = Some(last.clone());
        }
        if let Some(dir) = self.cfg.run_dir.clone() {
            if best {
                last.save(dir.join("best.kwsc"))?;
                self.report.best_checkpoint = Some(dir.join("best.kwsc"));
            }
            last.save(dir.join("last.kwsc"))?;
        }
        let train = means.finish();
        let report = EpochReport {
            stage: self.cfg.stage,
            epoch: self.epoch,
            steps,
            train_loss: train.loss,
            train_ce: train.ce,
            train_lgcsiam: train.lgcsiam,
            train_wvc: train.wvc,
            val_metric,
            lr,
            best,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.emit(sink, &Metric::Epoch(report.clone()));
        self.report.epochs.push(report.clone());
        Ok(report)
    }

    /// Trains until the epoch budget is spent or the learning rate drops
    /// below `min_lr`. The best checkpoint's weights are loaded afterwards;
    /// when fine-tuning they are also scored on the test split.
    pub fn fit(&mut self, sink: &mut dyn MetricsSink) -> Result<TrainReport> {
        if let Some(dir) = self.cfg.run_dir.clone() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let config = serde_json::to_string_pretty(&self.cfg)?;
            let path = dir.join("config.json");
            fs::write(&path, config).map_err(|e| Error::io(&path, e))?;
            let path = dir.join("metrics.jsonl");
            let file = OpenOptions::new()
                .create(true)
                .append(self.cfg.resume.is_some())
                .write(true)
                .truncate(self.cfg.resume.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.metrics_file = Some(BufWriter::new(file));
        }

        while self.epoch < self.cfg.epochs() && self.sched.lr() >= self.cfg.min_lr {
            self.run_epoch(sink)?;
        }
        if let Some(best) = &self.best {
            self.model.load_from(best)?;
        }
        if self.cfg.stage == Stage::Finetune {
            let test = eval_indices(&self.ds.manifest, Split::Test);
            if !test.is_empty() {
                let r = evaluate(&mut self.model, self.ds, &test, self.cfg.eval_batch_size)?;
                self.report.test_accuracy = Some(r.accuracy);
                self.emit(sink, &Metric::Test { accuracy: r.accuracy, correct: r.correct, total: r.total });
            }
        }
        if let Some(dir) = &self.cfg.run_dir {
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(f) = &mut self.metrics_file {
            f.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(self.report.clone())
    }

    fn emit(&mut self, sink: &mut dyn MetricsSink, metric: &Metric) {
        sink.emit(metric);
        if let Some(f) = &mut self.metrics_file {
            let line = serde_json::to_string(metric).expect("metrics serialise");
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("metrics write failed: {e}");
            }
        }
    }

    /// Weights, BN statistics, momentum buffers and schedule state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.model.save_into(&mut ckpt);
        for (name, v) in &self.opt.state.velocity {
            ckpt.insert(&format!("{VELOCITY_PREFIX}{name}"), v);
        }
        let (hi, lo) = split_f64(self.sched.best.unwrap_or(f64::NAN));
        ckpt.insert_scalar("train.best_hi", hi);
        ckpt.insert_scalar("train.best_lo", lo);
        ckpt.insert_scalar("train.epoch", self.epoch as f32);
        ckpt.insert_scalar("train.decays", self.sched.decays as f32);
        ckpt.insert_scalar("train.stale", self.sched.stale as f32);
        ckpt.insert_scalar("train.best_epoch", self.best_epoch.map_or(-1.0, |e| e as f32));
        let (hi, lo) = split_f64(self.step as f64);
        ckpt.insert_scalar("train.step_hi", hi);
        ckpt.insert_scalar("train.step_lo", lo);
        ckpt
    }

    fn restore(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::load(path)?;
        self.model.load_from(&ckpt)?;
        self.opt.state.velocity = ckpt
            .names()
            .filter_map(|n| n.strip_prefix(VELOCITY_PREFIX))
            .map(|name| {
                let v = ckpt.get(&format!("{VELOCITY_PREFIX}{name}")).expect("listed tensor");
                (name.to_owned(), v)
            })
            .collect();
        let scalar = |name: &str| {
            ckpt.scalar(name).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                detail: format!("{} lacks `{name}`; not a resumable checkpoint", path.display()),
            })
        };
        let best = scalar("train.best_hi")? as f64 + scalar("train.best_lo")? as f64;
        self.sched.best = (!best.is_nan()).then_some(best);
        self.sched.decays = scalar("train.decays")? as u32;
        self.sched.stale = scalar("train.stale")? as usize;
        self.epoch = scalar("train.epoch")? as usize;
        self.step = (scalar("train.step_hi")? as f64 + scalar("train.step_lo")? as f64) as u64;
        let best_epoch = scalar("train.best_epoch")?;
        self.best_epoch = (best_epoch >= 0.0).then_some(best_epoch as usize);
        self.report.best_epoch = self.best_epoch;
        self.report.best_val_metric = self.sched.best;

        let best_path: PathBuf = path.with_file_name("best.kwsc");
        if best_path.exists() {
            self.best = Some(Checkpoint::load(&best_path)?);
            self.report.best_checkpoint = Some(best_path);
        }
        Ok(())
    }
}
