//! Audio access, epoch composition and batch assembly.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::teacher::{TeacherStore, TEACHER_DIM};
use super::{DatasetManifest, Split, NUM_CLASSES, SILENCE, UNKNOWN};
use crate::augment::{apply_mask, augment_utterance, derive_seed, AugmentConfig, AugmentRecord};
use crate::error::{Error, Result};
use crate::frontend::{AudioClip, FrontendConfig, LogMel, LogMelSpectrogram, CLIP_SAMPLES};
use crate::losses::align_frames;
use crate::tensor::Tensor;

/// Manifest plus audio access, background-noise bank and feature extractor.
pub struct Dataset {
    pub manifest: DatasetManifest,
    noise: Vec<Vec<f32>>,
    noise_index: HashMap<PathBuf, usize>,
    waves: Vec<OnceLock<Arc<Vec<f32>>>>,
    cache: bool,
    frontend: LogMel,
}

impl Dataset {
    /// Loads the background recordings; utterances are read on demand and,
    /// with `cache_audio`, kept in memory after the first read.
    pub fn new(manifest: DatasetManifest, cache_audio: bool) -> Result<Self> {
        let mut noise = Vec::new();
        let mut noise_index = HashMap::new();
        for path in &manifest.noise_files {
            noise_index.insert(path.clone(), noise.len());
            noise.push(AudioClip::from_wav(path)?.into_samples());
        }
        let waves = (0..manifest.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { manifest, noise, noise_index, waves, cache: cache_audio, frontend: LogMel::new(FrontendConfig::default())? })
    }

    /// A dataset whose audio is already in memory (`waves[i]` for entry `i`).
    pub fn from_waves(manifest: DatasetManifest, waves: Vec<Vec<f32>>, noise: Vec<Vec<f32>>) -> Result<Self> {
        if waves.len() != manifest.len() {
            return Err(Error::contract(format!("{} waves for {} entries", waves.len(), manifest.len())));
        }
        let cells = waves
            .into_iter()
            .map(|w| {
                let cell = OnceLock::new();
                let _ = cell.set(Arc::new(fix_length(w)));
                cell
            })
            .collect();
        Ok(Self {
            manifest,
            noise,
            noise_index: HashMap::new(),
            waves: cells,
            cache: true,
            frontend: LogMel::new(FrontendConfig::default())?,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn noise_bank(&self) -> &[Vec<f32>] {
        &self.noise
    }

    /// One-second waveform of entry `i`.
    pub fn wave(&self, i: usize) -> Result<Arc<Vec<f32>>> {
        if let Some(w) = self.waves[i].get() {
            return Ok(w.clone());
        }
        let entry = &self.manifest.entries[i];
        let samples = match entry.offset {
            Some(offset) => {
                let src = match self.noise_index.get(&entry.path) {
                    Some(&k) => self.noise[k].clone(),
                    None => AudioClip::from_wav(&entry.path)?.into_samples(),
                };
                let end = (offset + CLIP_SAMPLES).min(src.len());
                src.get(offset..end).map(<[f32]>::to_vec).unwrap_or_default()
            }
            None => AudioClip::from_wav(&entry.path)?.into_samples(),
        };
        let w = Arc::new(fix_length(samples));
        if self.cache {
            let _ = self.waves[i].set(w.clone());
        }
        Ok(w)
    }

    /// Normalised log-mel features of a waveform.
    pub fn features(&self, wave: &[f32]) -> LogMelSpectrogram {
        let clip = AudioClip::new(wave.to_vec(), crate::frontend::SAMPLE_RATE).expect("16 kHz");
        let mut spec = self.frontend.compute(&clip);
        spec.normalize();
        spec
    }
}

fn fix_length(mut w: Vec<f32>) -> Vec<f32> {
    w.resize(CLIP_SAMPLES, 0.0);
    w
}

/// What a batch carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// One view (augmented when augmentation is on).
    Supervised,
    /// Two independently augmented views.
    Siamese,
    /// Clean features plus teacher embeddings.
    Wvc,
    /// Two augmented views, clean features and teacher embeddings.
    Joint,
}

impl BatchMode {
    fn views(self) -> usize {
        match self {
            BatchMode::Supervised | BatchMode::Wvc => 1,
            BatchMode::Siamese | BatchMode::Joint => 2,
        }
    }

    fn teacher(self) -> bool {
        matches!(self, BatchMode::Wvc | BatchMode::Joint)
    }
}

/// Seeds and resources shared by the batches of one epoch.
#[derive(Clone, Copy)]
pub struct BatchContext<'a> {
    pub seed: u64,
    pub epoch: u64,
    /// `None` disables augmentation.
    pub augment: Option<&'a AugmentConfig>,
    pub teacher: Option<&'a TeacherStore>,
    /// Drop utterances without a teacher record instead of failing.
    pub skip_missing_teacher: bool,
    /// Student frames after the encoder.
    pub student_frames: usize,
}

impl<'a> BatchContext<'a> {
    pub fn new(seed: u64, epoch: u64) -> Self {
        Self { seed, epoch, augment: None, teacher: None, skip_missing_teacher: false, student_frames: 50 }
    }
}

/// Index-aligned batch tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// First view `[B,100,40]`; the clean features in [`BatchMode::Wvc`].
    pub x1: Tensor<f32>,
    pub x2: Option<Tensor<f32>>,
    /// Un-augmented features, present in [`BatchMode::Joint`].
    pub clean: Option<Tensor<f32>>,
    /// Present when every utterance is labelled.
    pub labels: Option<Vec<usize>>,
    /// Teacher frames `[R,F,768]` truncated to the common length, one row
    /// per entry of `teacher_index`.
    pub teacher: Option<Tensor<f32>>,
    /// Batch rows that have teacher embeddings, ascending.
    pub teacher_index: Vec<usize>,
    pub waves: Vec<Arc<Vec<f32>>>,
    /// Augmentation decisions per view.
    pub records: Vec<Vec<AugmentRecord>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn stack(rows: &[Vec<f32>], frames: usize, mels: usize) -> Tensor<f32> {
    Tensor::new(&[rows.len(), frames, mels], rows.concat()).expect("uniform feature shapes")
}

/// Assembles the utterances at `indices`.
///
/// View `v` of an utterance is augmented with an RNG seeded from
/// `(seed, id, epoch, v)`, so a batch is reproducible regardless of which
/// other utterances it holds.
pub fn make_batch(ds: &Dataset, indices: &[usize], mode: BatchMode, ctx: &BatchContext<'_>) -> Result<Batch> {
    let mut kept = Vec::with_capacity(indices.len());
    let mut teacher_rows = Vec::new();
    let mut teacher_index = Vec::new();
    if mode.teacher() {
        let store = ctx
            .teacher
            .ok_or_else(|| Error::Config("this batch mode needs a teacher store".into()))?;
        for &i in indices {
            let entry = &ds.manifest.entries[i];
            let id = &entry.id;
            match store.read(id) {
                Ok(e) => {
                    teacher_index.push(kept.len());
                    kept.push(i);
                    teacher_rows.push(e);
                }
                // Silence crops are cut here, not exported, so they have no
                // teacher; they still count for the other terms.
                Err(Error::NotFound(_)) if entry.offset.is_some() && mode == BatchMode::Joint => kept.push(i),
                Err(Error::NotFound(_)) if ctx.skip_missing_teacher => {
                    log::warn!("no teacher embedding for `{id}`; skipped");
                }
                Err(e) => return Err(e),
            }
        }
    } else {
        kept.extend_from_slice(indices);
    }

    let (frames, mels) = (crate::frontend::N_FRAMES, crate::frontend::N_MELS);
    let mut ids = Vec::with_capacity(kept.len());
    let mut waves = Vec::with_capacity(kept.len());
    let mut views: Vec<Vec<Vec<f32>>> = vec![Vec::new(); mode.views()];
    let mut records: Vec<Vec<AugmentRecord>> = vec![Vec::new(); mode.views()];
    let mut clean = Vec::new();
    let mut labels = Vec::new();
    let mut all_labelled = true;
    for &i in &kept {
        let entry = &ds.manifest.entries[i];
        let wave = ds.wave(i)?;
        ids.push(entry.id.clone());
        match entry.label {
            Some(l) => labels.push(l),
            None => all_labelled = false,
        }
        if mode == BatchMode::Wvc {
            views[0].push(ds.features(&wave).data);
            records[0].push(AugmentRecord::default());
        } else {
            for v in 0..mode.views() {
                let (spec, rec) = match ctx.augment {
                    Some(cfg) => {
                        let salt = ctx.epoch.wrapping_mul(16).wrapping_add(v as u64 + 1);
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &entry.id, salt));
                        let (aug, rec) = augment_utterance(&wave, cfg, ds.noise_bank(), frames, mels, &mut rng)?;
                        let mut spec = ds.features(&aug);
                        for m in &rec.masks {
                            apply_mask(&mut spec, m);
                        }
                        (spec, rec)
                    }
                    None => (ds.features(&wave), AugmentRecord::default()),
                };
                views[v].push(spec.data);
                records[v].push(rec);
            }
            if mode == BatchMode::Joint {
                clean.push(ds.features(&wave).data);
            }
        }
        waves.push(wave);
    }

    let teacher = if mode.teacher() && !teacher_rows.is_empty() {
        let min_frames = teacher_rows.iter().map(|e| e.frames).min().unwrap_or(0);
        let f = align_frames(ctx.student_frames, min_frames);
        let mut data = Vec::with_capacity(teacher_rows.len() * f * TEACHER_DIM);
        for e in &teacher_rows {
            data.extend_from_slice(&e.data[..f * TEACHER_DIM]);
        }
        Some(Tensor::new(&[teacher_rows.len(), f, TEACHER_DIM], data)?)
    } else {
        None
    };

    let mut views = views.into_iter();
    Ok(Batch {
        ids,
        x1: stack(&views.next().unwrap_or_default(), frames, mels),
        x2: views.next().map(|v| stack(&v, frames, mels)),
        clean: (mode == BatchMode::Joint).then(|| stack(&clean, frames, mels)),
        labels: (all_labelled && !kept.is_empty()).then_some(labels),
        teacher,
        teacher_index,
        waves,
        records,
    })
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", epoch))
}

/// Shuffled training order for one epoch.
///
/// Target-word utterances are all used; unknown-word and silence utterances
/// are sub-sampled so each makes up `extra_fraction` of the epoch (as far as
/// the pool allows). A pool without target words is simply shuffled.
pub fn compose_epoch(
    manifest: &DatasetManifest,
    pool: &[usize],
    seed: u64,
    epoch: u64,
    extra_fraction: f64,
) -> Vec<usize> {
    let mut rng = epoch_rng(seed, epoch);
    let label = |i: &usize| manifest.entries[*i].label;
    let targets: Vec<usize> = pool.iter().copied().filter(|i| label(i).is_some_and(|l| l < UNKNOWN)).collect();
    let mut order = if targets.is_empty() {
        pool.to_vec()
    } else {
        let want = (targets.len() as f64 * extra_fraction / (1.0 - 2.0 * extra_fraction)).round() as usize;
        let mut order = targets;
        for class in [UNKNOWN, SILENCE] {
            let mut group: Vec<usize> = pool.iter().copied().filter(|i| label(i) == Some(class)).collect();
            group.shuffle(&mut rng);
            group.truncate(want);
            order.extend(group);
        }
        order
    };
    order.shuffle(&mut rng);
    order
}

/// `pool` in a seeded per-epoch random order.
pub fn shuffled(pool: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = pool.to_vec();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

/// Fixed seed for evaluation-set composition.
pub const EVAL_SEED: u64 = 0xe7a1;

/// Labelled evaluation set of `split` with the standard unknown/silence
/// shares, identical on every call.
pub fn eval_indices(manifest: &DatasetManifest, split: Split) -> Vec<usize> {
    let pool: Vec<usize> = manifest
        .indices(split)
        .into_iter()
        .filter(|&i| manifest.entries[i].label.is_some())
        .collect();
    let mut idx = compose_epoch(manifest, &pool, EVAL_SEED, 0, 0.1);
    idx.sort_unstable();
    idx
}

/// Stratified subset of the labelled training utterances: per class,
/// `round(fraction · n_class)` utterances drawn with `seed`. Returns the
/// subset and a warning per class left empty.
pub fn label_subset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<String>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "label-subset", (fraction * 1e6) as u64));
    let mut subset = Vec::new();
    let mut warnings = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = manifest
            .indices(Split::Train)
            .into_iter()
            .filter(|&i| manifest.entries[i].label == Some(class))
            .collect();
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            warnings.push(format!("label fraction {fraction} selects no `{}` utterances", super::CLASS_NAMES[class]));
        }
        members.shuffle(&mut rng);
        members.truncate(take);
        subset.extend(members);
    }
    if subset.is_empty() {
        return Err(Error::Config(format!("label fraction {fraction} selects no training utterances")));
    }
    subset.sort_unstable();
    Ok((subset, warnings))
}

/// Splits an epoch order into consecutive batches of at most `size`.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}
