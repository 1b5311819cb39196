//! Synthetic corpus in the Speech Commands directory layout.
//!
//! Each word is a fixed sequence of voiced "syllables" whose two formant
//! tracks glide between word-specific frequencies. Speakers differ in pitch,
//! formant scale, speaking rate, loudness and onset, and every utterance gets
//! its own jitter and a little breath noise. The result is small enough to
//! train on a laptop core yet needs real temporal modelling to classify.
//!
//! [`write_teacher_store`] produces a stand-in teacher store for it: a fixed
//! random non-linear projection of the clean log-mel frames to 49 × 768.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::teacher::{TeacherEmbedding, TeacherStoreWriter, TEACHER_DIM};
use super::{hash_split, Split, CLASS_NAMES, NOISE_DIR, UNKNOWN};
use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::frontend::{AudioClip, FrontendConfig, LogMel, CLIP_SAMPLES, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub speakers: usize,
    /// Recordings of each keyword per speaker.
    pub takes_per_word: usize,
    /// Non-keyword vocabulary, recorded once per speaker.
    pub unknown_words: Vec<String>,
    pub noise_files: usize,
    pub noise_seconds: usize,
    /// Standard deviation of per-utterance formant jitter, as a fraction.
    pub formant_jitter: f64,
    /// Breath-noise level relative to the voiced signal's RMS.
    pub noise_level: f64,
    /// Split shares (percent) used to write the validation and testing lists.
    pub validation_percentage: f64,
    pub testing_percentage: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            speakers: 40,
            takes_per_word: 1,
            unknown_words: ["bed", "bird", "cat", "dog", "happy", "house", "tree", "wow"]
                .map(String::from)
                .to_vec(),
            noise_files: 3,
            noise_seconds: 30,
            formant_jitter: 0.06,
            noise_level: 0.3,
            validation_percentage: 10.0,
            testing_percentage: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Syllable {
    start: f64,
    len: f64,
    f1: (f64, f64),
    f2: (f64, f64),
    /// Pitch glide factor over the syllable.
    glide: f64,
}

/// Word template, fixed by the word's spelling (independent of the corpus
/// seed so words sound the same in every corpus).
fn template(word: &str) -> Vec<Syllable> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x0005_07d5, word, 0));
    let n = rng.gen_range(1..=3usize);
    let mut t = rng.gen_range(0.0..0.08);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(0.12..0.3);
            let s = Syllable {
                start: t,
                len,
                f1: (rng.gen_range(250.0..900.0), rng.gen_range(250.0..900.0)),
                f2: (rng.gen_range(900.0..2600.0), rng.gen_range(900.0..2600.0)),
                glide: rng.gen_range(0.85..1.15),
            };
            t += len + rng.gen_range(0.02..0.1);
            s
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Speaker {
    f0: f64,
    formant_scale: f64,
    rate: f64,
    gain: f64,
}

fn speaker(seed: u64, index: usize) -> Speaker {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "speaker", index as u64));
    Speaker {
        f0: rng.gen_range(90.0..260.0),
        formant_scale: rng.gen_range(0.85..1.2),
        rate: rng.gen_range(0.8..1.25),
        gain: rng.gen_range(0.15..0.6),
    }
}

/// Renders one utterance of `word`.
pub fn render_word(word: &str, speaker_seed: u64, speaker_index: usize, take: u64, cfg: &SynthConfig) -> Vec<f32> {
    let spk = speaker(speaker_seed, speaker_index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(speaker_seed, word, (speaker_index as u64) << 16 | take));
    let sr = SAMPLE_RATE as f64;
    let rate = spk.rate * rng.gen_range(0.92..1.08);
    let syllables = template(word);
    let span = syllables.last().map_or(0.0, |s| s.start + s.len) / rate;
    let onset = rng.gen_range(0.02..(0.98 - span).max(0.03));
    let f0 = spk.f0 * rng.gen_range(0.93..1.07);
    let mut jitter = || 1.0 + cfg.formant_jitter * rng.gen_range(-1.7..1.7);
    let mut out = vec![0.0f64; CLIP_SAMPLES];
    for syl in &syllables {
        let (j1, j2) = (jitter(), jitter());
        let start = ((onset + syl.start / rate) * sr) as usize;
        let len = ((syl.len / rate) * sr) as usize;
        let n_harm = ((7000.0 / f0) as usize).max(1);
        let mut phases = vec![0.0f64; n_harm];
        for i in 0..len {
            let n = start + i;
            if n >= CLIP_SAMPLES {
                break;
            }
            let u = i as f64 / len as f64;
            let env = (PI * u).sin().powf(0.6);
            let pitch = f0 * (1.0 + (syl.glide - 1.0) * u);
            let f1 = (syl.f1.0 + (syl.f1.1 - syl.f1.0) * u) * spk.formant_scale * j1;
            let f2 = (syl.f2.0 + (syl.f2.1 - syl.f2.0) * u) * spk.formant_scale * j2;
            let mut v = 0.0;
            for (k, ph) in phases.iter_mut().enumerate() {
                let fk = pitch * (k + 1) as f64;
                if fk >= 7600.0 {
                    break;
                }
                *ph += 2.0 * PI * fk / sr;
                let a = (-((fk - f1) / 120.0).powi(2)).exp() + 0.6 * (-((fk - f2) / 180.0).powi(2)).exp() + 0.02;
                v += a * ph.sin();
            }
            out[n] += env * v;
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt().max(1e-9);
    let gain = spk.gain * rng.gen_range(0.7..1.3) / (rms * 4.0);
    let breath = cfg.noise_level * rms;
    out.iter()
        .map(|v| ((v + breath * rng.gen_range(-1.0..1.0)) * gain).clamp(-1.0, 1.0) as f32)
        .collect()
}

/// Long background recording: coloured noise with a slow hum.
pub fn render_noise(seed: u64, index: usize, seconds: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise", index as u64));
    let alpha = [0.0, 0.9, 0.98][index % 3];
    let hum = rng.gen_range(50.0..120.0);
    let mut state = 0.0f64;
    (0..seconds * CLIP_SAMPLES)
        .map(|n| {
            state = alpha * state + (1.0 - alpha) * rng.gen_range(-1.0..1.0);
            let h = 0.05 * (2.0 * PI * hum * n as f64 / SAMPLE_RATE as f64).sin();
            ((state * if alpha > 0.0 { 3.0 } else { 0.3 } + h) * 0.3) as f32
        })
        .collect()
}

/// Summary of a generated corpus.
#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub utterances: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn speaker_tag(seed: u64, index: usize) -> String {
    format!("{:08x}", derive_seed(seed, "speaker-tag", index as u64) as u32)
}

/// Writes a corpus under `root`: one directory per word, a background-noise
/// directory and split lists derived from [`hash_split`].
pub fn generate_corpus(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthSummary> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut val_list = String::new();
    let mut test_list = String::new();
    let mut counts = [0usize; 3];
    let keywords = CLASS_NAMES[..UNKNOWN].iter().map(|w| (w.to_string(), cfg.takes_per_word));
    let unknown = cfg.unknown_words.iter().map(|w| (w.clone(), 1));
    for (word, takes) in keywords.chain(unknown) {
        let dir = root.join(&word);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in 0..cfg.speakers {
            for take in 0..takes {
                let name = format!("{}_nohash_{take}.wav", speaker_tag(cfg.seed, s));
                let wave = render_word(&word, cfg.seed, s, take as u64, cfg);
                AudioClip::new(wave, SAMPLE_RATE)?.write_wav(dir.join(&name))?;
                let id = format!("{word}/{name}\n");
                match hash_split(&name, cfg.validation_percentage, cfg.testing_percentage) {
                    Split::Val => {
                        val_list.push_str(&id);
                        counts[1] += 1;
                    }
                    Split::Test => {
                        test_list.push_str(&id);
                        counts[2] += 1;
                    }
                    Split::Train => counts[0] += 1,
                }
            }
        }
    }
    let noise_dir = root.join(NOISE_DIR);
    std::fs::create_dir_all(&noise_dir).map_err(|e| Error::io(&noise_dir, e))?;
    for k in 0..cfg.noise_files {
        let wave = render_noise(cfg.seed, k, cfg.noise_seconds);
        AudioClip::new(wave, SAMPLE_RATE)?.write_wav(noise_dir.join(format!("noise_{k}.wav")))?;
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("validation_list.txt", &val_list)?;
    write("testing_list.txt", &test_list)?;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        utterances: counts.iter().sum(),
        train: counts[0],
        val: counts[1],
        test: counts[2],
    })
}

/// Teacher frames produced by [`teacher_embedding`] for a 1 s clip.
pub const SYNTH_TEACHER_FRAMES: usize = 49;

/// Stand-in teacher: each of 49 frames averages two or three log-mel frames
/// and maps them through a fixed random `tanh` layer to 768 dimensions.
pub fn teacher_embedding(wave: &[f32], projection: &[f32], frontend: &LogMel) -> Result<TeacherEmbedding> {
    let clip = AudioClip::new(wave.to_vec(), SAMPLE_RATE)?;
    let mut spec = frontend.compute(&clip);
    spec.normalize();
    let mels = spec.n_mels;
    let mut data = Vec::with_capacity(SYNTH_TEACHER_FRAMES * TEACHER_DIM);
    for f in 0..SYNTH_TEACHER_FRAMES {
        let lo = f * spec.frames / SYNTH_TEACHER_FRAMES;
        let hi = ((f + 1) * spec.frames / SYNTH_TEACHER_FRAMES).max(lo + 1);
        let mut pooled = vec![0.0f32; mels];
        for t in lo..hi {
            for (p, v) in pooled.iter_mut().zip(spec.frame(t)) {
                *p += v / (hi - lo) as f32;
            }
        }
        for j in 0..TEACHER_DIM {
            let z: f32 = (0..mels).map(|m| pooled[m] * projection[m * TEACHER_DIM + j]).sum();
            data.push(z.tanh());
        }
    }
    TeacherEmbedding::new(SYNTH_TEACHER_FRAMES, data)
}

/// Fixed random projection used by [`teacher_embedding`].
pub fn teacher_projection(seed: u64, mels: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "teacher", 0));
    let scale = 1.0 / (mels as f32).sqrt();
    (0..mels * TEACHER_DIM).map(|_| rng.gen_range(-1.7f32..1.7) * scale).collect()
}

/// Writes a stand-in teacher store covering every non-silence entry of
/// `manifest`.
pub fn write_teacher_store(manifest: &super::DatasetManifest, path: impl AsRef<Path>, seed: u64) -> Result<usize> {
    let frontend = LogMel::new(FrontendConfig::default())?;
    let projection = teacher_projection(seed, frontend.config().n_mels);
    let mut w = TeacherStoreWriter::create(path)?;
    let mut n = 0;
    for e in manifest.entries.iter().filter(|e| e.offset.is_none()) {
        let wave = AudioClip::from_wav(&e.path)?.fixed_length().into_samples();
        w.append(&e.id, &teacher_embedding(&wave, &projection, &frontend)?)?;
        n += 1;
    }
    w.finish()?;
    Ok(n)
}
