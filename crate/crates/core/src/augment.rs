//! Randomised waveform and spectrogram augmentations.
//!
//! Waveform ops: pre-emphasis, de-emphasis, pitch shift, notch/peak EQ and
//! background-noise mixing. Spectrogram ops: frequency masks and cutout
//! rectangles, applied after per-utterance normalisation so the fill value 0
//! is neutral. Every random decision is returned in an [`AugmentRecord`].

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{LogMelSpectrogram, SAMPLE_RATE};

/// Sampling ranges and per-op application probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub coef_range: [f32; 2],
    pub pitch_steps_range: [i32; 2],
    pub snr_db_range: [f32; 2],
    pub eq_center_range: [f32; 2],
    pub eq_q_range: [f32; 2],
    pub peak_gain_db: f32,
    pub max_freq_mask: usize,
    pub max_cutout_freq: usize,
    pub max_cutout_time: usize,
    pub p_pre_emphasis: f64,
    pub p_de_emphasis: f64,
    pub p_pitch_shift: f64,
    pub p_eq: f64,
    pub p_noise: f64,
    pub p_freq_mask: f64,
    pub p_cutout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            coef_range: [0.95, 0.99],
            pitch_steps_range: [-5, 5],
            snr_db_range: [-5.0, 15.0],
            eq_center_range: [100.0, 7000.0],
            eq_q_range: [1.0, 5.0],
            peak_gain_db: 6.0,
            max_freq_mask: 10,
            max_cutout_freq: 10,
            max_cutout_time: 10,
            p_pre_emphasis: 0.5,
            p_de_emphasis: 0.5,
            p_pitch_shift: 0.5,
            p_eq: 0.5,
            p_noise: 0.5,
            p_freq_mask: 0.5,
            p_cutout: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Configuration that never applies anything.
    pub fn disabled() -> Self {
        Self {
            p_pre_emphasis: 0.0,
            p_de_emphasis: 0.0,
            p_pitch_shift: 0.0,
            p_eq: 0.0,
            p_noise: 0.0,
            p_freq_mask: 0.0,
            p_cutout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.coef_range[0] <= self.coef_range[1]
            && self.pitch_steps_range[0] <= self.pitch_steps_range[1]
            && self.snr_db_range[0] <= self.snr_db_range[1]
            && self.eq_center_range[0] <= self.eq_center_range[1]
            && self.eq_q_range[0] <= self.eq_q_range[1];
        let probs = [
            self.p_pre_emphasis,
            self.p_de_emphasis,
            self.p_pitch_shift,
            self.p_eq,
            self.p_noise,
            self.p_freq_mask,
            self.p_cutout,
        ];
        if !ordered {
            return Err(Error::Config("augmentation ranges must be non-empty".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.eq_center_range[1] >= SAMPLE_RATE as f32 / 2.0 || self.eq_center_range[0] <= 0.0 {
            return Err(Error::Config("EQ centre range must lie inside (0, Nyquist)".into()));
        }
        Ok(())
    }
}

/// `y[0] = x[0]`, `y[n] = x[n] − coef·x[n−1]`.
pub fn pre_emphasize(wave: &[f32], coef: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(wave.len());
    let mut prev = 0.0f64;
    for (n, &x) in wave.iter().enumerate() {
        let x = x as f64;
        out.push(if n == 0 { x } else { x - coef as f64 * prev } as f32);
        prev = x;
    }
    out
}

/// `y[n] = x[n] + coef·y[n−1]`, the inverse of [`pre_emphasize`].
pub fn de_emphasize(wave: &[f32], coef: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(wave.len());
    let mut prev = 0.0f64;
    for &x in wave {
        let y = x as f64 + coef as f64 * prev;
        out.push(y as f32);
        prev = y;
    }
    out
}

const PV_FFT: usize = 512;
const PV_HOP: usize = 128;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(x: &[f64], i: isize) -> f64 {
    let n = x.len() as isize;
    if n == 1 {
        return x[0];
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    x[j as usize]
}

/// Phase-vocoder time stretch; `rate > 1` shortens the signal.
fn time_stretch(wave: &[f64], rate: f64) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(PV_FFT);
    let inv = planner.plan_fft_inverse(PV_FFT);
    let window = hann(PV_FFT);
    let half = PV_FFT / 2;
    let bins = half + 1;

    let n_frames = 1 + wave.len() / PV_HOP;
    let mut spec: Vec<Vec<Complex<f64>>> = (0..n_frames)
        .map(|f| {
            let start = (f * PV_HOP) as isize - half as isize;
            let mut buf: Vec<Complex<f64>> = (0..PV_FFT)
                .map(|i| Complex::new(reflect(wave, start + i as isize) * window[i], 0.0))
                .collect();
            fwd.process(&mut buf);
            buf.truncate(bins);
            buf
        })
        .collect();
    spec.push(vec![Complex::new(0.0, 0.0); bins]);

    let advance: Vec<f64> = (0..bins)
        .map(|k| 2.0 * PI * k as f64 * PV_HOP as f64 / PV_FFT as f64)
        .collect();
    let mut phase: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();
    let mut frames = Vec::new();
    let mut step = 0.0f64;
    while step < n_frames as f64 {
        let left = step.floor() as usize;
        let alpha = step - left as f64;
        let (l, r) = (&spec[left], &spec[left + 1]);
        let frame: Vec<Complex<f64>> = (0..bins)
            .map(|k| {
                let mag = (1.0 - alpha) * l[k].norm() + alpha * r[k].norm();
                Complex::from_polar(mag, phase[k])
            })
            .collect();
        for k in 0..bins {
            let mut d = r[k].arg() - l[k].arg() - advance[k];
            d -= 2.0 * PI * (d / (2.0 * PI)).round();
            phase[k] += advance[k] + d;
        }
        frames.push(frame);
        step += rate;
    }

    // Overlap-add with squared-window normalisation, then drop the centring pad.
    let out_len = (wave.len() as f64 / rate).round() as usize;
    let total = PV_FFT + PV_HOP * (frames.len().saturating_sub(1));
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let mut buf = vec![Complex::new(0.0, 0.0); PV_FFT];
    for (f, frame) in frames.iter().enumerate() {
        buf[..bins].copy_from_slice(frame);
        for k in 1..half {
            buf[PV_FFT - k] = frame[k].conj();
        }
        inv.process(&mut buf);
        let start = f * PV_HOP;
        for i in 0..PV_FFT {
            acc[start + i] += buf[i].re / PV_FFT as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..out_len)
        .map(|i| {
            let j = i + half;
            if j < total && norm[j] > 1e-8 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Shifts pitch by `n_steps` semitones while keeping the length: a phase
/// vocoder stretches time by `2^(n/12)`, then linear-interpolation resampling
/// restores the duration.
pub fn pitch_shift(wave: &[f32], n_steps: i32) -> Vec<f32> {
    if n_steps == 0 || wave.is_empty() {
        return wave.to_vec();
    }
    let ratio = 2f64.powf(n_steps as f64 / 12.0);
    let x: Vec<f64> = wave.iter().map(|&v| v as f64).collect();
    let stretched = time_stretch(&x, 1.0 / ratio);
    (0..wave.len())
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = stretched.get(j).copied().unwrap_or(0.0);
            let b = stretched.get(j + 1).copied().unwrap_or(0.0);
            (a + frac * (b - a)) as f32
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EqMode {
    Notch,
    Peak,
}

/// Second-order notch or peaking filter (RBJ cookbook). `gain_db` is used
/// only in peak mode.
pub fn eq_filter(wave: &[f32], mode: EqMode, center_hz: f32, q: f32, gain_db: f32) -> Result<Vec<f32>> {
    let nyquist = SAMPLE_RATE as f32 / 2.0;
    if !(center_hz > 0.0 && center_hz < nyquist) {
        return Err(Error::contract(format!(
            "EQ centre {center_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if !(q > 0.0) {
        return Err(Error::contract("EQ quality factor must be positive"));
    }
    let w0 = 2.0 * PI * center_hz as f64 / SAMPLE_RATE as f64;
    let alpha = w0.sin() / (2.0 * q as f64);
    let cos = w0.cos();
    let (b, a) = match mode {
        EqMode::Notch => ([1.0, -2.0 * cos, 1.0], [1.0 + alpha, -2.0 * cos, 1.0 - alpha]),
        EqMode::Peak => {
            let g = 10f64.powf(gain_db as f64 / 40.0);
            (
                [1.0 + alpha * g, -2.0 * cos, 1.0 - alpha * g],
                [1.0 + alpha / g, -2.0 * cos, 1.0 - alpha / g],
            )
        }
    };
    let (b0, b1, b2) = (b[0] / a[0], b[1] / a[0], b[2] / a[0]);
    let (a1, a2) = (a[1] / a[0], a[2] / a[0]);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    Ok(wave
        .iter()
        .map(|&x| {
            let x = x as f64;
            let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y as f32
        })
        .collect())
}

fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}

/// Noise gain `g` such that `10·log10(p_wave / (g²·p_noise)) = snr_db`.
pub fn noise_gain(p_wave: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_wave / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// Adds `noise` (already cropped, at least as long as `wave`) at `snr_db`
/// and clips to [−1, 1].
///
/// An all-zero `wave` has no defined SNR; the noise is then returned
/// peak-normalised to 0 dBFS. An all-zero `noise` leaves `wave` unchanged.
pub fn mix_noise(wave: &[f32], noise: &[f32], snr_db: f32) -> Result<Vec<f32>> {
    if noise.len() < wave.len() {
        return Err(Error::contract(format!(
            "noise has {} samples, signal {}",
            noise.len(),
            wave.len()
        )));
    }
    let noise = &noise[..wave.len()];
    let (pw, pn) = (power(wave), power(noise));
    if pn == 0.0 {
        return Ok(wave.to_vec());
    }
    if pw == 0.0 {
        let peak = noise.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        return Ok(noise.iter().map(|&v| v / peak).collect());
    }
    let g = noise_gain(pw, pn, snr_db as f64);
    Ok(wave
        .iter()
        .zip(noise)
        .map(|(&s, &n)| ((s as f64 + g * n as f64) as f32).clamp(-1.0, 1.0))
        .collect())
}

/// A zeroed rectangle of a spectrogram (half-open ranges).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub mels: Range<usize>,
    pub frames: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Up to `max_freq_mask` contiguous mel bins across all frames.
    Freq,
    /// Up to `max_cutout_freq` bins × `max_cutout_time` frames.
    Cutout,
}

/// Draws a mask of `kind` for an `n_frames × n_mels` spectrogram.
pub fn draw_mask(
    kind: MaskKind,
    n_frames: usize,
    n_mels: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Mask {
    let span = |max: usize, len: usize, rng: &mut dyn rand::RngCore| {
        let width = rng.gen_range(0..=max.min(len));
        let start = rng.gen_range(0..=len - width);
        start..start + width
    };
    match kind {
        MaskKind::Freq => Mask {
            mels: span(cfg.max_freq_mask, n_mels, rng),
            frames: 0..n_frames,
        },
        MaskKind::Cutout => {
            let mels = span(cfg.max_cutout_freq, n_mels, rng);
            let frames = span(cfg.max_cutout_time, n_frames, rng);
            Mask { mels, frames }
        }
    }
}

/// Sets every cell inside `mask` to 0.
pub fn apply_mask(spec: &mut LogMelSpectrogram, mask: &Mask) {
    for f in mask.frames.clone().filter(|&f| f < spec.frames) {
        for m in mask.mels.clone().filter(|&m| m < spec.n_mels) {
            spec.data[f * spec.n_mels + m] = 0.0;
        }
    }
}

/// Draws and applies one mask; returns what was masked.
pub fn spec_mask(
    spec: &mut LogMelSpectrogram,
    kind: MaskKind,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Mask {
    let mask = draw_mask(kind, spec.frames, spec.n_mels, cfg, rng);
    apply_mask(spec, &mask);
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqDecision {
    pub mode: EqMode,
    pub center_hz: f32,
    pub q: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDecision {
    pub snr_db: f32,
    /// Index into the noise bank.
    pub source: usize,
    pub offset: usize,
}

/// Everything [`augment_utterance`] decided for one clip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub pre_emphasis: Option<f32>,
    pub de_emphasis: Option<f32>,
    pub pitch_steps: Option<i32>,
    pub eq: Option<EqDecision>,
    pub noise: Option<NoiseDecision>,
    /// Spectrogram masks to apply after feature extraction and normalisation.
    pub masks: Vec<Mask>,
}

impl AugmentRecord {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    /// Whether the waveform keeps its time alignment with the clean clip.
    pub fn preserves_timing(&self) -> bool {
        self.pitch_steps.is_none_or(|s| s == 0)
    }
}

/// Applies each waveform op independently with its configured probability,
/// in the order pre-emphasis, de-emphasis, pitch shift, EQ, noise, and plans
/// the spectrogram masks. Noise is only considered when `noise_bank` holds a
/// source at least as long as the clip.
pub fn augment_utterance(
    wave: &[f32],
    cfg: &AugmentConfig,
    noise_bank: &[Vec<f32>],
    n_frames: usize,
    n_mels: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, AugmentRecord)> {
    let mut out = wave.to_vec();
    let mut rec = AugmentRecord::default();

    if rng.gen_bool(cfg.p_pre_emphasis) {
        let c = rng.gen_range(cfg.coef_range[0]..=cfg.coef_range[1]);
        out = pre_emphasize(&out, c);
        rec.pre_emphasis = Some(c);
    }
    if rng.gen_bool(cfg.p_de_emphasis) {
        let c = rng.gen_range(cfg.coef_range[0]..=cfg.coef_range[1]);
        out = de_emphasize(&out, c);
        rec.de_emphasis = Some(c);
    }
    if rng.gen_bool(cfg.p_pitch_shift) {
        let s = rng.gen_range(cfg.pitch_steps_range[0]..=cfg.pitch_steps_range[1]);
        out = pitch_shift(&out, s);
        rec.pitch_steps = Some(s);
    }
    if rng.gen_bool(cfg.p_eq) {
        let mode = if rng.gen_bool(0.5) { EqMode::Notch } else { EqMode::Peak };
        let center_hz = rng.gen_range(cfg.eq_center_range[0]..=cfg.eq_center_range[1]);
        let q = rng.gen_range(cfg.eq_q_range[0]..=cfg.eq_q_range[1]);
        out = eq_filter(&out, mode, center_hz, q, cfg.peak_gain_db)?;
        rec.eq = Some(EqDecision { mode, center_hz, q });
    }
    let usable: Vec<usize> = (0..noise_bank.len())
        .filter(|&i| noise_bank[i].len() >= out.len())
        .collect();
    if !usable.is_empty() && rng.gen_bool(cfg.p_noise) {
        let source = usable[rng.gen_range(0..usable.len())];
        let offset = rng.gen_range(0..=noise_bank[source].len() - out.len());
        let snr_db = rng.gen_range(cfg.snr_db_range[0]..=cfg.snr_db_range[1]);
        out = mix_noise(&out, &noise_bank[source][offset..], snr_db)?;
        rec.noise = Some(NoiseDecision { snr_db, source, offset });
    }
    if rng.gen_bool(cfg.p_freq_mask) {
        rec.masks.push(draw_mask(MaskKind::Freq, n_frames, n_mels, cfg, rng));
    }
    if rng.gen_bool(cfg.p_cutout) {
        rec.masks.push(draw_mask(MaskKind::Cutout, n_frames, n_mels, cfg, rng));
    }
    Ok((out, rec))
}

/// Stable 64-bit seed from a global seed, an utterance id and a salt.
pub fn derive_seed(global: u64, id: &str, salt: u64) -> u64 {
    // FNV-1a over the id, then splitmix64 finalisation of the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ global.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize) -> Vec<f32> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * 0.5)
            .collect()
    }

    fn rms(x: &[f32]) -> f64 {
        power(x).sqrt()
    }

    /// Frequency of the largest-magnitude bin of a full-length DFT.
    fn peak_hz(x: &[f32]) -> f64 {
        let n = x.len();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft.process(&mut buf);
        let k = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        k as f64 * SAMPLE_RATE as f64 / n as f64
    }

    #[test]
    fn emphasis_reference_values() {
        assert_eq!(pre_emphasize(&[1.0, 0.0, 0.0], 0.97), vec![1.0, -0.97, 0.0]);
        let y = pre_emphasize(&[1.0; 4], 0.95);
        assert_eq!(y[0], 1.0);
        assert!(y[1..].iter().all(|v| (v - 0.05).abs() < 1e-7));
        let d = de_emphasize(&[1.0, 0.0, 0.0], 0.97);
        assert!((d[1] - 0.97).abs() < 1e-7 && (d[2] - 0.9409).abs() < 1e-7);
        assert_eq!(de_emphasize(&[0.0; 5], 0.97), vec![0.0; 5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn emphasis_pair_is_an_exact_inverse(
            wave in proptest::collection::vec(-1.0f32..1.0, 1..400),
            coef in 0.95f32..=0.99,
        ) {
            let a = de_emphasize(&pre_emphasize(&wave, coef), coef);
            let b = pre_emphasize(&de_emphasize(&wave, coef), coef);
            for ((x, y), z) in wave.iter().zip(&a).zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
                prop_assert!((x - z).abs() < 1e-6);
            }
        }

        #[test]
        fn masks_never_touch_other_cells(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..100 * 40).map(|i| (i as f32).sin() + 2.0).collect();
            let mut spec = LogMelSpectrogram { frames: 100, n_mels: 40, data: data.clone() };
            let cfg = AugmentConfig::default();
            let kind = if seed % 2 == 0 { MaskKind::Freq } else { MaskKind::Cutout };
            let mask = spec_mask(&mut spec, kind, &cfg, &mut rng);
            prop_assert!(mask.mels.len() <= 10);
            if kind == MaskKind::Cutout { prop_assert!(mask.frames.len() <= 10); }
            for f in 0..100 {
                for m in 0..40 {
                    let inside = mask.frames.contains(&f) && mask.mels.contains(&m);
                    let v = spec.data[f * 40 + m];
                    if inside { prop_assert_eq!(v, 0.0); } else { prop_assert_eq!(v.to_bits(), data[f * 40 + m].to_bits()); }
                }
            }
        }

        #[test]
        fn waveform_ops_preserve_length(len in 1usize..3000, steps in -5i32..=5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wave: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
            prop_assert_eq!(pitch_shift(&wave, steps).len(), len);
            prop_assert_eq!(eq_filter(&wave, EqMode::Peak, 1000.0, 2.0, 6.0).unwrap().len(), len);
            let bank = vec![vec![0.1f32; len + 10]];
            let (out, _) = augment_utterance(&wave, &AugmentConfig::default(), &bank, 100, 40, &mut rng).unwrap();
            prop_assert_eq!(out.len(), len);
        }
    }

    #[test]
    fn pitch_shift_zero_is_identity() {
        let w = sine(440.0, 16_000);
        assert_eq!(pitch_shift(&w, 0), w);
    }

    #[test]
    fn pitch_shift_moves_the_spectral_peak() {
        let w = sine(440.0, 16_000);
        for (steps, target) in [(5, 440.0 * 2f64.powf(5.0 / 12.0)), (-5, 440.0 * 2f64.powf(-5.0 / 12.0))] {
            let shifted = pitch_shift(&w, steps);
            let got = peak_hz(&shifted);
            assert!((got - target).abs() <= 1.0, "{steps} steps: peak {got} Hz, want {target}");
        }
    }

    #[test]
    fn notch_suppresses_centre_and_passes_far_tones() {
        let on = sine(1000.0, 16_000);
        let y = eq_filter(&on, EqMode::Notch, 1000.0, 2.0, 0.0).unwrap();
        assert!(rms(&y[4000..]) < 0.2 * rms(&on[4000..]));
        let off = sine(100.0, 16_000);
        let y = eq_filter(&off, EqMode::Notch, 1000.0, 2.0, 0.0).unwrap();
        let ratio = rms(&y[4000..]) / rms(&off[4000..]);
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn peak_mode_boosts_centre_and_is_linear() {
        assert_eq!(eq_filter(&[0.0; 64], EqMode::Peak, 1000.0, 2.0, 6.0).unwrap(), vec![0.0; 64]);
        let on = sine(1000.0, 16_000);
        let y = eq_filter(&on, EqMode::Peak, 1000.0, 2.0, 6.0).unwrap();
        let gain_db = 20.0 * (rms(&y[4000..]) / rms(&on[4000..])).log10();
        assert!((gain_db - 6.0).abs() < 0.2, "{gain_db}");
    }

    #[test]
    fn eq_rejects_centre_at_or_above_nyquist() {
        assert!(eq_filter(&[0.0; 4], EqMode::Notch, 8000.0, 1.0, 0.0).is_err());
        assert!(eq_filter(&[0.0; 4], EqMode::Notch, 9000.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn noise_gain_reference_values() {
        assert!((noise_gain(1.0, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((noise_gain(1.0, 1.0, 15.0) - 10f64.powf(-15.0 / 20.0)).abs() < 1e-12);
        assert!((noise_gain(1.0, 1.0, 15.0) - 0.1778).abs() < 1e-4);
    }

    #[test]
    fn mix_noise_hits_requested_snr() {
        let wave = sine(300.0, 8000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..9000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mixed = mix_noise(&wave, &noise, 5.0).unwrap();
        let residual: Vec<f32> = mixed.iter().zip(&wave).map(|(m, w)| m - w).collect();
        let snr = 10.0 * (power(&wave) / power(&residual)).log10();
        assert!((snr - 5.0).abs() < 1e-3, "{snr}");
        assert!(mixed.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn mix_noise_edge_cases() {
        let wave = sine(300.0, 100);
        assert_eq!(mix_noise(&wave, &[0.0; 100], 0.0).unwrap(), wave);
        let noise: Vec<f32> = (0..100).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
        let out = mix_noise(&[0.0; 100], &noise, 0.0).unwrap();
        let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-6);
        assert!(mix_noise(&wave, &noise[..50], 0.0).is_err());
    }

    #[test]
    fn mask_reference_cases() {
        let base = LogMelSpectrogram { frames: 100, n_mels: 40, data: vec![1.5; 4000] };
        let mut s = base.clone();
        apply_mask(&mut s, &Mask { mels: 3..3, frames: 0..100 });
        assert_eq!(s, base);
        let mut s = base.clone();
        apply_mask(&mut s, &Mask { mels: 5..10, frames: 0..100 });
        for f in 0..100 {
            for m in 0..40 {
                let v = s.get(f, m);
                if (5..10).contains(&m) { assert_eq!(v, 0.0) } else { assert_eq!(v, 1.5) }
            }
        }
        let mut s = base.clone();
        apply_mask(&mut s, &Mask { mels: 0..10, frames: 0..10 });
        assert_eq!(s.data.iter().filter(|&&v| v == 0.0).count(), 100);
    }

    #[test]
    fn zero_width_draw_is_identity() {
        let cfg = AugmentConfig { max_freq_mask: 0, max_cutout_freq: 0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = LogMelSpectrogram { frames: 100, n_mels: 40, data: vec![0.7; 4000] };
        let mut s = base.clone();
        spec_mask(&mut s, MaskKind::Freq, &cfg, &mut rng);
        spec_mask(&mut s, MaskKind::Cutout, &cfg, &mut rng);
        assert_eq!(s, base);
    }

    #[test]
    fn all_failed_coin_flips_give_identity_plan() {
        let wave = sine(500.0, 16_000);
        let bank = vec![sine(77.0, 20_000)];
        let cfg = AugmentConfig::default();
        let seed = (0..10_000u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..7).all(|_| !rng.gen_bool(0.5))
            })
            .expect("some seed fails every flip");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, rec) = augment_utterance(&wave, &cfg, &bank, 100, 40, &mut rng).unwrap();
        assert!(rec.is_identity());
        assert_eq!(out, wave);
    }

    #[test]
    fn same_seed_same_record() {
        let wave = sine(500.0, 16_000);
        let bank = vec![sine(77.0, 20_000)];
        let cfg = AugmentConfig { p_pitch_shift: 1.0, p_noise: 1.0, ..AugmentConfig::default() };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_utterance(&wave, &cfg, &bank, 100, 40, &mut rng).unwrap()
        };
        let (a, ra) = run(9);
        let (b, rb) = run(9);
        assert_eq!(a, b);
        assert_eq!(ra.to_json_line(), rb.to_json_line());
        let parsed: AugmentRecord = serde_json::from_str(&ra.to_json_line()).unwrap();
        assert_eq!(parsed, ra);
        assert!(ra.noise.is_some() && ra.pitch_steps.is_some());
    }

    #[test]
    fn snr_draws_stay_in_range() {
        let cfg = AugmentConfig { p_noise: 1.0, ..AugmentConfig::disabled() };
        let bank = vec![vec![0.1f32; 64]];
        let wave = vec![0.2f32; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for _ in 0..10_000 {
            let (_, rec) = augment_utterance(&wave, &cfg, &bank, 100, 40, &mut rng).unwrap();
            let snr = rec.noise.unwrap().snr_db;
            lo = lo.min(snr);
            hi = hi.max(snr);
        }
        assert!(lo >= -5.0 && hi <= 15.0);
        assert!(lo < -4.5 && hi > 14.5);
    }

    #[test]
    fn derived_seeds_differ_by_id_and_salt() {
        let a = derive_seed(1, "yes/a.wav", 0);
        assert_eq!(a, derive_seed(1, "yes/a.wav", 0));
        assert_ne!(a, derive_seed(1, "yes/b.wav", 0));
        assert_ne!(a, derive_seed(1, "yes/a.wav", 1));
        assert_ne!(a, derive_seed(2, "yes/a.wav", 0));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { p_eq: 1.5, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { coef_range: [0.99, 0.95], ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
    }
}
