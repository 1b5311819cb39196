//! Waveform → 40-bin log-mel spectrogram.
//!
//! 25 ms periodic Hann window zero-padded to a 512-point FFT, 10 ms hop,
//! centred frames with reflect padding, power spectrum, 40 triangular filters
//! on the HTK mel scale between 20 Hz and 7.6 kHz with Slaney area
//! normalisation, natural log with a floor of 1e-10. A one-second clip yields
//! 101 centred frames; the last one is dropped so every utterance is 100×40.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 16_000;
pub const N_MELS: usize = 40;
pub const N_FRAMES: usize = 100;

/// Mono audio at 16 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz (no resampling)"
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Zero-pads on the right or truncates to exactly one second.
    pub fn fixed_length(mut self) -> Self {
        self.samples.resize(CLIP_SAMPLES, 0.0);
        self
    }

    /// Reads a 16 kHz mono 16-bit PCM WAV file.
    pub fn from_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Audio(format!(
                "{}: need mono 16-bit PCM, got {} channel(s), {}-bit {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| wav_error(path, e))?;
        Self::new(samples, spec.sample_rate)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
    }

    /// Writes the clip as 16 kHz mono 16-bit PCM, clipping to [−1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Audio(format!("{}: {other}", path.display())),
    }
}

/// Feature-extraction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub frames: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            n_mels: N_MELS,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-10,
            frames: N_FRAMES,
        }
    }
}

/// `frames × n_mels` log energies, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn get(&self, frame: usize, mel: usize) -> f32 {
        self.data[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    /// Standardises all cells of the utterance to zero mean and unit
    /// variance. A constant spectrogram becomes all zeros.
    pub fn normalize(&mut self) {
        let n = self.data.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        let inv = if std > 1e-6 { 1.0 / std } else { 0.0 };
        for v in &mut self.data {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Corner frequencies of the mel filters: `n_mels + 2` points, filter `m`
/// spans points `m..=m+2` and peaks at point `m + 1`.
pub fn mel_points(cfg: &FrontendConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Log-mel extractor with a cached FFT plan, window and filterbank.
pub struct LogMel {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl LogMel {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        if cfg.win_length > cfg.n_fft || cfg.hop_length == 0 || cfg.n_mels == 0 {
            return Err(Error::Config("inconsistent frontend configuration".into()));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_min < cfg.f_max && cfg.f_max <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config("mel band must lie within [0, Nyquist]".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);

        // Periodic Hann, centred inside the FFT frame.
        let mut window = vec![0.0; cfg.n_fft];
        let offset = (cfg.n_fft - cfg.win_length) / 2;
        for i in 0..cfg.win_length {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64;
            window[offset + i] = 0.5 - 0.5 * phase.cos();
        }

        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = SAMPLE_RATE as f64 / cfg.n_fft as f64;
        let pts = mel_points(&cfg);
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, centre, right) = (pts[m], pts[m + 1], pts[m + 2]);
                let area = 2.0 / (right - left);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = ((f - left) / (centre - left)).min((right - f) / (right - centre));
                        (w > 0.0).then_some((k, w * area))
                    })
                    .collect();
                let start = weights.first().map_or(0, |&(k, _)| k);
                (start, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Power spectra of the centred STFT frames, `frames × (n_fft/2 + 1)`.
    pub fn power_frames(&self, samples: &[f32]) -> Vec<Vec<f64>> {
        let n_fft = self.cfg.n_fft;
        let half = n_fft / 2;
        let padded = reflect_pad(samples, half);
        let n_frames = if padded.len() >= n_fft {
            1 + (padded.len() - n_fft) / self.cfg.hop_length
        } else {
            0
        };
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        (0..n_frames)
            .map(|f| {
                let start = f * self.cfg.hop_length;
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = Complex::new(padded[start + i] * self.window[i], 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                buf[..=half].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect()
    }

    /// Log-mel features of a 16 kHz clip, padded or truncated to one second.
    pub fn compute(&self, clip: &AudioClip) -> LogMelSpectrogram {
        let mut samples = clip.samples().to_vec();
        samples.resize(CLIP_SAMPLES, 0.0);
        self.compute_samples(&samples)
    }

    fn compute_samples(&self, samples: &[f32]) -> LogMelSpectrogram {
        let n_mels = self.cfg.n_mels;
        let frames = self.cfg.frames;
        let power = self.power_frames(samples);
        let floor_log = self.cfg.log_floor.ln() as f32;
        let mut data = vec![floor_log; frames * n_mels];
        for (f, spectrum) in power.iter().take(frames).enumerate() {
            for (m, (start, weights)) in self.filters.iter().enumerate() {
                let energy: f64 = weights
                    .iter()
                    .zip(&spectrum[*start..])
                    .map(|(w, p)| w * p)
                    .sum();
                data[f * n_mels + m] = energy.max(self.cfg.log_floor).ln() as f32;
            }
        }
        LogMelSpectrogram {
            frames,
            n_mels,
            data,
        }
    }
}

fn reflect_pad(samples: &[f32], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let at = |i: isize| -> f64 {
        if n == 1 {
            return samples[0] as f64;
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        samples[j as usize] as f64
    };
    if n == 0 {
        return vec![0.0; 2 * pad];
    }
    (-(pad as isize)..(n + pad) as isize).map(at).collect()
}

/// Convenience: default frontend on a clip.
pub fn log_mel(clip: &AudioClip, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    Ok(LogMel::new(cfg.clone())?.compute(clip))
}
