//! Log-Mel filterbank frontend: 80-dim features at a 10ms frame rate.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const N_FFT: usize = 512;

#[derive(Debug, Clone)]
pub struct MelFrontendConfig {
    pub sample_rate: usize,
    pub n_mels: usize,
    /// Frame hop in samples (10 ms).
    pub hop: usize,
    /// Analysis window in samples (25 ms).
    pub window: usize,
    /// Natural-log clamp applied to filterbank energies.
    pub floor: f64,
}

impl Default for MelFrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 80,
            hop: 160,
            window: 400,
            floor: -11.5,
        }
    }
}

impl MelFrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels < 1 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        if self.hop > self.window {
            return Err(Error::Config(format!(
                "hop {} exceeds window {}",
                self.hop, self.window
            )));
        }
        if self.window > N_FFT {
            return Err(Error::Config(format!(
                "window {} exceeds FFT size {N_FFT}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.window {
            return Err(Error::InputTooShort(format!(
                "{n_samples} samples is shorter than the {}-sample analysis window",
                self.window
            )));
        }
        Ok(1 + (n_samples - self.window) / self.hop)
    }
}

#[derive(Debug, Clone)]
pub struct AudioFeatures {
    /// [T, n_mels]
    pub frames: Tensor,
    pub duration_ms: f64,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank over the magnitude-spectrum bins.
/// Row i holds filter i's weight for each of the n_fft/2+1 bins.
pub fn mel_filterbank(cfg: &MelFrontendConfig) -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let f_max = cfg.sample_rate as f64 / 2.0;
    let mel_pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / N_FFT as f64;
    let mut bank = vec![vec![0.0; n_bins]; cfg.n_mels];
    for (i, row) in bank.iter_mut().enumerate() {
        let (lo, center, hi) = (mel_pts[i], mel_pts[i + 1], mel_pts[i + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_hz(k);
            if f > lo && f < hi {
                *w = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
            }
        }
    }
    bank
}

/// Center frequency (Hz) of each mel filter, for test oracles.
pub fn filter_centers_hz(cfg: &MelFrontendConfig) -> Vec<f64> {
    let f_max = cfg.sample_rate as f64 / 2.0;
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// waveform (16 kHz samples) -> [T, n_mels] log-Mel features.
/// Per frame: Hann window, magnitude spectrum, triangular mel filters,
/// natural log clamped at the floor.
pub fn log_mel(cfg: &MelFrontendConfig, waveform: &[f64]) -> Result<AudioFeatures> {
    cfg.validate()?;
    let t = cfg.frame_count(waveform.len())?;
    let hann: Vec<f64> = (0..cfg.window)
        .map(|n| {
            0.5 - 0.5
                * (2.0 * std::f64::consts::PI * n as f64 / (cfg.window - 1) as f64).cos()
        })
        .collect();
    let bank = mel_filterbank(cfg);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let n_bins = N_FFT / 2 + 1;
    let mut out = vec![0.0; t * cfg.n_mels];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for frame in 0..t {
        let start = frame * cfg.hop;
        for (n, c) in buf.iter_mut().enumerate() {
            *c = if n < cfg.window {
                Complex::new(waveform[start + n] * hann[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm()).collect();
        for (i, filter) in bank.iter().enumerate() {
            let energy: f64 = filter.iter().zip(&mags).map(|(&w, &m)| w * m).sum();
            out[frame * cfg.n_mels + i] = energy.ln().max(cfg.floor);
        }
    }
    Ok(AudioFeatures {
        frames: Tensor::new(vec![t, cfg.n_mels], out)?,
        duration_ms: waveform.len() as f64 * 1000.0 / cfg.sample_rate as f64,
    })
}
