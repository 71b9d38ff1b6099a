//! Log-mel spectrogram features.
//!
//! Hann-windowed magnitude spectrum → triangular HTK-scale filterbank →
//! `ln(1 + x)`, mean-pooled down to the target frame rate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelParams {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 160,
            n_mels: 40,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Config("mel n_fft, hop and n_mels must be positive".into()));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax) {
            return Err(Error::Config(format!("mel band {}..{} Hz is empty", self.fmin, self.fmax)));
        }
        Ok(())
    }

    /// Number of full STFT frames for `samples` input samples.
    pub fn n_frames(&self, samples: usize) -> usize {
        if samples < self.n_fft {
            0
        } else {
            (samples - self.n_fft) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` band edges in Hz, equally spaced on the mel scale.
fn band_edges(p: &MelParams) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(p.fmin), hz_to_mel(p.fmax));
    (0..p.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.n_mels + 1) as f64))
        .collect()
}

/// Peak frequency of each triangular filter.
pub fn center_frequencies(p: &MelParams) -> Vec<f64> {
    band_edges(p)[1..=p.n_mels].to_vec()
}

/// Filterbank `[n_mels × (n_fft/2 + 1)]`.
pub fn filterbank(p: &MelParams, sample_rate: f64) -> Tensor {
    let bins = p.n_fft / 2 + 1;
    let edges = band_edges(p);
    Tensor::from_fn([p.n_mels, bins], |i| {
        let (m, k) = (i / bins, i % bins);
        let f = k as f64 * sample_rate / p.n_fft as f64;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

fn pool_factor(p: &MelParams, sample_rate: f64, target_rate_hz: f64) -> Result<usize> {
    let ratio = sample_rate / p.hop as f64 / target_rate_hz;
    let pool = libm::round(ratio) as usize;
    if pool == 0 || libm::fabs(ratio - pool as f64) > 1e-9 {
        return Err(Error::Config(format!(
            "frame rate {} Hz (rate {sample_rate} / hop {}) is not an integer multiple of {target_rate_hz} Hz",
            sample_rate / p.hop as f64,
            p.hop
        )));
    }
    Ok(pool)
}

/// Log-mel frames pooled to `target_rate_hz`, before per-bin
/// standardization: `[n_mels × T']`.
pub fn mel_features_raw(audio: &[f64], sample_rate: f64, p: &MelParams, target_rate_hz: f64) -> Result<Tensor> {
    p.validate()?;
    if p.fmax > sample_rate / 2.0 + 1e-9 {
        return Err(Error::Config(format!("fmax {} exceeds Nyquist {}", p.fmax, sample_rate / 2.0)));
    }
    if audio.len() < p.n_fft {
        return Err(Error::TooShort(format!(
            "{} audio samples, need at least n_fft = {}",
            audio.len(),
            p.n_fft
        )));
    }
    let pool = pool_factor(p, sample_rate, target_rate_hz)?;
    let frames = p.n_frames(audio.len());
    let n_out = frames / pool;
    if n_out == 0 {
        return Err(Error::TooShort(format!("{frames} frames cannot be pooled by {pool}")));
    }
    let n = p.n_fft;
    let bins = n / 2 + 1;
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64)).collect();
    let cos_table: Vec<f64> = (0..n).map(|j| libm::cos(2.0 * PI * j as f64 / n as f64)).collect();
    let sin_table: Vec<f64> = (0..n).map(|j| libm::sin(2.0 * PI * j as f64 / n as f64)).collect();
    let fb = filterbank(p, sample_rate);

    let mut frame = vec![0.0; n];
    let mut mag = vec![0.0; bins];
    let mut out = vec![0.0; p.n_mels * n_out];
    for j in 0..n_out * pool {
        let start = j * p.hop;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = audio[start + i] * window[i];
        }
        for (k, m) in mag.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in frame.iter().enumerate() {
                let idx = (k * i) % n;
                re += v * cos_table[idx];
                im -= v * sin_table[idx];
            }
            *m = libm::sqrt(re * re + im * im);
        }
        let slot = j / pool;
        for b in 0..p.n_mels {
            let e: f64 = fb.row(b).iter().zip(&mag).map(|(w, m)| w * m).sum();
            out[b * n_out + slot] += libm::log1p(e) / pool as f64;
        }
    }
    Tensor::new([p.n_mels, n_out], out)
}

/// [`mel_features_raw`] followed by per-bin standardization.
pub fn mel_features(audio: &[f64], sample_rate: f64, p: &MelParams, target_rate_hz: f64) -> Result<Tensor> {
    let raw = mel_features_raw(audio, sample_rate, p, target_rate_hz)?;
    if raw.shape()[1] < 2 {
        return Ok(raw.map(|_| 0.0));
    }
    super::standardize(&raw)
}
