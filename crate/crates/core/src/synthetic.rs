//! Synthetic EEG/audio datasets with a known linear ground truth.
//!
//! A handful of smooth latent sources `s(t)` drive both sides: audio
//! features are `Y = A·s + ε_a` and each subject's EEG is
//! `X = M_subject·s + ε_x`. With both noise terms off, `Y` is an exact
//! linear function of `X` per subject, which makes the decoding problem
//! provably solvable.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{AudioFeatures, EegRecording, SensorLayout, WordAlignment, WordEntry};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    /// EEG channels per subject (excluding the optional VEOG/AUD pair).
    pub channels: usize,
    /// Audio feature dimension.
    pub features: usize,
    /// Number of latent sources; must not exceed `channels`.
    pub sources: usize,
    pub duration_s: f64,
    pub eeg_rate_hz: f64,
    pub feature_rate_hz: f64,
    /// Signal-to-noise ratio applied to both EEG and audio; `None` is
    /// noise-free.
    pub snr_db: Option<f64>,
    /// Cut-off of the latent smoothing filter.
    pub bandwidth_hz: f64,
    /// Spoken words per second.
    pub word_rate_hz: f64,
    pub vocab_size: usize,
    /// Append pure-noise `VEOG` and `AUD` channels.
    pub extra_channels: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 3,
            channels: 16,
            features: 8,
            sources: 8,
            duration_s: 60.0,
            eeg_rate_hz: 500.0,
            feature_rate_hz: 100.0,
            snr_db: None,
            bandwidth_hz: 4.0,
            word_rate_hz: 2.5,
            vocab_size: 200,
            extra_channels: false,
            seed: 0,
        }
    }
}

/// Generator output: one recording per subject plus the shared stimulus.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub recordings: Vec<EegRecording>,
    pub audio: AudioFeatures,
    pub alignment: WordAlignment,
    /// Per-subject mixing matrices `[C × L]`.
    pub mixing: Vec<Tensor>,
    /// Audio projection `[F × L]`.
    pub audio_projection: Tensor,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(String::from(m)));
        if self.channels < 4 {
            return bad("synthetic data needs at least 4 channels");
        }
        if self.features < 2 {
            return bad("synthetic data needs at least 2 features");
        }
        if self.n_subjects == 0 {
            return bad("need at least one subject");
        }
        if self.sources == 0 || self.sources > self.channels {
            return bad("sources must lie in 1..=channels");
        }
        if !(self.duration_s > 0.0 && self.eeg_rate_hz > 0.0 && self.feature_rate_hz > 0.0) {
            return bad("duration and rates must be positive");
        }
        let ratio = self.eeg_rate_hz / self.feature_rate_hz;
        if libm::fabs(ratio - libm::round(ratio)) > 1e-9 || ratio < 1.0 {
            return bad("EEG rate must be an integer multiple of the feature rate");
        }
        if !(self.bandwidth_hz > 0.0 && self.word_rate_hz > 0.0) || self.vocab_size == 0 {
            return bad("bandwidth, word rate and vocabulary must be positive");
        }
        Ok(())
    }
}

fn randn(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-variance low-pass noise: white noise through a forward-backward
/// pair of one-pole filters.
fn smooth_source(rng: &mut Rng, n: usize, rate: f64, cutoff: f64) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n).map(|_| randn(rng)).collect();
    let alpha = 1.0 - libm::exp(-2.0 * core::f64::consts::PI * cutoff / rate);
    for _ in 0..2 {
        let mut acc = 0.0;
        for v in s.iter_mut() {
            acc += alpha * (*v - acc);
            *v = acc;
        }
        acc = 0.0;
        for v in s.iter_mut().rev() {
            acc += alpha * (*v - acc);
            *v = acc;
        }
    }
    let mean = s.iter().sum::<f64>() / n as f64;
    let sd = libm::sqrt(s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64);
    s.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

fn add_noise(rng: &mut Rng, data: &mut [f64], rows: usize, snr_db: Option<f64>) {
    let Some(snr) = snr_db else { return };
    let len = data.len() / rows;
    for row in data.chunks_exact_mut(len) {
        let power = row.iter().map(|v| v * v).sum::<f64>() / len as f64;
        let sd = libm::sqrt(power / libm::pow(10.0, snr / 10.0));
        for v in row.iter_mut() {
            *v += sd * randn(rng);
        }
    }
}

fn mix(m: &Tensor, sources: &[Vec<f64>], step: usize) -> Vec<f64> {
    let (rows, l) = (m.shape()[0], m.shape()[1]);
    let n = sources[0].len().div_ceil(step);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for k in 0..l {
            let w = m.at(&[r, k]);
            for (o, t) in out[r * n..(r + 1) * n].iter_mut().zip((0..sources[0].len()).step_by(step)) {
                *o += w * sources[k][t];
            }
        }
    }
    out
}

/// Builds a deterministic synthetic dataset from `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = rng::derive(cfg.seed, Stream::Synthetic, 0);
    let step = libm::round(cfg.eeg_rate_hz / cfg.feature_rate_hz) as usize;
    let n_feat = libm::floor(cfg.duration_s * cfg.feature_rate_hz) as usize;
    if n_feat == 0 {
        return Err(Error::Config("duration shorter than one feature frame".into()));
    }
    let n_eeg = n_feat * step;

    let sources: Vec<Vec<f64>> = (0..cfg.sources)
        .map(|_| smooth_source(&mut rng, n_eeg, cfg.eeg_rate_hz, cfg.bandwidth_hz))
        .collect();
    let scale = 1.0 / libm::sqrt(cfg.sources as f64);
    let audio_projection = Tensor::from_fn([cfg.features, cfg.sources], |_| scale * randn(&mut rng));
    let mut audio = mix(&audio_projection, &sources, step);
    add_noise(&mut rng, &mut audio, cfg.features, cfg.snr_db);
    let audio = AudioFeatures {
        rate_hz: cfg.feature_rate_hz,
        data: Tensor::new([cfg.features, n_feat], audio)?,
        segment_index: 0,
    };

    let positions: Vec<[f64; 2]> = (0..cfg.channels)
        .map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)])
        .collect();
    let mut names: Vec<String> = (0..cfg.channels).map(|i| format!("E{:02}", i + 1)).collect();
    let mut all_positions = positions.clone();
    if cfg.extra_channels {
        names.push("VEOG".into());
        names.push("AUD".into());
        all_positions.push([0.5, 0.98]);
        all_positions.push([0.5, 0.02]);
    }
    let layout = SensorLayout::new(all_positions)?;

    let mut recordings = Vec::with_capacity(cfg.n_subjects);
    let mut mixing = Vec::with_capacity(cfg.n_subjects);
    for s in 0..cfg.n_subjects {
        let m = Tensor::from_fn([cfg.channels, cfg.sources], |_| scale * randn(&mut rng));
        let mut x = mix(&m, &sources, 1);
        add_noise(&mut rng, &mut x, cfg.channels, cfg.snr_db);
        if cfg.extra_channels {
            x.extend((0..2 * n_eeg).map(|_| randn(&mut rng)));
        }
        let c = names.len();
        recordings.push(EegRecording::new(
            format!("sub-{:02}", s + 1),
            cfg.eeg_rate_hz,
            names.clone(),
            Tensor::new([c, n_eeg], x)?,
            layout.clone(),
        )?);
        mixing.push(m);
    }

    let word_len = 1.0 / cfg.word_rate_hz;
    let duration = n_feat as f64 / cfg.feature_rate_hz;
    let n_words = libm::floor(duration / word_len) as usize;
    let entries = (0..n_words)
        .map(|i| WordEntry {
            word: format!("w{:03}", rng.gen_range(0..cfg.vocab_size)),
            onset_s: i as f64 * word_len,
            offset_s: (i as f64 + 0.9) * word_len,
            segment: 0,
        })
        .collect();
    Ok(SyntheticDataset {
        recordings,
        audio,
        alignment: WordAlignment::new(entries)?,
        mixing,
        audio_projection,
    })
}
