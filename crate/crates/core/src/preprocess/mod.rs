//! EEG cleaning chain plus mel features and window extraction.
//!
//! The EEG chain always runs in this order, per channel over the whole
//! recording: baseline correction, robust scaling, percentile clipping,
//! standard-deviation clamping, standardization.

pub mod mel;
pub mod stats;
pub mod windows;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::EegRecording;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mel::{mel_features, mel_features_raw, MelParams};
pub use windows::{make_windows, WindowPair};

/// Preprocessing settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    /// Clamp bound in standard deviations.
    pub clamp_sigma: f64,
    pub window_s: f64,
    /// Window hop; equal to `window_s` for non-overlapping windows.
    pub window_stride_s: f64,
    pub baseline_s: f64,
    /// Feed VEOG/AUD channels to the model too.
    pub include_non_eeg: bool,
    /// Common rate of EEG and audio features after alignment.
    pub feature_rate_hz: f64,
    /// Length of the moving-average antialias filter applied before
    /// decimating EEG to the feature rate.
    pub antialias_taps: usize,
    pub mel: MelParams,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_lo_pct: 5.0,
            clip_hi_pct: 95.0,
            clamp_sigma: 20.0,
            window_s: 3.0,
            window_stride_s: 3.0,
            baseline_s: 0.5,
            include_non_eeg: false,
            feature_rate_hz: 100.0,
            antialias_taps: 8,
            mel: MelParams::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 <= self.clip_lo_pct && self.clip_lo_pct < self.clip_hi_pct && self.clip_hi_pct <= 100.0) {
            return bad(format!(
                "need 0 <= clip_lo_pct < clip_hi_pct <= 100, got {} / {}",
                self.clip_lo_pct, self.clip_hi_pct
            ));
        }
        if !(self.clamp_sigma > 0.0) {
            return bad(format!("clamp_sigma must be > 0, got {}", self.clamp_sigma));
        }
        if !(self.window_s > 0.0 && self.window_stride_s > 0.0) {
            return bad("window length and stride must be > 0".into());
        }
        if !(self.baseline_s > 0.0) {
            return bad("baseline_s must be > 0".into());
        }
        if !(self.feature_rate_hz > 0.0) || self.antialias_taps == 0 {
            return bad("feature rate and antialias taps must be positive".into());
        }
        self.mel.validate()
    }

    /// Samples per window at the feature rate.
    pub fn window_samples(&self) -> usize {
        libm::round(self.window_s * self.feature_rate_hz) as usize
    }

    pub fn stride_samples(&self) -> usize {
        libm::round(self.window_stride_s * self.feature_rate_hz) as usize
    }
}

/// One applied processing step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceEntry {
    pub step: &'static str,
    pub detail: String,
}

fn per_channel(x: &Tensor, mut f: impl FnMut(usize, &[f64], &mut [f64])) -> Tensor {
    let mut out = x.clone();
    let t = x.shape()[1];
    for c in 0..x.shape()[0] {
        f(c, x.row(c), &mut out.data_mut()[c * t..(c + 1) * t]);
    }
    out
}

fn check_2d(x: &Tensor, what: &str) -> Result<()> {
    if x.ndim() != 2 {
        return Err(Error::Contract(format!("{what} expects C×T, got {:?}", x.shape())));
    }
    Ok(())
}

/// Subtracts each channel's mean over its first `baseline_samples`.
pub fn baseline_correct(x: &Tensor, baseline_samples: usize) -> Result<Tensor> {
    check_2d(x, "baseline_correct")?;
    let t = x.shape()[1];
    if baseline_samples == 0 || baseline_samples > t {
        return Err(Error::Contract(format!(
            "baseline of {baseline_samples} samples for a recording of {t}"
        )));
    }
    Ok(per_channel(x, |_, src, dst| {
        let m = stats::mean(&src[..baseline_samples]);
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s - m);
    }))
}

/// Robust scaling result; `degenerate[c]` marks channels whose
/// interquartile range vanished.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustScaled {
    pub data: Tensor,
    pub degenerate: Vec<bool>,
}

/// `(x − median) / IQR` per channel; channels with `IQR < 1e-12` are
/// divided by 1 and flagged.
pub fn robust_scale(x: &Tensor) -> Result<RobustScaled> {
    check_2d(x, "robust_scale")?;
    if x.shape()[1] < 4 {
        return Err(Error::Contract("robust_scale needs at least 4 samples".into()));
    }
    let mut degenerate = vec![false; x.shape()[0]];
    let data = per_channel(x, |c, src, dst| {
        let s = stats::sorted(src);
        let median = stats::percentile_sorted(&s, 50.0);
        let iqr = stats::percentile_sorted(&s, 75.0) - stats::percentile_sorted(&s, 25.0);
        let scale = if iqr < 1e-12 {
            degenerate[c] = true;
            1.0
        } else {
            iqr
        };
        dst.iter_mut().zip(src).for_each(|(d, v)| *d = (v - median) / scale);
    });
    Ok(RobustScaled { data, degenerate })
}

/// Winsorizes each channel to its `[P_lo, P_hi]` percentile range.
pub fn percentile_clip(x: &Tensor, lo_pct: f64, hi_pct: f64) -> Result<Tensor> {
    check_2d(x, "percentile_clip")?;
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::Config(format!("invalid percentile bounds {lo_pct}/{hi_pct}")));
    }
    Ok(per_channel(x, |_, src, dst| {
        let s = stats::sorted(src);
        let lo = stats::percentile_sorted(&s, lo_pct);
        let hi = stats::percentile_sorted(&s, hi_pct);
        dst.iter_mut().zip(src).for_each(|(d, v)| *d = v.clamp(lo, hi));
    }))
}

/// Clamps each channel to `mean ± k·σ` of its own pre-clamp statistics.
pub fn clamp_std(x: &Tensor, k: f64) -> Result<Tensor> {
    check_2d(x, "clamp_std")?;
    if !(k > 0.0) {
        return Err(Error::Config(format!("clamp bound must be > 0, got {k}")));
    }
    Ok(per_channel(x, |_, src, dst| {
        let m = stats::mean(src);
        let sd = stats::std_dev(src);
        let (lo, hi) = (m - k * sd, m + k * sd);
        dst.iter_mut().zip(src).for_each(|(d, v)| *d = v.clamp(lo, hi));
    }))
}

/// Zero mean, unit population variance per channel.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    check_2d(x, "standardize")?;
    if x.shape()[1] < 2 {
        return Err(Error::Contract("standardize needs at least 2 samples".into()));
    }
    Ok(per_channel(x, |_, src, dst| {
        let m = stats::mean(src);
        let sd = stats::std_dev(src);
        if sd < 1e-12 {
            dst.iter_mut().for_each(|d| *d = 0.0);
        } else {
            dst.iter_mut().zip(src).for_each(|(d, v)| *d = (v - m) / sd);
        }
    }))
}

/// Moving-average antialias of length `taps`, then keeps every
/// `factor`-th sample. Windows shrink at the edges.
pub fn decimate(x: &Tensor, factor: usize, taps: usize) -> Result<Tensor> {
    check_2d(x, "decimate")?;
    if factor == 0 || taps == 0 {
        return Err(Error::Contract("decimation factor and taps must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let n_out = t / factor;
    if n_out == 0 {
        return Err(Error::TooShort(format!("{t} samples cannot be decimated by {factor}")));
    }
    let before = taps / 2;
    let after = taps - before;
    let mut out = Vec::with_capacity(c * n_out);
    for ch in 0..c {
        let row = x.row(ch);
        let mut prefix = Vec::with_capacity(t + 1);
        prefix.push(0.0);
        for &v in row {
            prefix.push(prefix.last().unwrap() + v);
        }
        for k in 0..n_out {
            let centre = k * factor;
            let lo = centre.saturating_sub(before);
            let hi = (centre + after).min(t);
            out.push((prefix[hi] - prefix[lo]) / (hi - lo) as f64);
        }
    }
    Tensor::new([c, n_out], out)
}

/// A recording after the full cleaning chain, at the feature rate.
#[derive(Debug, Clone)]
pub struct CleanRecording {
    pub subject_id: String,
    pub rate_hz: f64,
    /// `[C × T]` with only the model channels kept.
    pub data: Tensor,
    pub layout: crate::data::SensorLayout,
    pub channel_names: Vec<String>,
    pub degenerate: Vec<bool>,
    pub provenance: Vec<ProvenanceEntry>,
}

/// Channel selection, rate alignment and the five-step chain.
pub fn preprocess_recording(rec: &EegRecording, cfg: &PreprocessConfig) -> Result<CleanRecording> {
    cfg.validate()?;
    let keep = rec.model_channels(cfg.include_non_eeg);
    if keep.is_empty() {
        return Err(Error::Contract(format!("{}: no channels left for the model", rec.subject_id)));
    }
    let rec = rec.select_channels(&keep)?;
    let ratio = rec.sample_rate_hz / cfg.feature_rate_hz;
    let factor = libm::round(ratio) as usize;
    if factor == 0 || libm::fabs(ratio - factor as f64) > 1e-9 {
        return Err(Error::Config(format!(
            "sample rate {} is not an integer multiple of the feature rate {}",
            rec.sample_rate_hz, cfg.feature_rate_hz
        )));
    }
    let mut provenance = Vec::new();
    let x = decimate(&rec.data, factor, cfg.antialias_taps)?;
    provenance.push(ProvenanceEntry {
        step: "decimate",
        detail: format!("factor={factor} taps={} rate_hz={}", cfg.antialias_taps, cfg.feature_rate_hz),
    });

    let baseline = (libm::round(cfg.baseline_s * cfg.feature_rate_hz) as usize).clamp(1, x.shape()[1]);
    let x = baseline_correct(&x, baseline)?;
    provenance.push(ProvenanceEntry {
        step: "baseline_correct",
        detail: format!("baseline_samples={baseline}"),
    });

    let RobustScaled { data: mut x, degenerate } = robust_scale(&x)?;
    let t = x.shape()[1];
    for (c, _) in degenerate.iter().enumerate().filter(|(_, d)| **d) {
        x.data_mut()[c * t..(c + 1) * t].iter_mut().for_each(|v| *v = 0.0);
    }
    provenance.push(ProvenanceEntry {
        step: "robust_scale",
        detail: format!("degenerate={}", degenerate.iter().filter(|d| **d).count()),
    });

    let x = percentile_clip(&x, cfg.clip_lo_pct, cfg.clip_hi_pct)?;
    provenance.push(ProvenanceEntry {
        step: "percentile_clip",
        detail: format!("lo_pct={} hi_pct={}", cfg.clip_lo_pct, cfg.clip_hi_pct),
    });

    let x = clamp_std(&x, cfg.clamp_sigma)?;
    provenance.push(ProvenanceEntry {
        step: "clamp_std",
        detail: format!("clamp_sigma={}", cfg.clamp_sigma),
    });

    let x = standardize(&x)?;
    provenance.push(ProvenanceEntry {
        step: "standardize",
        detail: String::from("eps=1e-12"),
    });

    Ok(CleanRecording {
        subject_id: rec.subject_id.clone(),
        rate_hz: cfg.feature_rate_hz,
        data: x,
        layout: rec.layout.clone(),
        channel_names: rec.channel_names.clone(),
        degenerate,
        provenance,
    })
}

/// The order in which [`preprocess_recording`] applies the cleaning steps.
pub const CHAIN_ORDER: [&str; 5] = [
    "baseline_correct",
    "robust_scale",
    "percentile_clip",
    "clamp_std",
    "standardize",
];
