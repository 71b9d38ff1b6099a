use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{CleanRecording, PreprocessConfig};
use crate::data::{AudioFeatures, WordAlignment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One aligned training example.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub subject_id: String,
    /// `[C × T_w]`
    pub eeg: Tensor,
    /// `[F × T_w]`
    pub audio: Tensor,
    pub words: Vec<String>,
    /// Position of the window on the stimulus timeline. Identical across
    /// subjects for the same stretch of audio.
    pub window_index: usize,
}

/// Number of windows that fit in `len` samples.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Cuts a cleaned recording and its stimulus features into aligned
/// windows.
///
/// `audio[s]` starts `segment_onsets_s[s]` seconds into the recording.
/// Window indices count across segments in stimulus order and depend only
/// on the audio, so the same index names the same audio for every
/// subject. A word belongs to a window iff its temporal midpoint falls
/// inside it; trailing partial windows are dropped.
pub fn make_windows(
    rec: &CleanRecording,
    audio: &[AudioFeatures],
    segment_onsets_s: &[f64],
    alignment: &WordAlignment,
    cfg: &PreprocessConfig,
) -> Result<Vec<WindowPair>> {
    if audio.len() != segment_onsets_s.len() {
        return Err(Error::Contract(format!(
            "{} audio segments but {} onsets",
            audio.len(),
            segment_onsets_s.len()
        )));
    }
    let rate = cfg.feature_rate_hz;
    let same_rate = |r: f64| libm::fabs(r - rate) < 1e-9;
    if !same_rate(rec.rate_hz) || audio.iter().any(|a| !same_rate(a.rate_hz)) {
        return Err(Error::Contract(format!("EEG and audio must both be at {rate} Hz")));
    }
    let win = cfg.window_samples();
    let stride = cfg.stride_samples();
    if win == 0 || stride == 0 {
        return Err(Error::Config("window shorter than one sample".into()));
    }
    let eeg_len = rec.data.shape()[1];
    let mut out = Vec::new();
    let mut base = 0;
    for (seg, &onset_s) in audio.iter().zip(segment_onsets_s) {
        let n = window_count(seg.n_frames(), win, stride);
        let offset = libm::round(onset_s * rate) as isize;
        let words: Vec<(f64, &str)> = alignment
            .segment(seg.segment_index)
            .map(|e| (e.midpoint_s(), e.word.as_str()))
            .collect();
        for k in 0..n {
            let a0 = k * stride;
            let e0 = offset + a0 as isize;
            if e0 < 0 || e0 as usize + win > eeg_len {
                continue;
            }
            let e0 = e0 as usize;
            let (t0, t1) = (a0 as f64 / rate, (a0 + win) as f64 / rate);
            out.push(WindowPair {
                subject_id: rec.subject_id.clone(),
                eeg: rec.data.slice_time(e0, e0 + win)?,
                audio: seg.data.slice_time(a0, a0 + win)?,
                words: words
                    .iter()
                    .filter(|(m, _)| *m >= t0 && *m < t1)
                    .map(|(_, w)| String::from(*w))
                    .collect(),
                window_index: base + k,
            });
        }
        base += n;
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no complete {}-sample window",
            rec.subject_id, win
        )));
    }
    Ok(out)
}
