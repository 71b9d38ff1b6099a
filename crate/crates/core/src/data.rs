//! In-memory representations of recordings, sensor layouts, word timing
//! and audio features.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a recorded channel measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Eeg,
    /// Vertical electro-oculogram.
    Veog,
    /// Auditory reference.
    Aud,
}

impl ChannelKind {
    /// Classifies a channel by its label.
    pub fn from_name(name: &str) -> Self {
        let upper = name.trim().to_ascii_uppercase();
        if upper.starts_with("VEOG") {
            ChannelKind::Veog
        } else if upper.starts_with("AUD") {
            ChannelKind::Aud
        } else {
            ChannelKind::Eeg
        }
    }
}

/// Normalized 2-D sensor positions, one per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    positions: Vec<[f64; 2]>,
}

impl SensorLayout {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!(
                    "sensor {i} position {p:?} outside [0,1]²"
                )));
            }
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn select(&self, keep: &[usize]) -> SensorLayout {
        SensorLayout {
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// A multichannel recording from one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub channel_kinds: Vec<ChannelKind>,
    /// `[C × T]`
    pub data: Tensor,
    pub layout: SensorLayout,
}

impl EegRecording {
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        data: Tensor,
        layout: SensorLayout,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if !(sample_rate_hz > 0.0) {
            return Err(Error::Contract(format!("sample rate {sample_rate_hz} must be > 0")));
        }
        if data.ndim() != 2 {
            return Err(Error::Contract(format!("recording data must be C×T, got {:?}", data.shape())));
        }
        let c = data.shape()[0];
        if channel_names.len() != c || layout.len() != c {
            return Err(Error::Contract(format!(
                "{subject_id}: {c} data channels, {} names, {} layout positions",
                channel_names.len(),
                layout.len()
            )));
        }
        let channel_kinds = channel_names.iter().map(|n| ChannelKind::from_name(n)).collect();
        Ok(Self {
            subject_id,
            sample_rate_hz,
            channel_names,
            channel_kinds,
            data,
            layout,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    /// Indices of channels kept for model input.
    pub fn model_channels(&self, include_non_eeg: bool) -> Vec<usize> {
        self.channel_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| include_non_eeg || **k == ChannelKind::Eeg)
            .map(|(i, _)| i)
            .collect()
    }

    /// Restricts the recording to the given channels.
    pub fn select_channels(&self, keep: &[usize]) -> Result<EegRecording> {
        let t = self.n_samples();
        let mut data = Vec::with_capacity(keep.len() * t);
        for &c in keep {
            data.extend_from_slice(self.data.row(c));
        }
        EegRecording::new(
            self.subject_id.clone(),
            self.sample_rate_hz,
            keep.iter().map(|&c| self.channel_names[c].clone()).collect(),
            Tensor::new([keep.len(), t], data)?,
            self.layout.select(keep),
        )
    }
}

/// One spoken word and its timing inside an audio segment.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEntry {
    pub word: String,
    pub onset_s: f64,
    pub offset_s: f64,
    pub segment: usize,
}

impl WordEntry {
    pub fn midpoint_s(&self) -> f64 {
        0.5 * (self.onset_s + self.offset_s)
    }
}

/// Word timing table for the stimulus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordAlignment {
    pub entries: Vec<WordEntry>,
}

impl WordAlignment {
    pub fn new(entries: Vec<WordEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.onset_s >= 0.0 && e.onset_s < e.offset_s) {
                return Err(Error::Contract(format!(
                    "word {i} ({:?}): need 0 <= onset < offset, got {}..{}",
                    e.word, e.onset_s, e.offset_s
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn segment(&self, segment: usize) -> impl Iterator<Item = &WordEntry> {
        self.entries.iter().filter(move |e| e.segment == segment)
    }
}

/// Raw audio samples of one stimulus segment.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
    pub segment_index: usize,
}

impl AudioTrack {
    pub fn new(sample_rate_hz: f64, samples: Vec<f64>, segment_index: usize) -> Result<Self> {
        if samples.is_empty() || !(sample_rate_hz > 0.0) {
            return Err(Error::Contract("audio track needs samples and a positive rate".to_string()));
        }
        Ok(Self {
            sample_rate_hz,
            samples,
            segment_index,
        })
    }
}

/// Audio representation of one stimulus segment at the feature rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub rate_hz: f64,
    /// `[F × T]`
    pub data: Tensor,
    pub segment_index: usize,
}

impl AudioFeatures {
    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames() as f64 / self.rate_hz
    }
}
