//! On-disk datasets.
//!
//! A *dataset* directory holds raw recordings in BrainVision form, the
//! shared sensor layout, the word alignment and the stimulus audio, tied
//! together by `manifest.json`. A *window* archive holds preprocessed
//! window pairs as float64 blobs described by its own manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neurodecode_core::data::{AudioFeatures, AudioTrack, EegRecording, SensorLayout, WordAlignment};
use neurodecode_core::preprocess::{self, PreprocessConfig, WindowPair};
use neurodecode_core::synthetic::SyntheticDataset;
use neurodecode_core::Tensor;

use crate::brainvision;
use crate::error::{Error, FormatError, Result};
use crate::tables;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".into(),
    });
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Descriptor of one little-endian float64 tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

impl Blob {
    pub fn write(dir: &Path, file: &str, tensor: &Tensor) -> Result<Blob> {
        Self::write_raw(dir, file, tensor.shape().to_vec(), tensor.data())
    }

    pub fn write_raw(dir: &Path, file: &str, shape: Vec<usize>, data: &[f64]) -> Result<Blob> {
        let bytes = f64_bytes(data);
        let path = dir.join(file);
        write_atomic(&path, &bytes)?;
        Ok(Blob {
            file: file.to_string(),
            shape,
            sha256: sha256_hex(&bytes),
        })
    }

    /// Reads the blob back, verifying its length and digest.
    pub fn read_raw(&self, dir: &Path) -> Result<Vec<f64>> {
        let path = dir.join(&self.file);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Integrity {
                path,
                detail: format!("{} bytes, expected {} for shape {:?}", bytes.len(), 8 * n, self.shape),
            });
        }
        let digest = sha256_hex(&bytes);
        if digest != self.sha256 {
            return Err(Error::Integrity {
                path,
                detail: format!("sha256 {digest}, manifest says {}", self.sha256),
            });
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn read(&self, dir: &Path) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.read_raw(dir)?)?)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| {
        FormatError::Syntax {
            line: e.line(),
            message: e.to_string(),
        }
        .in_file(path)
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub subject_id: String,
    pub header: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AudioSource {
    /// Precomputed `[F × T]` features at `rate_hz`.
    Features { blob: Blob, rate_hz: f64 },
    /// PCM16 mono wav, turned into mel features during preprocessing.
    Wav { file: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEntry {
    pub segment: usize,
    /// Where the segment starts within every recording.
    pub onset_s: f64,
    pub source: AudioSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub layout: String,
    pub alignment: String,
    pub recordings: Vec<RecordingEntry>,
    pub audio: Vec<AudioEntry>,
}

/// A dataset as loaded from disk, before preprocessing.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub recordings: Vec<EegRecording>,
    pub audio: Vec<AudioEntry>,
    pub alignment: WordAlignment,
    pub root: PathBuf,
}

/// Fails unless `dir` is absent or empty, or `force` is set, in which case
/// it is cleared.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::io(dir))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "{} already exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(Error::io(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub fn write_synthetic(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    let first = &ds.recordings[0];
    let layout = tables::write_layout(
        first
            .channel_names
            .iter()
            .map(String::as_str)
            .zip(first.layout.positions().iter().copied()),
    );
    let layout_path = dir.join("layout.csv");
    fs::write(&layout_path, layout).map_err(Error::io(&layout_path))?;
    let align_path = dir.join("alignment.csv");
    fs::write(&align_path, tables::write_alignment(&ds.alignment)).map_err(Error::io(&align_path))?;
    let mut recordings = Vec::new();
    for rec in &ds.recordings {
        brainvision::write_recording(dir, &rec.subject_id, rec)?;
        recordings.push(RecordingEntry {
            subject_id: rec.subject_id.clone(),
            header: format!("{}.vhdr", rec.subject_id),
        });
    }
    let blob = Blob::write(dir, "audio-0.f64", &ds.audio.data)?;
    let manifest = DatasetManifest {
        layout: "layout.csv".into(),
        alignment: "alignment.csv".into(),
        recordings,
        audio: vec![AudioEntry {
            segment: ds.audio.segment_index,
            onset_s: 0.0,
            source: AudioSource::Features {
                blob,
                rate_hz: ds.audio.rate_hz,
            },
        }],
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    let layout_path = dir.join(&manifest.layout);
    let layout_text = fs::read_to_string(&layout_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Data(format!("layout file {} is missing", layout_path.display())),
        _ => Error::io(&layout_path)(e),
    })?;
    let layout = tables::load_layout(&layout_text).map_err(|e| e.in_file(&layout_path))?;
    let align_path = dir.join(&manifest.alignment);
    let align_text = fs::read_to_string(&align_path).map_err(Error::io(&align_path))?;
    let alignment = tables::load_alignment(&align_text).map_err(|e| e.in_file(&align_path))?;
    let recordings = manifest
        .recordings
        .iter()
        .map(|r| brainvision::read_recording(&dir.join(&r.header), &r.subject_id, &layout))
        .collect::<Result<Vec<_>>>()?;
    if recordings.is_empty() {
        return Err(Error::Data(format!("{}: no recordings listed", dir.display())));
    }
    if manifest.audio.is_empty() {
        return Err(Error::Data(format!("{}: no audio segments listed", dir.display())));
    }
    Ok(Dataset {
        recordings,
        audio: manifest.audio,
        alignment,
        root: dir.to_path_buf(),
    })
}

/// Loads a PCM16 mono wav file.
pub fn read_wav(path: &Path, segment_index: usize) -> Result<AudioTrack> {
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let format = reader.spec();
    if format.channels != 1 || format.bits_per_sample != 16 || format.sample_format != hound::SampleFormat::Int {
        return Err(bad(format!(
            "only PCM16 mono is supported, found {} channel(s) at {} bits",
            format.channels, format.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    Ok(AudioTrack::new(f64::from(format.sample_rate), samples, segment_index)?)
}

impl Dataset {
    /// Stimulus features at the configured feature rate, one per segment,
    /// with the segment onsets, in segment order.
    pub fn features(&self, cfg: &PreprocessConfig) -> Result<(Vec<AudioFeatures>, Vec<f64>)> {
        let mut entries: Vec<&AudioEntry> = self.audio.iter().collect();
        entries.sort_by_key(|e| e.segment);
        let mut feats = Vec::new();
        let mut onsets = Vec::new();
        for e in entries {
            let f = match &e.source {
                AudioSource::Features { blob, rate_hz } => {
                    if (rate_hz - cfg.feature_rate_hz).abs() > 1e-9 {
                        return Err(Error::Data(format!(
                            "segment {} features are at {rate_hz} Hz, preprocessing expects {} Hz",
                            e.segment, cfg.feature_rate_hz
                        )));
                    }
                    AudioFeatures {
                        rate_hz: *rate_hz,
                        data: blob.read(&self.root)?,
                        segment_index: e.segment,
                    }
                }
                AudioSource::Wav { file } => {
                    let track = read_wav(&self.root.join(file), e.segment)?;
                    let data =
                        preprocess::mel_features(&track.samples, track.sample_rate_hz, &cfg.mel, cfg.feature_rate_hz)?;
                    AudioFeatures {
                        rate_hz: cfg.feature_rate_hz,
                        data,
                        segment_index: e.segment,
                    }
                }
            };
            feats.push(f);
            onsets.push(e.onset_s);
        }
        Ok((feats, onsets))
    }
}

// ----------------------------------------------------------------- windows

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub subject_id: String,
    pub window_index: usize,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub step: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowManifest {
    pub subjects: Vec<String>,
    pub counts: BTreeMap<String, usize>,
    pub channel_names: Vec<String>,
    pub layout: Vec<[f64; 2]>,
    pub config: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, Vec<Provenance>>,
    pub windows: Vec<WindowEntry>,
    /// `[N × C × T]`
    pub eeg: Blob,
    /// `[N × F × T]`
    pub audio: Blob,
}

/// Preprocessed windows as loaded from an archive.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub manifest: WindowManifest,
    pub windows: Vec<WindowPair>,
    /// Digest of the manifest file, which covers every blob digest.
    pub sha256: String,
}

impl WindowSet {
    pub fn layout(&self) -> Result<SensorLayout> {
        Ok(SensorLayout::new(self.manifest.layout.clone())?)
    }

    pub fn n_channels(&self) -> usize {
        self.manifest.eeg.shape[1]
    }

    pub fn n_features(&self) -> usize {
        self.manifest.audio.shape[1]
    }
}

pub struct WindowArchive<'a> {
    pub subjects: Vec<String>,
    pub channel_names: Vec<String>,
    pub layout: &'a SensorLayout,
    pub config: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, Vec<Provenance>>,
    pub windows: &'a [WindowPair],
}

fn stack(ts: Vec<&Tensor>) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = Tensor::stack(&ts)?;
    Ok((t.shape().to_vec(), t.into_data()))
}

pub fn write_windows(dir: &Path, a: &WindowArchive<'_>) -> Result<String> {
    let mut counts = BTreeMap::new();
    for w in a.windows {
        *counts.entry(w.subject_id.clone()).or_insert(0) += 1;
    }
    let (eeg_shape, eeg) = stack(a.windows.iter().map(|w| &w.eeg).collect())?;
    let (audio_shape, audio) = stack(a.windows.iter().map(|w| &w.audio).collect())?;
    let manifest = WindowManifest {
        subjects: a.subjects.clone(),
        counts,
        channel_names: a.channel_names.clone(),
        layout: a.layout.positions().to_vec(),
        config: a.config.clone(),
        provenance: a.provenance.clone(),
        windows: a
            .windows
            .iter()
            .map(|w| WindowEntry {
                subject_id: w.subject_id.clone(),
                window_index: w.window_index,
                words: w.words.clone(),
            })
            .collect(),
        eeg: Blob::write_raw(dir, "eeg.f64", eeg_shape, &eeg)?,
        audio: Blob::write_raw(dir, "audio.f64", audio_shape, &audio)?,
    };
    Ok(sha256_hex(&write_json(&dir.join(MANIFEST), &manifest)?))
}

pub fn read_windows(dir: &Path) -> Result<WindowSet> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    let manifest: WindowManifest = read_json(&path)?;
    let n = manifest.windows.len();
    let (es, as_) = (&manifest.eeg.shape, &manifest.audio.shape);
    if n == 0 || es.len() != 3 || as_.len() != 3 || es[0] != n || as_[0] != n || es[2] != as_[2] {
        return Err(Error::Data(format!(
            "{}: {n} windows but blob shapes {es:?} / {as_:?}",
            path.display()
        )));
    }
    if manifest.layout.len() != es[1] {
        return Err(Error::Data(format!(
            "{}: {} layout positions for {} channels",
            path.display(),
            manifest.layout.len(),
            es[1]
        )));
    }
    let eeg = manifest.eeg.read_raw(dir)?;
    let audio = manifest.audio.read_raw(dir)?;
    let (ce, ca) = (es[1] * es[2], as_[1] * as_[2]);
    let windows = manifest
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Ok(WindowPair {
                subject_id: w.subject_id.clone(),
                eeg: Tensor::new([es[1], es[2]], eeg[i * ce..(i + 1) * ce].to_vec())?,
                audio: Tensor::new([as_[1], as_[2]], audio[i * ca..(i + 1) * ca].to_vec())?,
                words: w.words.clone(),
                window_index: w.window_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowSet {
        manifest,
        windows,
        sha256: sha256_hex(&bytes),
    })
}
