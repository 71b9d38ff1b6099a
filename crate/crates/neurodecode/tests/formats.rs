//! Round trips and integrity checks for every on-disk format.

use std::fs;
use std::path::Path;

use neurodecode::archive::{self, AudioEntry, AudioSource, Blob, Dataset, WindowArchive};
use neurodecode::checkpoint::{self, Pointer, LATEST};
use neurodecode::config::RunConfig;
use neurodecode::Error;
use neurodecode_core::data::WordAlignment;
use neurodecode_core::model::{Model, ModelConfig};
use neurodecode_core::preprocess::{self, make_windows, PreprocessConfig};
use neurodecode_core::synthetic::{generate_synthetic, SyntheticConfig};
use neurodecode_core::training::{train_step, ClipBatch, TrainConfig, TrainState};
use neurodecode_core::Tensor;

fn small_synthetic() -> neurodecode_core::synthetic::SyntheticDataset {
    generate_synthetic(&SyntheticConfig {
        n_subjects: 2,
        channels: 6,
        features: 4,
        sources: 3,
        duration_s: 30.0,
        eeg_rate_hz: 200.0,
        extra_channels: true,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn f32_rounded(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[test]
fn dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_synthetic();
    archive::write_synthetic(tmp.path(), &ds).unwrap();
    let back = archive::read_dataset(tmp.path()).unwrap();
    assert_eq!(back.alignment, ds.alignment);
    assert_eq!(back.recordings.len(), ds.recordings.len());
    for (a, b) in back.recordings.iter().zip(&ds.recordings) {
        assert_eq!(a.subject_id, b.subject_id);
        assert_eq!(a.channel_names, b.channel_names);
        assert_eq!(a.channel_kinds, b.channel_kinds);
        assert_eq!(a.sample_rate_hz, b.sample_rate_hz);
        assert_eq!(a.layout, b.layout);
        // samples are stored as 32-bit floats
        assert_eq!(a.data, f32_rounded(&b.data));
    }
    let (features, onsets) = back.features(&PreprocessConfig::default()).unwrap();
    assert_eq!(features, vec![ds.audio.clone()]);
    assert_eq!(onsets, vec![0.0]);
}

#[test]
fn missing_layout_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    archive::write_synthetic(tmp.path(), &small_synthetic()).unwrap();
    fs::remove_file(tmp.path().join("layout.csv")).unwrap();
    let err = archive::read_dataset(tmp.path()).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("layout")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("x"), "1").unwrap();
    let err = archive::prepare_output_dir(tmp.path(), false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    archive::prepare_output_dir(tmp.path(), true).unwrap();
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

fn write_pcm16(path: &Path, channels: u16, samples: &[i16]) {
    let format = hound::WavSpec {
        channels,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, format).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn wav_audio_becomes_mel_features() {
    let tmp = tempfile::tempdir().unwrap();
    let samples: Vec<i16> = (0..16_000 * 2)
        .map(|i| ((i as f64 * 440.0 * std::f64::consts::TAU / 16_000.0).sin() * 12_000.0) as i16)
        .collect();
    write_pcm16(&tmp.path().join("story.wav"), 1, &samples);
    let track = archive::read_wav(&tmp.path().join("story.wav"), 0).unwrap();
    assert_eq!(track.sample_rate_hz, 16_000.0);
    assert_eq!(track.samples.len(), samples.len());
    assert_eq!(track.samples[5], f64::from(samples[5]) / 32768.0);

    let ds = Dataset {
        recordings: Vec::new(),
        audio: vec![AudioEntry {
            segment: 0,
            onset_s: 1.5,
            source: AudioSource::Wav {
                file: "story.wav".into(),
            },
        }],
        alignment: WordAlignment::default(),
        root: tmp.path().to_path_buf(),
    };
    let cfg = PreprocessConfig::default();
    let (features, onsets) = ds.features(&cfg).unwrap();
    assert_eq!(onsets, vec![1.5]);
    let f = &features[0];
    assert_eq!(f.rate_hz, cfg.feature_rate_hz);
    assert_eq!(f.data.shape()[0], cfg.mel.n_mels);
    assert!(f.data.is_finite());
    let expected = preprocess::mel_features(&track.samples, 16_000.0, &cfg.mel, cfg.feature_rate_hz).unwrap();
    assert_eq!(f.data, expected);
}

#[test]
fn stereo_wav_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("stereo.wav");
    write_pcm16(&path, 2, &[0; 64]);
    assert!(matches!(archive::read_wav(&path, 0), Err(Error::Data(_))));
}

#[test]
fn window_archive_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = small_synthetic();
    let cfg = PreprocessConfig::default();
    let clean = preprocess::preprocess_recording(&ds.recordings[0], &cfg).unwrap();
    let windows = make_windows(&clean, std::slice::from_ref(&ds.audio), &[0.0], &ds.alignment, &cfg).unwrap();
    let sha = archive::write_windows(
        tmp.path(),
        &WindowArchive {
            subjects: vec![clean.subject_id.clone()],
            channel_names: clean.channel_names.clone(),
            layout: &clean.layout,
            config: Default::default(),
            provenance: Default::default(),
            windows: &windows,
        },
    )
    .unwrap();
    let back = archive::read_windows(tmp.path()).unwrap();
    assert_eq!(back.sha256, sha);
    assert_eq!(back.windows, windows);
    assert_eq!(back.layout().unwrap(), clean.layout);
    // VEOG and AUD are left out of the model channels by default
    assert_eq!(back.n_channels(), 6);
    assert_eq!(back.manifest.counts[&clean.subject_id], windows.len());
}

#[test]
fn corrupted_blob_fails_its_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn([3, 5], |i| i as f64 * 0.25);
    let blob = Blob::write(tmp.path(), "t.f64", &t).unwrap();
    assert_eq!(blob.read(tmp.path()).unwrap(), t);
    let path = tmp.path().join("t.f64");
    let mut bytes = fs::read(&path).unwrap();
    bytes[9] ^= 1;
    fs::write(&path, bytes).unwrap();
    let err = blob.read(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn trained_model() -> (Model, TrainState) {
    let ds = small_synthetic();
    let cfg = PreprocessConfig::default();
    let clean = preprocess::preprocess_recording(&ds.recordings[0], &cfg).unwrap();
    let windows = make_windows(&clean, std::slice::from_ref(&ds.audio), &[0.0], &ds.alignment, &cfg).unwrap();
    let mut model = Model::new(
        ModelConfig::tiny(6, 8, 8, 4),
        vec![clean.subject_id.clone()],
        clean.layout.clone(),
        1,
    )
    .unwrap();
    let mut state = TrainState::new(&model, 1);
    let refs: Vec<_> = windows.iter().take(4).collect();
    let batch = ClipBatch::new(&model, &refs).unwrap();
    for _ in 0..3 {
        train_step(&mut model, &batch, &mut state, &TrainConfig::default()).unwrap();
    }
    state.best_val_top1 = Some(0.5);
    (model, state)
}

#[test]
fn checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, state) = trained_model();
    let dir = checkpoint::save(tmp.path(), &model, &state).unwrap();
    checkpoint::set_pointer(
        tmp.path(),
        LATEST,
        &Pointer {
            dir,
            step: state.step,
            val_top1: Some(0.5),
        },
    )
    .unwrap();
    let loaded = checkpoint::load(tmp.path(), LATEST).unwrap();
    assert_eq!(loaded.state, state);
    assert_eq!(loaded.model.config, model.config);
    assert_eq!(loaded.model.subjects, model.subjects);
    assert_eq!(loaded.model.layout, model.layout);
    assert_eq!(loaded.model.params, model.params);
    assert_eq!(loaded.model.buffers, model.buffers);
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, state) = trained_model();
    let dir = checkpoint::save(tmp.path(), &model, &state).unwrap();
    let victim = fs::read_dir(tmp.path().join(&dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("param."))
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] ^= 0x80;
    fs::write(&victim, bytes).unwrap();
    let err = checkpoint::load_dir(&tmp.path().join(&dir)).err().expect("load must fail");
    assert!(matches!(err, Error::Integrity { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn prune_keeps_only_pointed_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, mut state) = trained_model();
    let first = checkpoint::save(tmp.path(), &model, &state).unwrap();
    state.step += 1;
    let second = checkpoint::save(tmp.path(), &model, &state).unwrap();
    state.step += 1;
    let third = checkpoint::save(tmp.path(), &model, &state).unwrap();
    for (which, dir) in [(checkpoint::BEST, &first), (LATEST, &third)] {
        let p = Pointer {
            dir: dir.clone(),
            step: 0,
            val_top1: None,
        };
        checkpoint::set_pointer(tmp.path(), which, &p).unwrap();
    }
    checkpoint::prune(tmp.path()).unwrap();
    assert!(tmp.path().join(&first).exists());
    assert!(!tmp.path().join(&second).exists());
    assert!(tmp.path().join(&third).exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = RunConfig::load(None, &["model.dimension=3".into()]).err().unwrap();
    assert_eq!(err.exit_code(), 1);
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.ini");
    fs::write(&file, "[train]\nlr=0.01\nlearning_rate=0.01\n").unwrap();
    let err = RunConfig::load(Some(&file), &[]).err().unwrap();
    assert!(err.to_string().contains("learning_rate"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn overrides_win_over_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.ini");
    fs::write(&file, "[train]\nlr=0.01\nbatch_size=4\n").unwrap();
    let cfg = RunConfig::load(Some(&file), &["train.lr=0.5".into()]).unwrap();
    let train = cfg.train();
    assert_eq!(train.adam.lr, 0.5);
    assert_eq!(train.batch_size, 4);
    assert_eq!(cfg.get("train.lr"), "0.5");
}
