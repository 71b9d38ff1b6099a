//! INI-style run configuration.
//!
//! Keys are `section.name`. A file may use `[section]` headers or write
//! the prefix out on each line. Every key must belong to the schema below,
//! so a typo is an error rather than a silently ignored setting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use neurodecode_core::model::{ModelConfig, RnnMode, SpatialMode, SubjectMode};
use neurodecode_core::optim::AdamConfig;
use neurodecode_core::preprocess::{MelParams, PreprocessConfig};
use neurodecode_core::synthetic::SyntheticConfig;
use neurodecode_core::training::{ClipConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Int,
    Float,
    Bool,
    OptInt,
    OptFloat,
    Subject,
    Spatial,
    Rnn,
    Which,
    Path,
}

const SCHEMA: &[(&str, &str, Kind)] = &[
    ("run.seed", "0", Kind::Int),
    ("io.dataset_dir", "dataset", Kind::Path),
    ("io.windows_dir", "windows", Kind::Path),
    ("synth.n_subjects", "3", Kind::Int),
    ("synth.channels", "16", Kind::Int),
    ("synth.features", "8", Kind::Int),
    ("synth.sources", "8", Kind::Int),
    ("synth.duration_s", "60", Kind::Float),
    ("synth.eeg_rate_hz", "500", Kind::Float),
    ("synth.snr_db", "none", Kind::OptFloat),
    ("synth.bandwidth_hz", "4", Kind::Float),
    ("synth.word_rate_hz", "2.5", Kind::Float),
    ("synth.vocab_size", "200", Kind::Int),
    ("synth.extra_channels", "false", Kind::Bool),
    ("preprocess.clip_lo_pct", "5", Kind::Float),
    ("preprocess.clip_hi_pct", "95", Kind::Float),
    ("preprocess.clamp_sigma", "20", Kind::Float),
    ("preprocess.window_s", "3", Kind::Float),
    ("preprocess.window_stride_s", "3", Kind::Float),
    ("preprocess.baseline_s", "0.5", Kind::Float),
    ("preprocess.include_non_eeg", "false", Kind::Bool),
    ("preprocess.feature_rate_hz", "100", Kind::Float),
    ("preprocess.antialias_taps", "8", Kind::Int),
    ("preprocess.mel_n_fft", "400", Kind::Int),
    ("preprocess.mel_hop", "160", Kind::Int),
    ("preprocess.mel_n_mels", "40", Kind::Int),
    ("preprocess.mel_fmin", "0", Kind::Float),
    ("preprocess.mel_fmax", "8000", Kind::Float),
    ("model.d1", "270", Kind::Int),
    ("model.d2", "320", Kind::Int),
    ("model.n_blocks", "5", Kind::Int),
    ("model.k_harmonics", "32", Kind::Int),
    ("model.spatial_dropout", "0.1", Kind::Float),
    ("model.subject_mode", "subject_layer", Kind::Subject),
    ("model.spatial_mode", "shared", Kind::Spatial),
    ("model.rnn_mode", "unidirectional", Kind::Rnn),
    ("model.rnn_hidden", "128", Kind::Int),
    ("model.attn_heads", "1", Kind::Int),
    ("model.bn_eps", "0.00001", Kind::Float),
    ("model.bn_momentum", "0.1", Kind::Float),
    ("train.batch_size", "32", Kind::Int),
    ("train.epochs", "10", Kind::Int),
    ("train.max_steps", "none", Kind::OptInt),
    ("train.eval_every", "0", Kind::Int),
    ("train.lr", "0.0003", Kind::Float),
    ("train.beta1", "0.9", Kind::Float),
    ("train.beta2", "0.999", Kind::Float),
    ("train.adam_eps", "0.00000001", Kind::Float),
    ("train.temperature", "0.1", Kind::Float),
    ("train.normalize", "true", Kind::Bool),
    ("eval.batch_size", "64", Kind::Int),
    ("eval.checkpoint", "best", Kind::Which),
    ("gradcheck.seeds", "20", Kind::Int),
    ("gradcheck.model_coords", "16", Kind::Int),
    ("gradcheck.op_tol", "0.0001", Kind::Float),
    ("gradcheck.model_tol", "0.001", Kind::Float),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, _, kind)| *kind)
}

fn check_value(key: &str, kind: Kind, v: &str) -> std::result::Result<(), String> {
    let ok = match kind {
        Kind::Int => v.parse::<u64>().is_ok(),
        Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::OptInt => v == "none" || v.parse::<u64>().is_ok(),
        Kind::OptFloat => v == "none" || v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Subject => SubjectMode::parse(v).is_ok(),
        Kind::Spatial => SpatialMode::parse(v).is_ok(),
        Kind::Rnn => RnnMode::parse(v).is_ok(),
        Kind::Which => matches!(v, "best" | "latest"),
        Kind::Path => !v.is_empty(),
    };
    if ok {
        return Ok(());
    }
    let expected = match kind {
        Kind::Int => "a non-negative integer".to_string(),
        Kind::Float => "a finite number".to_string(),
        Kind::Bool => "true or false".to_string(),
        Kind::OptInt => "a non-negative integer or none".to_string(),
        Kind::OptFloat => "a number or none".to_string(),
        Kind::Subject => names(SubjectMode::ALL.iter().map(|m| m.as_str())),
        Kind::Spatial => names(SpatialMode::ALL.iter().map(|m| m.as_str())),
        Kind::Rnn => names(RnnMode::ALL.iter().map(|m| m.as_str())),
        Kind::Which => "best or latest".to_string(),
        Kind::Path => "a non-empty path".to_string(),
    };
    Err(format!("{key}={v:?}: expected {expected}"))
}

fn names<'a>(it: impl Iterator<Item = &'a str>) -> String {
    format!("one of {}", it.collect::<Vec<_>>().join(", "))
}

/// Parses INI text into `(key, value, line)` triples.
pub fn parse_ini(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            section = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section {line:?}", i + 1)))?
                .trim()
                .to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, found {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let key = if section.is_empty() || k.contains('.') {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        out.push((key, v.to_string(), i + 1));
    }
    Ok(out)
}

/// A complete, validated key → value table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// `--set key=value` overrides beat the file, which beats the defaults.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v, line) in parse_ini(&text)? {
                cfg.set(&k, &v)
                    .map_err(|e| Error::Config(format!("{}:{line}: {e}", path.display())))?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("override: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let kind = kind_of(key).ok_or_else(|| format!("unknown key {key:?}"))?;
        check_value(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not in the schema"))
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn uint(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    fn usize(&self, key: &str) -> usize {
        self.uint(key) as usize
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    fn opt<T: std::str::FromStr>(&self, key: &str) -> Option<T> {
        match self.get(key) {
            "none" => None,
            v => v.parse().ok(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.uint("run.seed")
    }

    /// The merged configuration as INI text, grouped by section.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in &self.values {
            let (sec, name) = k.split_once('.').expect("schema keys are dotted");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "{name}={v}");
        }
        s
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: self.usize("synth.n_subjects"),
            channels: self.usize("synth.channels"),
            features: self.usize("synth.features"),
            sources: self.usize("synth.sources"),
            duration_s: self.float("synth.duration_s"),
            eeg_rate_hz: self.float("synth.eeg_rate_hz"),
            feature_rate_hz: self.float("preprocess.feature_rate_hz"),
            snr_db: self.opt("synth.snr_db"),
            bandwidth_hz: self.float("synth.bandwidth_hz"),
            word_rate_hz: self.float("synth.word_rate_hz"),
            vocab_size: self.usize("synth.vocab_size"),
            extra_channels: self.flag("synth.extra_channels"),
            seed: self.seed(),
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            clip_lo_pct: self.float("preprocess.clip_lo_pct"),
            clip_hi_pct: self.float("preprocess.clip_hi_pct"),
            clamp_sigma: self.float("preprocess.clamp_sigma"),
            window_s: self.float("preprocess.window_s"),
            window_stride_s: self.float("preprocess.window_stride_s"),
            baseline_s: self.float("preprocess.baseline_s"),
            include_non_eeg: self.flag("preprocess.include_non_eeg"),
            feature_rate_hz: self.float("preprocess.feature_rate_hz"),
            antialias_taps: self.usize("preprocess.antialias_taps"),
            mel: MelParams {
                n_fft: self.usize("preprocess.mel_n_fft"),
                hop: self.usize("preprocess.mel_hop"),
                n_mels: self.usize("preprocess.mel_n_mels"),
                fmin: self.float("preprocess.mel_fmin"),
                fmax: self.float("preprocess.mel_fmax"),
            },
        }
    }

    /// Network settings; input and output widths come from the data.
    pub fn model(&self, c_in: usize, f_out: usize) -> ModelConfig {
        ModelConfig {
            c_in,
            d1: self.usize("model.d1"),
            d2: self.usize("model.d2"),
            n_blocks: self.usize("model.n_blocks"),
            k_harmonics: self.usize("model.k_harmonics"),
            spatial_dropout: self.float("model.spatial_dropout"),
            subject_mode: SubjectMode::parse(self.get("model.subject_mode")).expect("validated on set"),
            spatial_mode: SpatialMode::parse(self.get("model.spatial_mode")).expect("validated on set"),
            rnn_mode: RnnMode::parse(self.get("model.rnn_mode")).expect("validated on set"),
            rnn_hidden: self.usize("model.rnn_hidden"),
            attn_heads: self.usize("model.attn_heads"),
            f_out,
            bn_eps: self.float("model.bn_eps"),
            bn_momentum: self.float("model.bn_momentum"),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.usize("train.batch_size"),
            epochs: self.uint("train.epochs"),
            max_steps: self.opt("train.max_steps"),
            adam: AdamConfig {
                lr: self.float("train.lr"),
                beta1: self.float("train.beta1"),
                beta2: self.float("train.beta2"),
                eps: self.float("train.adam_eps"),
            },
            clip: ClipConfig {
                temperature: self.float("train.temperature"),
                normalize: self.flag("train.normalize"),
            },
            seed: self.seed(),
        }
    }

    pub fn eval_every(&self) -> u64 {
        self.uint("train.eval_every")
    }

    pub fn eval_batch(&self) -> usize {
        self.usize("eval.batch_size").max(1)
    }

    pub fn eval_checkpoint(&self) -> &str {
        self.get("eval.checkpoint")
    }

    pub fn gradcheck(&self) -> (u64, usize, f64, f64) {
        (
            self.uint("gradcheck.seeds"),
            self.usize("gradcheck.model_coords"),
            self.float("gradcheck.op_tol"),
            self.float("gradcheck.model_tol"),
        )
    }
}

/// Flat description of a network, as stored in checkpoints.
pub fn model_to_map(m: &ModelConfig) -> BTreeMap<String, String> {
    [
        ("c_in", m.c_in.to_string()),
        ("d1", m.d1.to_string()),
        ("d2", m.d2.to_string()),
        ("n_blocks", m.n_blocks.to_string()),
        ("k_harmonics", m.k_harmonics.to_string()),
        ("spatial_dropout", m.spatial_dropout.to_string()),
        ("subject_mode", m.subject_mode.as_str().to_string()),
        ("spatial_mode", m.spatial_mode.as_str().to_string()),
        ("rnn_mode", m.rnn_mode.as_str().to_string()),
        ("rnn_hidden", m.rnn_hidden.to_string()),
        ("attn_heads", m.attn_heads.to_string()),
        ("f_out", m.f_out.to_string()),
        ("bn_eps", m.bn_eps.to_string()),
        ("bn_momentum", m.bn_momentum.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn model_from_map(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        map.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint model config lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint model config: bad {k}")))
    };
    let float = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint model config: bad {k}")))
    };
    Ok(ModelConfig {
        c_in: num("c_in")?,
        d1: num("d1")?,
        d2: num("d2")?,
        n_blocks: num("n_blocks")?,
        k_harmonics: num("k_harmonics")?,
        spatial_dropout: float("spatial_dropout")?,
        subject_mode: SubjectMode::parse(get("subject_mode")?)?,
        spatial_mode: SpatialMode::parse(get("spatial_mode")?)?,
        rnn_mode: RnnMode::parse(get("rnn_mode")?)?,
        rnn_hidden: num("rnn_hidden")?,
        attn_heads: num("attn_heads")?,
        f_out: num("f_out")?,
        bn_eps: float("bn_eps")?,
        bn_momentum: float("bn_momentum")?,
    })
}

/// `key: ours vs theirs` lines for every differing entry.
pub fn diff_maps(ours: &BTreeMap<String, String>, theirs: &BTreeMap<String, String>) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = ours.keys().chain(theirs.keys()).collect();
    keys.into_iter()
        .filter(|k| ours.get(*k) != theirs.get(*k))
        .map(|k| {
            let show = |v: Option<&String>| v.map_or("<absent>".to_string(), Clone::clone);
            format!("{k}: config {} vs checkpoint {}", show(ours.get(k)), show(theirs.get(k)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_core_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.preprocess(), PreprocessConfig::default());
        assert_eq!(cfg.model(60, 40), ModelConfig::default());
        assert_eq!(cfg.train(), TrainConfig::default());
    }

    #[test]
    fn sections_prefixes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(&path, "; comment\n[preprocess]\nclamp_sigma = 100\n\nmodel.d1=8\n[train]\nlr=0.01\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.lr=0.5".into()]).unwrap();
        assert_eq!(cfg.preprocess().clamp_sigma, 100.0);
        assert_eq!(cfg.get("model.d1"), "8");
        assert_eq!(cfg.train().adam.lr, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::load(None, &["preprocess.clamp_sigmaa=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.rnn_mode=sideways".into()]).is_err());
        assert!(RunConfig::load(None, &["train.epochs=-1".into()]).is_err());
        let err = RunConfig::load(None, &["model.d1=x".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn echo_reloads_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(None, &["synth.snr_db=-3.5".into(), "model.subject_mode=shared".into()]).unwrap();
        let path = dir.path().join("config.echo");
        std::fs::write(&path, cfg.echo()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn model_map_round_trip() {
        let m = RunConfig::default().model(7, 3);
        assert_eq!(model_from_map(&model_to_map(&m)).unwrap(), m);
        let mut other = model_to_map(&m);
        other.insert("d1".into(), "9".into());
        assert_eq!(diff_maps(&model_to_map(&m), &other), vec!["d1: config 270 vs checkpoint 9"]);
    }
}
