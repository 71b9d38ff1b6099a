//! Drives the `neurodecode` binary through whole pipelines.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
[synth]
n_subjects=2
channels=6
features=4
sources=3
duration_s=90
eeg_rate_hz=100
[model]
d1=8
d2=8
n_blocks=2
k_harmonics=3
rnn_hidden=4
[train]
batch_size=8
max_steps=12
eval_every=4
lr=0.003
";

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    dir: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("small.ini");
        fs::write(&config, SMALL).unwrap();
        let dir = tmp.path().join("run");
        Run { _tmp: tmp, config, dir }
    }

    fn at(&self, dir: &Path) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_neurodecode"));
        c.arg("--config").arg(&self.config).arg("--run-dir").arg(dir);
        c
    }

    fn cmd(&self, args: &[&str]) -> Output {
        self.cmd_in(&self.dir, args)
    }

    fn cmd_in(&self, dir: &Path, args: &[&str]) -> Output {
        self.at(dir).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.cmd(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn prepared(self) -> Self {
        self.ok(&["synth"]);
        self.ok(&["preprocess"]);
        self
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn metrics_without_wall(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_s");
            v
        })
        .collect()
}

fn pointer(dir: &Path, which: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("checkpoints").join(format!("{which}.json"))).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn zero_epochs_saves_only_the_initial_checkpoint() {
    let run = Run::new().prepared();
    run.ok(&["train", "--set", "train.epochs=0"]);
    assert_eq!(pointer(&run.dir, "latest")["dir"], "step-00000000");
    assert_eq!(pointer(&run.dir, "best")["dir"], "step-00000000");
    let steps: Vec<_> = fs::read_dir(run.dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("step-"))
        .collect();
    assert_eq!(steps, vec!["step-00000000"]);
    assert!(fs::read_to_string(run.dir.join("metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let whole = Run::new().prepared();
    whole.ok(&["train"]);

    let split = Run::new().prepared();
    split.ok(&["train", "--set", "train.max_steps=6"]);
    split.ok(&["train", "--resume"]);

    assert_eq!(metrics_without_wall(&whole.dir), metrics_without_wall(&split.dir));
    let latest = pointer(&whole.dir, "latest");
    assert_eq!(latest["step"], 12);
    assert_eq!(latest, pointer(&split.dir, "latest"));
    let dir = latest["dir"].as_str().unwrap();
    assert_eq!(
        files(&whole.dir.join("checkpoints").join(dir)),
        files(&split.dir.join("checkpoints").join(dir))
    );
}

#[test]
fn retraining_needs_force() {
    let run = Run::new().prepared();
    run.ok(&["train", "--set", "train.max_steps=2"]);
    let out = run.cmd(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    run.ok(&["train", "--force", "--set", "train.max_steps=2"]);
    let out = run.cmd(&["synth"]);
    assert_eq!(code(&out), 1, "synth over an existing dataset");
}

#[test]
fn resume_with_a_different_model_is_a_config_error() {
    let run = Run::new().prepared();
    run.ok(&["train", "--set", "train.max_steps=2"]);
    let out = run.cmd(&["train", "--resume", "--set", "model.d1=12"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("d1"));
}

#[test]
fn corrupted_checkpoint_exits_with_data_error() {
    let run = Run::new().prepared();
    run.ok(&["train", "--set", "train.max_steps=2"]);
    let dir = run.dir.join("checkpoints").join(pointer(&run.dir, "best")["dir"].as_str().unwrap());
    let blob = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("param."))
        .unwrap();
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&blob, bytes).unwrap();
    let out = run.cmd(&["eval"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_writes_both_reports() {
    let run = Run::new().prepared();
    run.ok(&["train"]);
    run.ok(&["eval", "--set", "eval.checkpoint=latest"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["checkpoint"]["which"], "latest");
    assert_eq!(report["checkpoint"]["step"], 12);
    let m = &report["metrics"];
    let top1 = m["top1_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(m["top5_acc"].as_f64().unwrap() >= top1);
    let csv = fs::read_to_string(run.dir.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "window_index,subject_id,rank,top1_hit,levenshtein_norm,wer_general,wer_vocab"
    );
    assert_eq!(lines.count() as u64, m["n_examples"].as_u64().unwrap());
}

#[test]
fn unknown_key_and_bad_usage_exit_one() {
    let run = Run::new();
    assert_eq!(code(&run.cmd(&["synth", "--set", "model.width=3"])), 1);
    assert_eq!(code(&run.cmd(&["synth", "--set", "train.lr=fast"])), 1);
    assert_eq!(code(&run.cmd(&["frobnicate"])), 1);
    assert_eq!(code(&run.cmd(&["--help"])), 0);
}

#[test]
fn missing_windows_is_a_data_error() {
    let run = Run::new();
    let out = run.cmd(&["train"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn clamp_setting_is_recorded_in_provenance() {
    let run = Run::new();
    run.ok(&["synth"]);
    run.ok(&["preprocess", "--set", "preprocess.clamp_sigma=100"]);
    let log = fs::read_to_string(run.dir.join("windows").join("provenance.log")).unwrap();
    assert!(log.lines().any(|l| l.ends_with("clamp_std\tclamp_sigma=100")), "{log}");
    let manifest = fs::read_to_string(run.dir.join("windows").join("manifest.json")).unwrap();
    assert!(manifest.contains("clamp_sigma=100"));
    let echo = fs::read_to_string(run.dir.join("config.echo")).unwrap();
    assert!(echo.contains("clamp_sigma=100"));
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let run = Run::new();
    let a = run.dir.with_file_name("a");
    let b = run.dir.with_file_name("b");
    let c = run.dir.with_file_name("c");
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert!(run.cmd_in(dir, &["--seed", seed, "synth"]).status.success());
    }
    let (fa, fb, fc) = (files(&a.join("dataset")), files(&b.join("dataset")), files(&c.join("dataset")));
    assert!(fa.len() >= 5);
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn thread_count_does_not_change_preprocessing_or_eval() {
    let run = Run::new();
    let mut reports = Vec::new();
    for (name, threads) in [("one", "1"), ("four", "4")] {
        let dir = run.dir.with_file_name(name);
        for step in [&["synth"][..], &["preprocess"], &["train", "--set", "train.max_steps=4"], &["eval"]] {
            let out = run.at(&dir).args(step).env("NEURODECODE_THREADS", threads).output().unwrap();
            assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        reports.push((
            fs::read(dir.join("windows").join("manifest.json")).unwrap(),
            fs::read(dir.join("report.json")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
    let out = run.at(&run.dir).arg("synth").env("NEURODECODE_THREADS", "zero").output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_command_reports_each_seed() {
    let run = Run::new();
    let out = run.cmd(&["gradcheck", "--set", "gradcheck.seeds=2", "--set", "gradcheck.model_coords=4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("seed")).count(), 2);
    assert!(text.contains("gradient check passed"));
}
