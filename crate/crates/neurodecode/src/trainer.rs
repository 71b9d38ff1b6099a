//! The epoch loop around [`train_step`]: validation, checkpoints and the
//! metrics log.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neurodecode_core::eval::{self, CandidatePool, MetricsReport, Prediction, WindowResult};
use neurodecode_core::model::Model;
use neurodecode_core::preprocess::WindowPair;
use neurodecode_core::training::{advance, current_batch, train_step, ClipBatch, Part, Split, TrainConfig, TrainState};

use crate::archive::WindowSet;
use crate::checkpoint::{self, Pointer, BEST, LATEST};
use crate::config::{diff_maps, model_to_map};
use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub loss: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub wall_s: f64,
}

/// Embeds `windows` on the rayon pool, one chunk of `batch` per task.
/// Inference is per-example, so the result does not depend on the
/// number of workers.
pub fn evaluate_parallel(model: &Model, windows: &[&WindowPair], batch: usize) -> Result<(MetricsReport, Vec<WindowResult>)> {
    if windows.is_empty() {
        return Err(Error::Data("nothing to evaluate: the split is empty".into()));
    }
    let pool = CandidatePool::from_windows(windows.iter().copied())?;
    let chunks = windows
        .par_chunks(batch.max(1))
        .map(|chunk| eval::embed(model, chunk, batch))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let preds: Vec<Prediction<'_>> = windows
        .iter()
        .zip(chunks.into_iter().flatten())
        .map(|(w, z)| Prediction {
            subject_id: &w.subject_id,
            window_index: w.window_index,
            words: &w.words,
            z,
        })
        .collect();
    Ok(eval::evaluate_predictions(&preds, &pool)?)
}

pub struct TrainRun<'a> {
    pub windows: &'a WindowSet,
    pub model_config: neurodecode_core::model::ModelConfig,
    pub train: TrainConfig,
    pub eval_every: u64,
    pub eval_batch: usize,
    pub run_dir: &'a Path,
    pub resume: bool,
    pub force: bool,
}

pub fn checkpoint_root(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.jsonl")
}

/// Keeps only log lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: MetricsLine =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(Error::io(path))
}

fn save(root: &Path, model: &Model, state: &TrainState, val_top1: Option<f64>, best: bool) -> Result<()> {
    let dir = checkpoint::save(root, model, state)?;
    let p = Pointer {
        dir,
        step: state.step,
        val_top1,
    };
    checkpoint::set_pointer(root, LATEST, &p)?;
    if best {
        checkpoint::set_pointer(root, BEST, &p)?;
    }
    checkpoint::prune(root)
}

/// Trains until the configured epochs or step cap are reached, or resumes
/// from the latest checkpoint. Returns the final state.
pub fn train_loop(run: &TrainRun<'_>) -> Result<TrainState> {
    let ws = run.windows;
    let split = Split::new(ws.windows.iter().map(|w| w.window_index));
    let train_pos = split.select(&ws.windows, Part::Train);
    let val: Vec<&WindowPair> = split.select(&ws.windows, Part::Val).iter().map(|&i| &ws.windows[i]).collect();
    if train_pos.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    run.train.validate()?;
    let root = checkpoint_root(run.run_dir);
    let metrics = metrics_path(run.run_dir);
    let seed = run.train.seed;

    let (mut model, mut state) = if run.resume {
        let loaded = checkpoint::load(&root, LATEST)?;
        let diff = diff_maps(&model_to_map(&run.model_config), &model_to_map(&loaded.model.config));
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the configuration:\n  {}",
                loaded.dir.display(),
                diff.join("\n  ")
            )));
        }
        if loaded.state.seed != seed || loaded.model.subjects != ws.manifest.subjects {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different seed or subject list",
                loaded.dir.display()
            )));
        }
        truncate_metrics(&metrics, loaded.state.step)?;
        (loaded.model, loaded.state)
    } else {
        let stale = root.exists() || metrics.exists();
        if stale && !run.force {
            return Err(Error::Config(format!(
                "{} already holds a training run; pass --resume or --force",
                run.run_dir.display()
            )));
        }
        if root.exists() {
            fs::remove_dir_all(&root).map_err(Error::io(&root))?;
        }
        if metrics.exists() {
            fs::remove_file(&metrics).map_err(Error::io(&metrics))?;
        }
        fs::create_dir_all(&root).map_err(Error::io(&root))?;
        let model = Model::new(run.model_config.clone(), ws.manifest.subjects.clone(), ws.layout()?, seed)?;
        let state = TrainState::new(&model, seed);
        save(&root, &model, &state, None, true)?;
        (model, state)
    };

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(Error::io(&metrics))?;
    let n = train_pos.len();
    let bs = run.train.batch_size;
    let running = |s: &TrainState| s.epoch < run.train.epochs && run.train.max_steps.is_none_or(|m| s.step < m);
    let started = Instant::now();
    while running(&state) {
        let picked = current_batch(&state, n, bs)?;
        let refs: Vec<&WindowPair> = picked.iter().map(|&i| &ws.windows[train_pos[i]]).collect();
        let batch = ClipBatch::new(&model, &refs)?;
        let report = train_step(&mut model, &batch, &mut state, &run.train)?;
        let epoch_done = advance(&mut state, n, bs);
        let periodic = run.eval_every > 0 && state.step % run.eval_every == 0;
        let evaluate = epoch_done || periodic || !running(&state);
        let mut line = MetricsLine {
            step: state.step,
            loss: report.loss,
            val_top1: None,
            val_top5: None,
            wall_s: 0.0,
        };
        let mut improved = false;
        if evaluate {
            if val.is_empty() {
                improved = true;
            } else {
                let (rep, _) = evaluate_parallel(&model, &val, run.eval_batch)?;
                line.val_top1 = Some(rep.top1_acc);
                line.val_top5 = Some(rep.top5_acc);
                if state.best_val_top1.is_none_or(|b| rep.top1_acc > b) {
                    state.best_val_top1 = Some(rep.top1_acc);
                    improved = true;
                }
            }
        }
        line.wall_s = started.elapsed().as_secs_f64();
        let mut text = serde_json::to_string(&line).expect("metrics serialize");
        text.push('\n');
        log.write_all(text.as_bytes()).map_err(Error::io(&metrics))?;
        log.flush().map_err(Error::io(&metrics))?;
        if evaluate {
            save(&root, &model, &state, line.val_top1, improved)?;
        }
    }
    Ok(state)
}
