use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use neurodecode_core::eval::{MetricsReport, WindowResult};
use neurodecode_core::gradcheck;
use neurodecode_core::preprocess::{self, make_windows, WindowPair};
use neurodecode_core::synthetic::generate_synthetic;
use neurodecode_core::training::{Part, Split};
use neurodecode_core::Error as CoreError;

use crate::archive::{self, prepare_output_dir, Provenance, WindowArchive};
use crate::checkpoint;
use crate::config::{diff_maps, model_to_map, RunConfig};
use crate::error::{Error, Result};
use crate::trainer::{self, evaluate_parallel, TrainRun};

/// Everything a command needs: the merged configuration and where to put
/// its outputs.
pub struct Context {
    pub config: RunConfig,
    pub run_dir: PathBuf,
    pub force: bool,
}

impl Context {
    fn resolve(&self, key: &str) -> PathBuf {
        let p = Path::new(self.config.get(key));
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.run_dir.join(p)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.resolve("io.dataset_dir")
    }

    pub fn windows_dir(&self) -> PathBuf {
        self.resolve("io.windows_dir")
    }

    /// Creates the run directory and records the merged configuration.
    pub fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(Error::io(&self.run_dir))?;
        let path = self.run_dir.join("config.echo");
        fs::write(&path, self.config.echo()).map_err(Error::io(&path))
    }

    fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        self.config
            .values()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

pub fn synth(ctx: &Context) -> Result<PathBuf> {
    ctx.echo()?;
    let ds = generate_synthetic(&ctx.config.synthetic())?;
    let dir = ctx.dataset_dir();
    prepare_output_dir(&dir, ctx.force)?;
    archive::write_synthetic(&dir, &ds)?;
    Ok(dir)
}

pub fn preprocess(ctx: &Context) -> Result<PathBuf> {
    ctx.echo()?;
    let cfg = ctx.config.preprocess();
    cfg.validate()?;
    let ds = archive::read_dataset(&ctx.dataset_dir())?;
    let (features, onsets) = ds.features(&cfg)?;
    let cleaned = ds
        .recordings
        .par_iter()
        .map(|rec| {
            let clean = preprocess::preprocess_recording(rec, &cfg)?;
            let windows = make_windows(&clean, &features, &onsets, &ds.alignment, &cfg)?;
            Ok((clean, windows))
        })
        .collect::<std::result::Result<Vec<_>, CoreError>>()?;

    let (first, _) = &cleaned[0];
    for (c, _) in &cleaned[1..] {
        if c.channel_names != first.channel_names || c.layout != first.layout {
            return Err(Error::Data(format!(
                "{} and {} use different channel sets; all subjects must share one layout",
                first.subject_id, c.subject_id
            )));
        }
    }
    let mut provenance = BTreeMap::new();
    let mut log = String::new();
    for (c, _) in &cleaned {
        for p in &c.provenance {
            log.push_str(&format!("{}\t{}\t{}\n", c.subject_id, p.step, p.detail));
        }
        provenance.insert(
            c.subject_id.clone(),
            c.provenance
                .iter()
                .map(|p| Provenance {
                    step: p.step.to_string(),
                    detail: p.detail.clone(),
                })
                .collect(),
        );
    }
    let windows: Vec<WindowPair> = cleaned.iter().flat_map(|(_, w)| w.iter().cloned()).collect();
    let dir = ctx.windows_dir();
    prepare_output_dir(&dir, ctx.force)?;
    archive::write_windows(
        &dir,
        &WindowArchive {
            subjects: cleaned.iter().map(|(c, _)| c.subject_id.clone()).collect(),
            channel_names: first.channel_names.clone(),
            layout: &first.layout,
            config: ctx.section("preprocess."),
            provenance,
            windows: &windows,
        },
    )?;
    let log_path = dir.join("provenance.log");
    fs::write(&log_path, log).map_err(Error::io(&log_path))?;
    Ok(dir)
}

pub fn train(ctx: &Context, resume: bool) -> Result<neurodecode_core::training::TrainState> {
    ctx.echo()?;
    let ws = archive::read_windows(&ctx.windows_dir())?;
    let run = TrainRun {
        windows: &ws,
        model_config: ctx.config.model(ws.n_channels(), ws.n_features()),
        train: ctx.config.train(),
        eval_every: ctx.config.eval_every(),
        eval_batch: ctx.config.eval_batch(),
        run_dir: &ctx.run_dir,
        resume,
        force: ctx.force,
    };
    trainer::train_loop(&run)
}

#[derive(Debug, Serialize)]
struct MetricsJson {
    top1_acc: f64,
    top5_acc: f64,
    top10_acc: f64,
    wer_general: f64,
    wer_vocab: f64,
    accuracy_general: f64,
    accuracy_vocab: f64,
    levenshtein_norm: f64,
    n_examples: usize,
    n_empty_targets: usize,
    vocab_size: usize,
    pool_size: usize,
}

impl From<&MetricsReport> for MetricsJson {
    fn from(r: &MetricsReport) -> Self {
        Self {
            top1_acc: r.top1_acc,
            top5_acc: r.top5_acc,
            top10_acc: r.top10_acc,
            wer_general: r.wer_general,
            wer_vocab: r.wer_vocab,
            accuracy_general: r.accuracy_general(),
            accuracy_vocab: r.accuracy_vocab(),
            levenshtein_norm: r.levenshtein_norm,
            n_examples: r.n_examples,
            n_empty_targets: r.n_empty_targets,
            vocab_size: r.vocab_size,
            pool_size: r.pool_size,
        }
    }
}

#[derive(Debug, Serialize)]
struct CheckpointRef {
    which: String,
    step: u64,
}

#[derive(Debug, Serialize)]
struct Report {
    metrics: MetricsJson,
    checkpoint: CheckpointRef,
    dataset_sha256: String,
    config: BTreeMap<String, String>,
}

fn write_csv(path: &Path, rows: &[WindowResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["window_index", "subject_id", "rank", "top1_hit", "levenshtein_norm", "wer_general", "wer_vocab"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.window_index.to_string(),
            r.subject_id.clone(),
            r.rank.to_string(),
            u8::from(r.top1_hit).to_string(),
            r.levenshtein_norm.map_or(String::new(), |v| v.to_string()),
            r.wer_general.to_string(),
            r.wer_vocab.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Scores the chosen checkpoint on the test split and writes
/// `report.json` and `report.csv`.
pub fn eval(ctx: &Context) -> Result<MetricsReport> {
    ctx.echo()?;
    let ws = archive::read_windows(&ctx.windows_dir())?;
    let which = ctx.config.eval_checkpoint().to_string();
    let root = trainer::checkpoint_root(&ctx.run_dir);
    let loaded = checkpoint::load(&root, &which)?;
    let expected = ctx.config.model(ws.n_channels(), ws.n_features());
    let diff = diff_maps(&model_to_map(&expected), &model_to_map(&loaded.model.config));
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configuration:\n  {}",
            loaded.dir.display(),
            diff.join("\n  ")
        )));
    }
    let split = Split::new(ws.windows.iter().map(|w| w.window_index));
    let test: Vec<&WindowPair> = split.select(&ws.windows, Part::Test).iter().map(|&i| &ws.windows[i]).collect();
    let (report, rows) = evaluate_parallel(&loaded.model, &test, ctx.config.eval_batch())?;
    let json = Report {
        metrics: MetricsJson::from(&report),
        checkpoint: CheckpointRef {
            which,
            step: loaded.state.step,
        },
        dataset_sha256: ws.sha256.clone(),
        config: ctx.config.values().clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&json).expect("report serializes");
    bytes.push(b'\n');
    archive::write_atomic(&ctx.run_dir.join("report.json"), &bytes)?;
    write_csv(&ctx.run_dir.join("report.csv"), &rows)?;
    Ok(report)
}

/// One line per seed; fails if any check exceeds its tolerance.
pub fn gradcheck(ctx: &Context, out: &mut dyn std::io::Write) -> Result<()> {
    ctx.echo()?;
    let (seeds, coords, op_tol, model_tol) = ctx.config.gradcheck();
    let mut failures = Vec::new();
    for seed in 0..seeds {
        let ops = gradcheck::op_suite(seed)?;
        let model = gradcheck::model_check(gradcheck::model_check_config(), seed, coords)?;
        let worst = ops.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        for c in ops.iter().filter(|c| !c.passed(op_tol)) {
            failures.push(format!("seed {seed}: {} rel err {:.3e}", c.name, c.max_rel_error));
        }
        if !model.passed(model_tol) {
            failures.push(format!("seed {seed}: model rel err {:.3e}", model.max_rel_error));
        }
        let _ = writeln!(
            out,
            "seed {seed:>2}: {} ops max rel err {worst:.2e}, model rel err {:.2e}",
            ops.len(),
            model.max_rel_error
        );
    }
    if failures.is_empty() {
        let _ = writeln!(out, "gradient check passed");
        Ok(())
    } else {
        Err(CoreError::Numerical {
            stage: "gradcheck".into(),
            detail: failures.join("; "),
        }
        .into())
    }
}
