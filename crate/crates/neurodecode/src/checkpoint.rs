//! Training checkpoints.
//!
//! Each checkpoint is an immutable `step-NNNNNNNN/` directory holding a
//! manifest and one float64 blob per tensor. `latest.json` and
//! `best.json` point at a step directory and are swapped atomically, so an
//! interrupted write never leaves a pointer to a half-written checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neurodecode_core::data::SensorLayout;
use neurodecode_core::model::{Model, ParamStore};
use neurodecode_core::optim::{AdamState, Moments};
use neurodecode_core::training::TrainState;

use crate::archive::{sha256_hex, write_atomic, Blob};
use crate::config::{model_from_map, model_to_map};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: Group,
    pub name: String,
    #[serde(flatten)]
    pub blob: Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub seed: u64,
    pub adam_t: u64,
    pub best_val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: BTreeMap<String, String>,
    pub subjects: Vec<String>,
    pub layout: Vec<[f64; 2]>,
    pub state: StateEntry,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pointer {
    pub dir: String,
    pub step: u64,
    pub val_top1: Option<f64>,
}

pub const LATEST: &str = "latest";
pub const BEST: &str = "best";

fn step_dir(step: u64) -> String {
    format!("step-{step:08}")
}

/// Saves model and optimiser state under `root/step-NNNNNNNN/`.
pub fn save(root: &Path, model: &Model, state: &TrainState) -> Result<String> {
    let name = step_dir(state.step);
    let dir = root.join(&name);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(Error::io(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let mut tensors = Vec::new();
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            group: Group::Param,
            name: name.to_string(),
            blob: Blob::write(&dir, &format!("param.{name}.f64"), t)?,
        });
    }
    for (name, t) in model.buffers.iter() {
        tensors.push(TensorEntry {
            group: Group::Buffer,
            name: name.to_string(),
            blob: Blob::write(&dir, &format!("buffer.{name}.f64"), t)?,
        });
    }
    for ((name, _), m) in model.params.iter().zip(&state.adam.moments) {
        for (group, suffix, data) in [(Group::AdamM, "m", &m.m), (Group::AdamV, "v", &m.v)] {
            tensors.push(TensorEntry {
                group,
                name: name.to_string(),
                blob: Blob::write_raw(&dir, &format!("adam.{name}.{suffix}.f64"), vec![data.len()], data)?,
            });
        }
    }
    let manifest = Manifest {
        model: model_to_map(&model.config),
        subjects: model.subjects.clone(),
        layout: model.layout.positions().to_vec(),
        state: StateEntry {
            step: state.step,
            epoch: state.epoch,
            batch_in_epoch: state.batch_in_epoch,
            seed: state.seed,
            adam_t: state.adam.t,
            best_val_top1: state.best_val_top1,
        },
        tensors,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(crate::archive::MANIFEST), &bytes)?;
    Ok(name)
}

pub fn set_pointer(root: &Path, which: &str, pointer: &Pointer) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(pointer).expect("pointer serializes");
    write_atomic(&root.join(format!("{which}.json")), &bytes)
}

pub fn pointer(root: &Path, which: &str) -> Result<Option<Pointer>> {
    let path = root.join(format!("{which}.json"));
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Integrity {
        path,
        detail: e.to_string(),
    })
}

/// Removes step directories that no pointer refers to.
pub fn prune(root: &Path) -> Result<()> {
    let keep: BTreeSet<String> = [LATEST, BEST]
        .iter()
        .filter_map(|w| pointer(root, w).ok().flatten())
        .map(|p| p.dir)
        .collect();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let entry = entry.map_err(Error::io(root))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("step-") && !keep.contains(&name) {
            fs::remove_dir_all(entry.path()).map_err(Error::io(entry.path()))?;
        }
    }
    Ok(())
}

/// A checkpoint read back from disk.
pub struct Loaded {
    pub model: Model,
    pub state: TrainState,
    pub dir: PathBuf,
}

/// Loads the checkpoint `which` points at, verifying every blob digest.
pub fn load(root: &Path, which: &str) -> Result<Loaded> {
    let p = pointer(root, which)?
        .ok_or_else(|| Error::Data(format!("no {which} checkpoint under {}", root.display())))?;
    load_dir(&root.join(p.dir))
}

pub fn load_dir(dir: &Path) -> Result<Loaded> {
    let path = dir.join(crate::archive::MANIFEST);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Integrity {
        path: path.clone(),
        detail: format!("unreadable manifest ({e}); sha256 {}", sha256_hex(&bytes)),
    })?;
    let config = model_from_map(&manifest.model)?;
    let layout = SensorLayout::new(manifest.layout.clone())?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut m: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut v: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in &manifest.tensors {
        match e.group {
            Group::Param => params.insert(e.name.clone(), e.blob.read(dir)?),
            Group::Buffer => buffers.insert(e.name.clone(), e.blob.read(dir)?),
            Group::AdamM => {
                m.insert(&e.name, e.blob.read_raw(dir)?);
            }
            Group::AdamV => {
                v.insert(&e.name, e.blob.read_raw(dir)?);
            }
        }
    }
    let model = Model::from_parts(config, manifest.subjects.clone(), layout, params, buffers)?;
    let moments = model
        .params
        .iter()
        .map(|(name, t)| {
            let mm = m.remove(name);
            let vv = v.remove(name);
            match (mm, vv) {
                (Some(mm), Some(vv)) if mm.len() == t.len() && vv.len() == t.len() => Ok(Moments { m: mm, v: vv }),
                _ => Err(Error::Integrity {
                    path: path.clone(),
                    detail: format!("optimiser moments for {name} are missing or mis-sized"),
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let s = &manifest.state;
    let state = TrainState {
        step: s.step,
        epoch: s.epoch,
        batch_in_epoch: s.batch_in_epoch,
        seed: s.seed,
        adam: AdamState { t: s.adam_t, moments },
        best_val_top1: s.best_val_top1,
    };
    Ok(Loaded {
        model,
        state,
        dir: dir.to_path_buf(),
    })
}
