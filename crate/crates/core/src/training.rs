//! Contrastive (CLIP-style) training.
//!
//! Each EEG window in a batch is scored against every audio window in
//! the same batch; the matching audio is the positive and the others are
//! negatives. The loss is the mean cross-entropy of the positive under a
//! row-wise softmax of the scores.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::preprocess::WindowPair;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Norms below this are treated as zero when normalising embeddings.
pub const NORM_EPS: f64 = 1e-12;

/// Similarity kernel settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    /// Softmax temperature.
    pub temperature: f64,
    /// L2-normalise both embeddings before the inner product. Off, with
    /// temperature 1, gives the raw dot-product objective.
    pub normalize: bool,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            normalize: true,
        }
    }
}

impl ClipConfig {
    /// Raw inner products at unit temperature.
    pub fn literal() -> Self {
        Self {
            temperature: 1.0,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn flatten(g: &mut Graph, x: Var, what: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::Contract(format!("{what} must be N×…, got {s:?}")));
    }
    let n = s[0];
    g.reshape(x, &[n, s[1..].iter().product()])
}

/// `score[i,j] = ⟨Z_i, Y_j⟩` over all trailing axes, on normalised
/// embeddings unless `cfg.normalize` is off.
pub fn clip_scores(g: &mut Graph, z: Var, y: Var, cfg: &ClipConfig) -> Result<Var> {
    if g.shape(z) != g.shape(y) {
        return Err(Error::dim("clip_scores", g.shape(z), g.shape(y)));
    }
    let mut z = flatten(g, z, "Z")?;
    let mut y = flatten(g, y, "Y")?;
    if cfg.normalize {
        z = g.l2_normalize(z, NORM_EPS);
        y = g.l2_normalize(y, NORM_EPS);
    }
    let yt = g.swap_last2(y)?;
    g.matmul(z, yt)
}

/// `−(1/N) Σ_i log softmax(scores[i,:] / τ)[i]`.
pub fn clip_loss(g: &mut Graph, scores: Var, temperature: f64) -> Result<Var> {
    let n = match g.shape(scores) {
        [r, c] if r == c => *r,
        s => return Err(Error::Contract(format!("scores must be square, got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::Contract("a contrastive batch needs at least two entries".into()));
    }
    // −∞ entries are masked negatives; anything else non-finite is a bug
    let bad = g.value(scores).data().iter().enumerate().any(|(i, v)| {
        v.is_nan() || *v == f64::INFINITY || (v.is_infinite() && i / n == i % n)
    });
    if bad {
        return Err(Error::Numerical {
            stage: "clip_scores".into(),
            detail: "non-finite similarity".into(),
        });
    }
    let scaled = g.scale(scores, 1.0 / temperature);
    let logp = g.log_softmax(scaled);
    let diag: Vec<usize> = (0..n).collect();
    let picked = g.pick(logp, &diag)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Score matrix of two plain tensors.
pub fn clip_scores_of(z: &Tensor, y: &Tensor, cfg: &ClipConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (zv, yv) = (g.constant(z.clone()), g.constant(y.clone()));
    let s = clip_scores(&mut g, zv, yv, cfg)?;
    Ok(g.value(s).clone())
}

/// Loss value of a plain score matrix.
pub fn clip_loss_of(scores: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let l = clip_loss(&mut g, s, temperature)?;
    Ok(g.value(l).data()[0])
}

/// Entries of an `N×…` tensor whose L2 norm is below [`NORM_EPS`].
pub fn zero_norm_rows(x: &Tensor) -> Vec<usize> {
    let n = x.shape()[0];
    let len = x.len() / n;
    x.data()
        .chunks_exact(len)
        .enumerate()
        .filter(|(_, r)| libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()) < NORM_EPS)
        .map(|(i, _)| i)
        .collect()
}

/// Which block of the stimulus timeline a window belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Contiguous 80/10/10 split of the distinct window indices. Every
/// subject's copy of a window lands in the same part.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(window_indices: impl IntoIterator<Item = usize>) -> Self {
        let mut ids: Vec<usize> = window_indices.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len();
        let n_eval = n / 10;
        let n_train = n - 2 * n_eval;
        Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_eval].to_vec(),
            test: ids[n_train + n_eval..].to_vec(),
        }
    }

    pub fn part_of(&self, window_index: usize) -> Option<Part> {
        if self.train.binary_search(&window_index).is_ok() {
            Some(Part::Train)
        } else if self.val.binary_search(&window_index).is_ok() {
            Some(Part::Val)
        } else if self.test.binary_search(&window_index).is_ok() {
            Some(Part::Test)
        } else {
            None
        }
    }

    /// Positions in `windows` of the entries belonging to `part`.
    pub fn select(&self, windows: &[WindowPair], part: Part) -> Vec<usize> {
        windows
            .iter()
            .enumerate()
            .filter(|(_, w)| self.part_of(w.window_index) == Some(part))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Batches of one epoch: a seeded permutation of `0..n_items` cut into
/// chunks of `batch_size`, with the short remainder dropped.
pub fn epoch_batches(n_items: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if batch_size > n_items {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds the {n_items} training windows"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng::derive(seed, Stream::Shuffle, epoch));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Positions (into the training set) of the batch at the state's
/// cursor. Call [`advance`] after the step.
pub fn current_batch(state: &TrainState, n_items: usize, batch_size: usize) -> Result<Vec<usize>> {
    let batches = epoch_batches(n_items, batch_size, state.seed, state.epoch)?;
    Ok(batches[state.batch_in_epoch.min(batches.len() - 1)].clone())
}

/// Moves the batch cursor on; returns `true` when that completed an
/// epoch, in which case the cursor wraps to the next one.
pub fn advance(state: &mut TrainState, n_items: usize, batch_size: usize) -> bool {
    state.batch_in_epoch += 1;
    if state.batch_in_epoch >= n_items / batch_size {
        state.batch_in_epoch = 0;
        state.epoch += 1;
        true
    } else {
        false
    }
}

/// One contrastive batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    /// `[N×C×T]`
    pub eeg: Tensor,
    /// `[N×F×T]`
    pub audio: Tensor,
    pub subjects: Vec<usize>,
    pub window_indices: Vec<usize>,
}

impl ClipBatch {
    pub fn new(model: &Model, windows: &[&WindowPair]) -> Result<Self> {
        if windows.len() < 2 {
            return Err(Error::Contract("a contrastive batch needs at least two windows".into()));
        }
        let eeg: Vec<&Tensor> = windows.iter().map(|w| &w.eeg).collect();
        let audio: Vec<&Tensor> = windows.iter().map(|w| &w.audio).collect();
        let ids: Vec<&str> = windows.iter().map(|w| w.subject_id.as_str()).collect();
        Ok(Self {
            eeg: Tensor::stack(&eeg)?,
            audio: Tensor::stack(&audio)?,
            subjects: model.subject_indices(&ids)?,
            window_indices: windows.iter().map(|w| w.window_index).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// `−∞` where entry `j` carries the same audio as entry `i ≠ j`: two
    /// subjects hearing the same window are not negatives of each other.
    pub fn duplicate_mask(&self) -> Option<Tensor> {
        let n = self.len();
        let w = &self.window_indices;
        let mut any = false;
        let mask = Tensor::from_fn([n, n], |k| {
            let (i, j) = (k / n, k % n);
            if i != j && w[i] == w[j] {
                any = true;
                f64::NEG_INFINITY
            } else {
                0.0
            }
        });
        any.then_some(mask)
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many steps in total, if set.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub clip: ClipConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            adam: AdamConfig::default(),
            clip: ClipConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        self.adam.validate()?;
        self.clip.validate()
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub seed: u64,
    pub adam: AdamState,
    pub best_val_top1: Option<f64>,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            seed,
            adam: AdamState::new(model.params.sizes()),
            best_val_top1: None,
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Embeddings with (near) zero norm in this batch.
    pub zero_norm: usize,
}

/// One Adam update of `model` on the contrastive loss of `batch`.
///
/// Spatial dropout draws from a stream keyed by the step number, so a
/// resumed run sees the same masks as an uninterrupted one.
pub fn train_step(model: &mut Model, batch: &ClipBatch, state: &mut TrainState, cfg: &TrainConfig) -> Result<StepReport> {
    cfg.validate()?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let mut session = model.session(params.clone(), true);
    let x = g.constant(batch.eeg.clone());
    let mut dropout = rng::derive(state.seed, Stream::Dropout, state.step);
    let z = session.forward(&mut g, x, &batch.subjects, Some(&mut dropout))?;
    let stats = core::mem::take(&mut session.bn_stats);
    let zero_norm = zero_norm_rows(g.value(z)).len();
    let y = g.constant(batch.audio.clone());
    let mut scores = clip_scores(&mut g, z, y, &cfg.clip)?;
    if let Some(mask) = batch.duplicate_mask() {
        let m = g.constant(mask);
        scores = g.add(scores, m)?;
    }
    let loss = clip_loss(&mut g, scores, cfg.clip.temperature)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical {
            stage: "clip_loss".into(),
            detail: format!("loss {value} at step {}", state.step),
        });
    }
    let grads = g.backward(loss)?;
    let gs: Vec<Option<&[f64]>> = params.iter().map(|v| grads.get(*v)).collect();
    if let Some(i) = gs.iter().position(|g| g.is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        let name = model.params.names().nth(i).unwrap_or("?");
        return Err(Error::Numerical {
            stage: "backward".into(),
            detail: format!("non-finite gradient for {name} at step {}", state.step),
        });
    }
    let mut slots: Vec<&mut [f64]> = model.params.tensors_mut().map(Tensor::data_mut).collect();
    adam_step(&mut slots, &gs, &mut state.adam, &cfg.adam)?;
    model.update_running_stats(&stats)?;
    state.step += 1;
    Ok(StepReport { loss: value, zero_norm })
}
