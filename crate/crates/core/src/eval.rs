//! Retrieval decoding and word-level metrics.
//!
//! A window is decoded by ranking the audio windows of a candidate pool
//! by normalised inner product with the predicted embedding and reading
//! off the words of the best match.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::WindowPair;
use crate::tensor::Tensor;
use crate::training::NORM_EPS;

/// Lower-cases and drops every non-alphanumeric character; words that end
/// up empty are removed.
pub fn normalize_words<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .map(|w| {
            w.as_ref()
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Unit-cost edit distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edit distance between the space-joined word sequences,
/// divided by the number of target words. `None` for an empty target.
pub fn levenshtein_norm<S: AsRef<str>>(pred: &[S], target: &[S]) -> Option<f64> {
    if target.is_empty() {
        return None;
    }
    let join = |ws: &[S]| -> Vec<char> {
        let mut out = Vec::new();
        for (i, w) in ws.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.extend(w.as_ref().chars());
        }
        out
    };
    Some(edit_distance(&join(pred), &join(target)) as f64 / target.len() as f64)
}

/// Positional word error rate: every position up to the longer length
/// where the words differ (or one is missing) is an error; the count is
/// divided by the target length.
pub fn wer_general<S: AsRef<str>>(pred: &[S], target: &[S]) -> f64 {
    let n = pred.len().max(target.len());
    let errors = (0..n)
        .filter(|&i| match (pred.get(i), target.get(i)) {
            (Some(p), Some(t)) => p.as_ref() != t.as_ref(),
            _ => true,
        })
        .count();
    errors as f64 / target.len().max(1) as f64
}

/// Fraction of predicted words outside `vocab`; 0 for an empty
/// prediction.
pub fn wer_vocab<S: AsRef<str>>(pred: &[S], vocab: &BTreeSet<String>) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let missing = pred.iter().filter(|w| !vocab.contains(w.as_ref())).count();
    missing as f64 / pred.len() as f64
}

fn unit(x: &[f64]) -> Vec<f64> {
    let d = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
    x.iter().map(|v| v / d).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The audio windows a prediction is matched against.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    units: Vec<Vec<f64>>,
    shape: Vec<usize>,
    pub window_indices: Vec<usize>,
    pub word_lists: Vec<Vec<String>>,
    pub vocabulary: BTreeSet<String>,
}

impl CandidatePool {
    /// One candidate per `(window index, audio, words)` entry.
    pub fn new(entries: Vec<(usize, &Tensor, Vec<String>)>) -> Result<Self> {
        let Some((_, first, _)) = entries.first() else {
            return Err(Error::Contract("the candidate pool is empty".into()));
        };
        let shape = first.shape().to_vec();
        let mut pool = Self {
            units: Vec::with_capacity(entries.len()),
            shape,
            window_indices: Vec::with_capacity(entries.len()),
            word_lists: Vec::with_capacity(entries.len()),
            vocabulary: BTreeSet::new(),
        };
        for (w, audio, words) in entries {
            if audio.shape() != pool.shape.as_slice() {
                return Err(Error::dim("candidate pool", &pool.shape, audio.shape()));
            }
            let words = normalize_words(&words);
            pool.vocabulary.extend(words.iter().cloned());
            pool.units.push(unit(audio.data()));
            pool.window_indices.push(w);
            pool.word_lists.push(words);
        }
        Ok(pool)
    }

    /// The distinct audio windows among `windows`, in window-index order.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a WindowPair>) -> Result<Self> {
        let mut seen: Vec<&WindowPair> = windows.into_iter().collect();
        seen.sort_by_key(|w| w.window_index);
        seen.dedup_by_key(|w| w.window_index);
        Self::new(seen.into_iter().map(|w| (w.window_index, &w.audio, w.words.clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Normalised inner product of `z` with every candidate.
    pub fn scores(&self, z: &Tensor) -> Result<Vec<f64>> {
        if z.shape() != self.shape.as_slice() {
            return Err(Error::dim("retrieve", z.shape(), &self.shape));
        }
        let u = unit(z.data());
        Ok(self.units.iter().map(|c| dot(&u, c)).collect())
    }
}

/// Indices of the `k` best-scoring candidates, best first; ties go to the
/// lower index.
pub fn retrieve(z: &Tensor, pool: &CandidatePool, k: usize) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::Contract("the candidate pool is empty".into()));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::Contract(format!("k = {k} for a pool of {}", pool.len())));
    }
    let scores = pool.scores(z)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Words of the top-ranked candidate.
pub fn predict_words<'p>(z: &Tensor, pool: &'p CandidatePool) -> Result<&'p [String]> {
    let best = retrieve(z, pool, 1)?[0];
    Ok(&pool.word_lists[best])
}

/// Aggregate evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub top1_acc: f64,
    pub top5_acc: f64,
    pub top10_acc: f64,
    pub wer_general: f64,
    pub wer_vocab: f64,
    /// Mean over examples with a non-empty target.
    pub levenshtein_norm: f64,
    pub n_examples: usize,
    /// Examples left out of the Levenshtein mean for lack of target words.
    pub n_empty_targets: usize,
    pub vocab_size: usize,
    pub pool_size: usize,
}

impl MetricsReport {
    pub fn accuracy_general(&self) -> f64 {
        1.0 - self.wer_general
    }

    pub fn accuracy_vocab(&self) -> f64 {
        1.0 - self.wer_vocab
    }
}

/// Per-example evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub subject_id: String,
    pub window_index: usize,
    /// 1-based rank of the true window in the pool.
    pub rank: usize,
    pub top1_hit: bool,
    pub levenshtein_norm: Option<f64>,
    pub wer_general: f64,
    pub wer_vocab: f64,
}

/// One predicted embedding to score.
#[derive(Debug, Clone)]
pub struct Prediction<'a> {
    pub subject_id: &'a str,
    pub window_index: usize,
    pub words: &'a [String],
    pub z: Tensor,
}

fn score_one(p: &Prediction<'_>, pool: &CandidatePool) -> Result<WindowResult> {
    let scores = pool.scores(&p.z)?;
    let Some(truth) = pool.window_indices.iter().position(|&w| w == p.window_index) else {
        return Err(Error::Contract(format!("window {} is not in the pool", p.window_index)));
    };
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > scores[truth] || (s == scores[truth] && i < truth))
        .count();
    let best = retrieve(&p.z, pool, 1)?[0];
    let pred = &pool.word_lists[best];
    let target = normalize_words(p.words);
    Ok(WindowResult {
        subject_id: p.subject_id.into(),
        window_index: p.window_index,
        rank: better + 1,
        top1_hit: best == truth,
        levenshtein_norm: levenshtein_norm(pred, &target),
        wer_general: wer_general(pred, &target),
        wer_vocab: wer_vocab(pred, &pool.vocabulary),
    })
}

/// Scores every prediction against `pool` and aggregates. The result does
/// not depend on the order of `predictions`.
pub fn evaluate_predictions(predictions: &[Prediction<'_>], pool: &CandidatePool) -> Result<(MetricsReport, Vec<WindowResult>)> {
    if predictions.is_empty() {
        return Err(Error::Contract("nothing to evaluate: the test split is empty".into()));
    }
    let mut results = predictions
        .iter()
        .map(|p| score_one(p, pool))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| (a.window_index, &a.subject_id).cmp(&(b.window_index, &b.subject_id)));
    Ok((aggregate(&results, pool), results))
}

/// Means over per-window records, summed in the order given.
pub fn aggregate(results: &[WindowResult], pool: &CandidatePool) -> MetricsReport {
    let n = results.len() as f64;
    let within = |k: usize| results.iter().filter(|r| r.rank <= k.min(pool.len())).count() as f64 / n;
    let lev: Vec<f64> = results.iter().filter_map(|r| r.levenshtein_norm).collect();
    MetricsReport {
        top1_acc: within(1),
        top5_acc: within(5),
        top10_acc: within(10),
        wer_general: results.iter().map(|r| r.wer_general).sum::<f64>() / n,
        wer_vocab: results.iter().map(|r| r.wer_vocab).sum::<f64>() / n,
        levenshtein_norm: if lev.is_empty() {
            0.0
        } else {
            lev.iter().sum::<f64>() / lev.len() as f64
        },
        n_examples: results.len(),
        n_empty_targets: results.len() - lev.len(),
        vocab_size: pool.vocabulary.len(),
        pool_size: pool.len(),
    }
}

/// Runs `model` over `windows` in batches of `batch`, returning one
/// `[F×T]` embedding per window.
pub fn embed(model: &Model, windows: &[&WindowPair], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let eeg: Vec<&Tensor> = chunk.iter().map(|w| &w.eeg).collect();
        let ids: Vec<&str> = chunk.iter().map(|w| w.subject_id.as_str()).collect();
        let z = model.infer(&Tensor::stack(&eeg)?, &model.subject_indices(&ids)?)?;
        out.extend((0..chunk.len()).map(|i| z.index_outer(i)));
    }
    Ok(out)
}

/// Decodes every window with `model` against a pool of the distinct
/// audio windows among them.
pub fn evaluate(model: &Model, windows: &[&WindowPair], batch: usize) -> Result<(MetricsReport, Vec<WindowResult>)> {
    if windows.is_empty() {
        return Err(Error::Contract("nothing to evaluate: the test split is empty".into()));
    }
    let pool = CandidatePool::from_windows(windows.iter().copied())?;
    let z = embed(model, windows, batch)?;
    let preds: Vec<Prediction<'_>> = windows
        .iter()
        .zip(z)
        .map(|(w, z)| Prediction {
            subject_id: &w.subject_id,
            window_index: w.window_index,
            words: &w.words,
            z,
        })
        .collect();
    evaluate_predictions(&preds, &pool)
}
