//! The EEG-to-audio-feature decoding network.
//!
//! Five stages are applied in order to a `[B×C×T]` batch:
//!
//! 1. spatial attention: each of `D1` virtual channels is a softmax-weighted
//!    mix of the input sensors, with scores given by a learned Fourier
//!    series over the 2-D sensor positions;
//! 2. a subject stage that personalises the virtual channels;
//! 3. `n_blocks` residual blocks of dilated convolutions ending in a GLU;
//! 4. two recurrent blocks, optionally bidirectional with self-attention;
//! 5. two 1×1 convolutions down to `F_out` feature channels.
//!
//! Parameters live in a [`ParamStore`] and are bound into a fresh
//! [`Graph`] for every pass, so a [`Model`] is immutable while it runs.

mod params;
mod stages;
#[cfg(test)]
mod tests;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::kernels::BatchStats;
use crate::autodiff::{Graph, Var};
use crate::data::SensorLayout;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

pub use params::ParamStore;
pub use stages::Session;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectMode {
    Shared,
    SubjectLayer,
    SubjectEmbedding,
    SubjectAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    Shared,
    PerSubject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnMode {
    Unidirectional,
    BidirectionalAttention,
}

macro_rules! mode_names {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),*
                }
            }

            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        s
                    ))),
                }
            }
        }
    };
}

mode_names!(SubjectMode {
    Shared => "shared",
    SubjectLayer => "subject_layer",
    SubjectEmbedding => "subject_embedding",
    SubjectAttention => "subject_attention",
});
mode_names!(SpatialMode { Shared => "shared", PerSubject => "per_subject" });
mode_names!(RnnMode {
    Unidirectional => "unidirectional",
    BidirectionalAttention => "bidirectional_attention",
});

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c_in: usize,
    pub d1: usize,
    pub d2: usize,
    pub n_blocks: usize,
    /// Side of the harmonic grid of the spatial Fourier scores.
    pub k_harmonics: usize,
    /// Radius of the sensor disc masked out during training; 0 disables it.
    pub spatial_dropout: f64,
    pub subject_mode: SubjectMode,
    pub spatial_mode: SpatialMode,
    pub rnn_mode: RnnMode,
    pub rnn_hidden: usize,
    pub attn_heads: usize,
    pub f_out: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_in: 60,
            d1: 270,
            d2: 320,
            n_blocks: 5,
            k_harmonics: 32,
            spatial_dropout: 0.1,
            subject_mode: SubjectMode::SubjectLayer,
            spatial_mode: SpatialMode::Shared,
            rnn_mode: RnnMode::Unidirectional,
            rnn_hidden: 128,
            attn_heads: 1,
            f_out: 40,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// A small network for tests and quick runs.
    pub fn tiny(c_in: usize, d1: usize, d2: usize, f_out: usize) -> Self {
        Self {
            c_in,
            d1,
            d2,
            n_blocks: 2,
            k_harmonics: 4,
            rnn_hidden: d2.max(4) / 2,
            f_out,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_in", self.c_in),
            ("d1", self.d1),
            ("d2", self.d2),
            ("n_blocks", self.n_blocks),
            ("k_harmonics", self.k_harmonics),
            ("rnn_hidden", self.rnn_hidden),
            ("f_out", self.f_out),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.attn_heads != 1 {
            return Err(Error::Config(format!(
                "model.attn_heads = {} is not supported; self-attention is single-head",
                self.attn_heads
            )));
        }
        if !(0.0..0.5).contains(&self.spatial_dropout) {
            return Err(Error::Config("model.spatial_dropout must lie in [0, 0.5)".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid batch-norm eps or momentum".into()));
        }
        Ok(())
    }

    /// Whether any parameter is owned by a single subject.
    pub fn is_personalised(&self) -> bool {
        self.subject_mode != SubjectMode::Shared || self.spatial_mode == SpatialMode::PerSubject
    }
}

/// Dilations of the two convolutions in residual block `k`.
pub fn dilations(k: usize) -> (usize, usize) {
    (1 << ((2 * k) % 5), 1 << ((2 * k + 1) % 5))
}

/// Receptive field in samples of the convolution blocks.
pub fn receptive_field(n_blocks: usize) -> usize {
    1 + (0..n_blocks)
        .map(|k| {
            let (a, b) = dilations(k);
            2 * (a + b)
        })
        .sum::<usize>()
}

/// Network parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub subjects: Vec<String>,
    pub layout: SensorLayout,
    pub params: ParamStore,
    pub buffers: ParamStore,
    basis: Tensor,
}

/// `[2K² × C]`: `cos 2π(k·x + l·y)` rows followed by the matching
/// `−sin` rows, so that `coeffs · basis` is the real part of the complex
/// harmonic series.
fn fourier_basis(k: usize, layout: &SensorLayout) -> Tensor {
    let c = layout.len();
    let pos = layout.positions();
    let kk = k * k;
    Tensor::from_fn([2 * kk, c], |i| {
        let (row, ch) = (i / c, i % c);
        let h = row % kk;
        let phase = 2.0 * PI * ((h / k) as f64 * pos[ch][0] + (h % k) as f64 * pos[ch][1]);
        if row < kk {
            libm::cos(phase)
        } else {
            -libm::sin(phase)
        }
    })
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

fn eye_stack(n: usize, d: usize) -> Tensor {
    Tensor::from_fn([n, d, d], |i| if (i / d) % d == i % d { 1.0 } else { 0.0 })
}

impl Model {
    /// Builds and randomly initialises a network for `subjects` recorded
    /// with `layout`.
    pub fn new(config: ModelConfig, subjects: Vec<String>, layout: SensorLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if subjects.is_empty() {
            return Err(Error::Config("a model needs at least one subject".into()));
        }
        if layout.len() != config.c_in {
            return Err(Error::Contract(format!(
                "layout has {} sensors but the model expects {}",
                layout.len(),
                config.c_in
            )));
        }
        let cfg = &config;
        let mut rng = rng::derive(seed, Stream::Init, 0);
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        let n_subj = subjects.len();
        let (d1, d2, h) = (cfg.d1, cfg.d2, cfg.rnn_hidden);
        let kk2 = 2 * cfg.k_harmonics * cfg.k_harmonics;

        let s_eff = match cfg.spatial_mode {
            SpatialMode::Shared => 1,
            SpatialMode::PerSubject => n_subj,
        };
        let normal = Normal::new(0.0, 1.0 / cfg.k_harmonics as f64).expect("positive std");
        p.insert(
            "spatial.coeffs",
            Tensor::from_fn([s_eff, d1, kk2], |_| normal.sample(&mut rng)),
        );

        match cfg.subject_mode {
            SubjectMode::SubjectLayer => p.insert("subject.layer", eye_stack(n_subj, d1)),
            mode => {
                match mode {
                    SubjectMode::SubjectEmbedding => p.insert("subject.embedding", Tensor::zeros([n_subj, d1])),
                    SubjectMode::SubjectAttention => p.insert("subject.scores", Tensor::zeros([n_subj, d1])),
                    _ => {}
                }
                p.insert("subject.shared", eye_stack(1, d1).reshape([d1, d1, 1])?);
            }
        }

        let mut width = d1;
        for k in 0..cfg.n_blocks {
            let pre = format!("conv.{k}");
            p.insert(
                format!("{pre}.conv1.w"),
                uniform(&mut rng, &[2 * d2, width, 3], 1.0 / libm::sqrt((3 * width) as f64)),
            );
            p.insert(format!("{pre}.conv1.b"), Tensor::zeros([2 * d2]));
            p.insert(format!("{pre}.bn1.gamma"), Tensor::full([2 * d2], 1.0));
            p.insert(format!("{pre}.bn1.beta"), Tensor::zeros([2 * d2]));
            p.insert(
                format!("{pre}.conv2.w"),
                uniform(&mut rng, &[2 * d2, 2 * d2, 3], 1.0 / libm::sqrt((6 * d2) as f64)),
            );
            p.insert(format!("{pre}.conv2.b"), Tensor::zeros([2 * d2]));
            p.insert(format!("{pre}.bn2.gamma"), Tensor::full([2 * d2], 1.0));
            p.insert(format!("{pre}.bn2.beta"), Tensor::zeros([2 * d2]));
            if width != d2 {
                p.insert(
                    format!("{pre}.skip.w"),
                    uniform(&mut rng, &[d2, width, 1], 1.0 / libm::sqrt(width as f64)),
                );
            }
            for bn in ["bn1", "bn2"] {
                b.insert(format!("{pre}.{bn}.mean"), Tensor::zeros([2 * d2]));
                b.insert(format!("{pre}.{bn}.var"), Tensor::full([2 * d2], 1.0));
            }
            width = d2;
        }

        let bi = cfg.rnn_mode == RnnMode::BidirectionalAttention;
        let lstm_bound = 1.0 / libm::sqrt(h as f64);
        for r in 0..2 {
            let dirs: &[&str] = if bi { &["fwd", "bwd"] } else { &["fwd"] };
            for dir in dirs {
                let pre = format!("rnn.{r}.{dir}");
                p.insert(format!("{pre}.wi"), uniform(&mut rng, &[4 * h, d2], lstm_bound));
                p.insert(format!("{pre}.wh"), uniform(&mut rng, &[4 * h, h], lstm_bound));
                p.insert(
                    format!("{pre}.b"),
                    Tensor::from_fn([4 * h], |i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }),
                );
            }
            let cat = dirs.len() * h;
            p.insert(
                format!("rnn.{r}.proj.w"),
                uniform(&mut rng, &[cat, d2], 1.0 / libm::sqrt(cat as f64)),
            );
            p.insert(format!("rnn.{r}.proj.b"), Tensor::zeros([d2]));
            if bi {
                for m in ["q", "k", "v", "o"] {
                    p.insert(
                        format!("rnn.{r}.attn.{m}.w"),
                        uniform(&mut rng, &[d2, d2], 1.0 / libm::sqrt(d2 as f64)),
                    );
                    p.insert(format!("rnn.{r}.attn.{m}.b"), Tensor::zeros([d2]));
                }
            }
        }

        p.insert(
            "proj.conv1.w",
            uniform(&mut rng, &[2 * d2, d2, 1], 1.0 / libm::sqrt(d2 as f64)),
        );
        p.insert("proj.conv1.b", Tensor::zeros([2 * d2]));
        p.insert(
            "proj.conv2.w",
            uniform(&mut rng, &[cfg.f_out, 2 * d2, 1], 1.0 / libm::sqrt((2 * d2) as f64)),
        );
        p.insert("proj.conv2.b", Tensor::zeros([cfg.f_out]));

        let basis = fourier_basis(cfg.k_harmonics, &layout);
        Ok(Self {
            config,
            subjects,
            layout,
            params: p,
            buffers: b,
            basis,
        })
    }

    /// Rebuilds a model from stored tensors, checking every name and shape
    /// against a freshly constructed network of the same configuration.
    pub fn from_parts(
        config: ModelConfig,
        subjects: Vec<String>,
        layout: SensorLayout,
        params: ParamStore,
        buffers: ParamStore,
    ) -> Result<Self> {
        let mut model = Self::new(config, subjects, layout, 0)?;
        let mut problems = Vec::new();
        for (expected, got, kind) in [(&model.params, &params, "parameter"), (&model.buffers, &buffers, "buffer")] {
            for (name, t) in expected.iter() {
                match got.get(name) {
                    Ok(g) if g.shape() == t.shape() => {}
                    Ok(g) => problems.push(format!("{kind} {name}: expected {:?}, found {:?}", t.shape(), g.shape())),
                    Err(_) => problems.push(format!("{kind} {name}: missing")),
                }
            }
            for name in got.names() {
                if expected.get(name).is_err() {
                    problems.push(format!("{kind} {name}: unexpected"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Contract(format!("checkpoint does not match the model:\n  {}", problems.join("\n  "))));
        }
        for (name, t) in params.iter() {
            *model.params.get_mut(name)? = t.clone();
        }
        for (name, t) in buffers.iter() {
            *model.buffers.get_mut(name)? = t.clone();
        }
        Ok(model)
    }

    /// Index of `id` in the subject table. Fully shared networks accept
    /// any subject.
    pub fn subject_index(&self, id: &str) -> Result<usize> {
        match self.subjects.iter().position(|s| s == id) {
            Some(i) => Ok(i),
            None if !self.config.is_personalised() => Ok(0),
            None => Err(Error::UnknownSubject(id.into())),
        }
    }

    pub fn subject_indices<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<usize>> {
        ids.iter().map(|s| self.subject_index(s.as_ref())).collect()
    }

    pub(crate) fn basis(&self) -> &Tensor {
        &self.basis
    }

    /// Inserts every parameter into `g`, tracked for gradients when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .map(|t| if trainable { g.parameter(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Starts a pass over parameters already bound into a graph.
    pub fn session(&self, params: Vec<Var>, train: bool) -> Session<'_> {
        Session::new(self, params, train)
    }

    /// Eval-mode output for a batch `[B×C×T]` (or a single `[C×T]`
    /// window).
    pub fn infer(&self, x: &Tensor, subjects: &[usize]) -> Result<Tensor> {
        let single = x.ndim() == 2;
        let x = if single {
            x.clone().reshape([1, x.shape()[0], x.shape()[1]])?
        } else {
            x.clone()
        };
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let mut s = self.session(params, false);
        let xv = g.constant(x);
        let out = s.forward(&mut g, xv, subjects, None)?;
        let out = g.value(out).clone();
        if single {
            let (f, t) = (out.shape()[1], out.shape()[2]);
            out.reshape([f, t])
        } else {
            Ok(out)
        }
    }

    /// Spatial attention weights `[D1 × C]` used for `subject`.
    pub fn spatial_weights(&self, subject: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let s = self.session(params, false);
        let w = s.spatial_scores(&mut g, &[subject])?;
        let w = g.softmax(w);
        let (d1, c) = (self.config.d1, self.config.c_in);
        g.value(w).clone().reshape([d1, c])
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let m = self.config.bn_momentum;
        let names: Vec<String> = (0..self.config.n_blocks)
            .flat_map(|k| [format!("conv.{k}.bn1"), format!("conv.{k}.bn2")])
            .collect();
        if stats.len() != names.len() {
            return Err(Error::Contract(format!(
                "{} batch-norm statistics for {} layers",
                stats.len(),
                names.len()
            )));
        }
        for (name, st) in names.iter().zip(stats) {
            for (buf, batch) in [("mean", &st.mean), ("var", &st.var)] {
                let t = self.buffers.get_mut(&format!("{name}.{buf}"))?;
                for (r, v) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Parameter names used only by `subject`.
    pub fn subject_owned_rows(&self, subject: usize) -> Vec<(String, core::ops::Range<usize>)> {
        let mut out = vec![];
        let cfg = &self.config;
        if cfg.spatial_mode == SpatialMode::PerSubject {
            let n = cfg.d1 * 2 * cfg.k_harmonics * cfg.k_harmonics;
            out.push(("spatial.coeffs".into(), subject * n..(subject + 1) * n));
        }
        let (name, n) = match cfg.subject_mode {
            SubjectMode::Shared => return out,
            SubjectMode::SubjectLayer => ("subject.layer", cfg.d1 * cfg.d1),
            SubjectMode::SubjectEmbedding => ("subject.embedding", cfg.d1),
            SubjectMode::SubjectAttention => ("subject.scores", cfg.d1),
        };
        out.push((name.into(), subject * n..(subject + 1) * n));
        out
    }
}
