use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{dilations, Model, RnnMode, SpatialMode, SubjectMode};
use crate::autodiff::kernels::BatchStats;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One forward pass of a [`Model`] over parameters bound into a graph.
///
/// In train mode batch norm uses batch statistics, which are collected
/// in [`Session::bn_stats`] in layer order.
pub struct Session<'m> {
    model: &'m Model,
    params: Vec<Var>,
    train: bool,
    pub bn_stats: Vec<BatchStats>,
}

fn finite(g: &Graph, v: Var, stage: &'static str) -> Result<Var> {
    if let Some(i) = g.value(v).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            stage: stage.into(),
            detail: format!("non-finite value at flat index {i}"),
        });
    }
    Ok(v)
}

impl<'m> Session<'m> {
    pub(super) fn new(model: &'m Model, params: Vec<Var>, train: bool) -> Self {
        Self {
            model,
            params,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        Ok(self.params[self.model.params.position(name)?])
    }

    fn batch_of(&self, g: &Graph, x: Var, what: &str) -> Result<usize> {
        match g.shape(x) {
            [b, _, _] => Ok(*b),
            s => Err(Error::Contract(format!("{what} expects a B×C×T batch, got {s:?}"))),
        }
    }

    fn check_subjects(&self, subjects: &[usize], batch: usize) -> Result<()> {
        if subjects.len() != batch {
            return Err(Error::Contract(format!("{} subject ids for a batch of {batch}", subjects.len())));
        }
        let n = self.model.subjects.len();
        if let Some(s) = subjects.iter().find(|&&s| s >= n) {
            return Err(Error::UnknownSubject(format!("index {s} (model has {n} subjects)")));
        }
        Ok(())
    }

    /// Pre-softmax spatial scores `[B × D1 × C]`.
    pub fn spatial_scores(&self, g: &mut Graph, subjects: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        let b = subjects.len();
        let idx = match cfg.spatial_mode {
            SpatialMode::Shared => vec![0; b],
            SpatialMode::PerSubject => subjects.to_vec(),
        };
        let coeffs = self.param("spatial.coeffs")?;
        let picked = g.gather(coeffs, &idx)?;
        let flat = g.reshape(picked, &[b * cfg.d1, 2 * cfg.k_harmonics * cfg.k_harmonics])?;
        let basis = g.constant(self.model.basis().clone());
        let scores = g.matmul(flat, basis)?;
        g.reshape(scores, &[b, cfg.d1, cfg.c_in])
    }

    /// `[B×C×T] → [B×D1×T]`. With a dropout generator in train mode, each
    /// example loses the sensors inside a disc around a random point.
    pub fn spatial_attention(
        &mut self,
        g: &mut Graph,
        x: Var,
        subjects: &[usize],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let b = self.batch_of(g, x, "spatial_attention")?;
        self.check_subjects(subjects, b)?;
        let cfg = &self.model.config;
        if g.shape(x)[1] != cfg.c_in {
            return Err(Error::Contract(format!(
                "input has {} channels, model expects {}",
                g.shape(x)[1],
                cfg.c_in
            )));
        }
        let mut scores = self.spatial_scores(g, subjects)?;
        let radius = cfg.spatial_dropout;
        if let (true, Some(rng)) = (self.train && radius > 0.0, dropout) {
            let pos = self.model.layout.positions();
            let (d1, c) = (cfg.d1, cfg.c_in);
            let mut mask = vec![0.0; b * d1 * c];
            for e in 0..b {
                let centre = [rng.gen::<f64>(), rng.gen::<f64>()];
                let hit: Vec<bool> = pos
                    .iter()
                    .map(|p| {
                        let (dx, dy) = (p[0] - centre[0], p[1] - centre[1]);
                        dx * dx + dy * dy <= radius * radius
                    })
                    .collect();
                if hit.iter().all(|&h| h) {
                    continue;
                }
                for o in 0..d1 {
                    for (ch, _) in hit.iter().enumerate().filter(|(_, h)| **h) {
                        mask[(e * d1 + o) * c + ch] = f64::NEG_INFINITY;
                    }
                }
            }
            let mask = g.constant(Tensor::new([b, d1, c], mask)?);
            scores = g.add(scores, mask)?;
        }
        let weights = g.softmax(scores);
        g.bmm(weights, x, false)
    }

    /// Per-subject personalisation of the virtual channels.
    pub fn subject_stage(&mut self, g: &mut Graph, x: Var, subjects: &[usize]) -> Result<Var> {
        let b = self.batch_of(g, x, "subject_stage")?;
        self.check_subjects(subjects, b)?;
        let d1 = self.model.config.d1;
        let x = match self.model.config.subject_mode {
            SubjectMode::SubjectLayer => {
                let w = g.gather(self.param("subject.layer")?, subjects)?;
                return g.bmm(w, x, false);
            }
            SubjectMode::Shared => x,
            SubjectMode::SubjectEmbedding => {
                let e = g.gather(self.param("subject.embedding")?, subjects)?;
                g.add_rows(x, e)?
            }
            SubjectMode::SubjectAttention => {
                let s = g.gather(self.param("subject.scores")?, subjects)?;
                let gate = g.softmax(s);
                let gate = g.scale(gate, d1 as f64);
                g.scale_rows(x, gate)?
            }
        };
        g.conv1d(x, self.param("subject.shared")?, 1)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, dilation: usize) -> Result<Var> {
        let y = g.conv1d(x, self.param(&format!("{name}.w"))?, dilation)?;
        match self.model.params.position(&format!("{name}.b")) {
            Ok(i) => g.add_bias(y, self.params[i], 1),
            Err(_) => Ok(y),
        }
    }

    fn batch_norm(&mut self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let eps = self.model.config.bn_eps;
        if self.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, eps)?;
            self.bn_stats.push(stats);
            Ok(y)
        } else {
            let mean = self.model.buffers.get(&format!("{name}.mean"))?;
            let var = self.model.buffers.get(&format!("{name}.var"))?;
            g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), eps)
        }
    }

    /// Residual blocks of dilated convolutions: `[B×D1×T] → [B×D2×T]`.
    pub fn conv_sequence(&mut self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for k in 0..self.model.config.n_blocks {
            let pre = format!("conv.{k}");
            let (da, db) = dilations(k);
            let h = self.conv(g, x, &format!("{pre}.conv1"), da)?;
            let h = self.batch_norm(g, h, &format!("{pre}.bn1"))?;
            let h = g.gelu(h);
            let h = self.conv(g, h, &format!("{pre}.conv2"), db)?;
            let h = self.batch_norm(g, h, &format!("{pre}.bn2"))?;
            let h = g.gelu(h);
            let h = g.glu(h)?;
            let skip = match self.model.params.position(&format!("{pre}.skip.w")) {
                Ok(i) => g.conv1d(x, self.params[i], 1)?,
                Err(_) => x,
            };
            x = g.add(h, skip)?;
        }
        Ok(x)
    }

    /// `x: [B×T×in] · w: [in×out] + b`.
    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let (b, t, d) = match g.shape(x) {
            [b, t, d] => (*b, *t, *d),
            s => return Err(Error::Contract(format!("linear expects B×T×D, got {s:?}"))),
        };
        let w = self.param(&format!("{name}.w"))?;
        let out = g.shape(w)[1];
        let flat = g.reshape(x, &[b * t, d])?;
        let y = g.matmul(flat, w)?;
        let y = g.reshape(y, &[b, t, out])?;
        g.add_bias(y, self.param(&format!("{name}.b"))?, 2)
    }

    fn lstm(&self, g: &mut Graph, x: Var, name: &str, reverse: bool) -> Result<Var> {
        let wi = self.param(&format!("{name}.wi"))?;
        let wh = self.param(&format!("{name}.wh"))?;
        let b = self.param(&format!("{name}.b"))?;
        g.lstm(x, wi, wh, b, reverse)
    }

    /// Single-head scaled dot-product self-attention over time on
    /// `[B×T×D]`, without the residual.
    pub fn self_attention(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let d = g.shape(x)[2];
        let q = self.linear(g, x, &format!("{name}.q"))?;
        let k = self.linear(g, x, &format!("{name}.k"))?;
        let v = self.linear(g, x, &format!("{name}.v"))?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
        let attn = g.softmax(scores);
        let mixed = g.bmm(attn, v, false)?;
        self.linear(g, mixed, &format!("{name}.o"))
    }

    /// Two recurrent blocks over time: `[B×D2×T] → [B×D2×T]`.
    pub fn dual_path_rnn(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let bi = self.model.config.rnn_mode == RnnMode::BidirectionalAttention;
        let mut h = g.swap_last2(x)?;
        for r in 0..2 {
            let fwd = self.lstm(g, h, &format!("rnn.{r}.fwd"), false)?;
            let y = if bi {
                let bwd = self.lstm(g, h, &format!("rnn.{r}.bwd"), true)?;
                g.concat_last(fwd, bwd)?
            } else {
                fwd
            };
            let mut y = self.linear(g, y, &format!("rnn.{r}.proj"))?;
            if bi {
                let a = self.self_attention(g, y, &format!("rnn.{r}.attn"))?;
                y = g.add(y, a)?;
            }
            h = y;
        }
        g.swap_last2(h)
    }

    /// Two 1×1 convolutions with a GELU between: `[B×D2×T] → [B×F×T]`.
    pub fn final_projection(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv(g, x, "proj.conv1", 1)?;
        let h = g.gelu(h);
        self.conv(g, h, "proj.conv2", 1)
    }

    /// The full network on `x: [B×C×T]`. Any non-finite intermediate
    /// aborts with the name of the stage that produced it.
    pub fn forward(&mut self, g: &mut Graph, x: Var, subjects: &[usize], dropout: Option<&mut Rng>) -> Result<Var> {
        let x = finite(g, x, "input")?;
        let h = self.spatial_attention(g, x, subjects, dropout)?;
        let h = finite(g, h, "spatial_attention")?;
        let h = self.subject_stage(g, h, subjects)?;
        let h = finite(g, h, "subject_stage")?;
        let h = self.conv_sequence(g, h)?;
        let h = finite(g, h, "conv_sequence")?;
        let h = self.dual_path_rnn(g, h)?;
        let h = finite(g, h, "dual_path_rnn")?;
        let h = self.final_projection(g, h)?;
        finite(g, h, "final_projection")
    }
}
