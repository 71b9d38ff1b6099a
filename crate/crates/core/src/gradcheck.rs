//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass of the function it is
//! given, so its numerical gradients are independent of every backward
//! rule they are compared against.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::data::SensorLayout;
use crate::model::{Model, ModelConfig, RnnMode, SpatialMode, SubjectMode};
use crate::error::Result;
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)`
    /// over the checked coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Relative error in the "max deviation over max magnitude" form.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Which coordinates of each input to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many randomly chosen coordinates per input.
    Sample(usize),
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(name: &str, inputs: &[Tensor], h: f64, coverage: Coverage, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = rng::derive(seed, Stream::Gradcheck, 0);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zeros = alloc::vec![0.0; n];
        let g_i = grads.get(*v).unwrap_or(&zeros);
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample(k) if k >= n => (0..n).collect(),
            Coverage::Sample(k) => (0..k).map(|_| rng.gen_range(0..n)).collect(),
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            analytic.push(g_i[c]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(GradCheck {
        name: name.into(),
        max_rel_error: relative_error(&analytic, &numeric),
        coords_checked: analytic.len(),
    })
}

/// Standard-normal tensor of the given shape.
pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// `Σ x ⊙ w` for a fixed weight tensor, turning any output into a scalar
/// loss in which every coordinate carries a distinct weight.
pub fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Finite-difference step used by the operator suite.
pub const OP_STEP: f64 = 1e-5;

/// Checks every differentiable graph operation on random small shapes
/// drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = rng::derive(seed, Stream::Gradcheck, 1);
    let r = &mut rng;
    let mut out = Vec::new();
    let h = OP_STEP;
    let all = Coverage::All;

    let m = r.gen_range(1..4);
    let k = r.gen_range(1..4);
    let n = r.gen_range(1..4);
    let w = randn(r, &[m, n]);
    out.push(check("matmul", &[randn(r, &[m, k]), randn(r, &[k, n])], h, all, seed, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, &w)
    })?);

    let b = r.gen_range(1..3);
    let w = randn(r, &[b, m, n]);
    out.push(check("bmm", &[randn(r, &[b, m, k]), randn(r, &[b, k, n])], h, all, seed, |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        weighted_sum(g, y, &w)
    })?);
    out.push(check("bmm_transposed", &[randn(r, &[b, m, k]), randn(r, &[b, n, k])], h, all, seed, |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        weighted_sum(g, y, &w)
    })?);

    let (ci, co, t) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(3..12));
    let kern = [1, 3, 5][r.gen_range(0..3)];
    let dil = r.gen_range(1..4);
    let w = randn(r, &[b, co, t]);
    out.push(check("conv1d", &[randn(r, &[b, ci, t]), randn(r, &[co, ci, kern])], h, all, seed, |g, v| {
        let y = g.conv1d(v[0], v[1], dil)?;
        weighted_sum(g, y, &w)
    })?);

    let c = r.gen_range(1..4);
    let w = randn(r, &[b, c, t]);
    out.push(check("glu", &[randn(r, &[b, 2 * c, t])], h, all, seed, |g, v| {
        let y = g.glu(v[0])?;
        weighted_sum(g, y, &w)
    })?);

    let w2 = randn(r, &[b, 2 * c, t]);
    out.push(check("gelu", &[randn(r, &[b, 2 * c, t])], h, all, seed, |g, v| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, &w2)
    })?);
    out.push(check("sigmoid", &[randn(r, &[b, 2 * c, t])], h, all, seed, |g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, &w2)
    })?);
    out.push(check("tanh", &[randn(r, &[b, 2 * c, t])], h, all, seed, |g, v| {
        let y = g.tanh(v[0]);
        weighted_sum(g, y, &w2)
    })?);

    let bn_b = r.gen_range(2..4);
    let w = randn(r, &[bn_b, c, t]);
    out.push(check(
        "batch_norm",
        &[randn(r, &[bn_b, c, t]), randn(r, &[c]), randn(r, &[c])],
        h,
        all,
        seed,
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, &w)
        },
    )?);
    let mean = randn(r, &[c]).into_data();
    let var: Vec<f64> = randn(r, &[c]).data().iter().map(|x| x * x + 0.5).collect();
    out.push(check(
        "batch_norm_eval",
        &[randn(r, &[bn_b, c, t]), randn(r, &[c]), randn(r, &[c])],
        h,
        all,
        seed,
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            weighted_sum(g, y, &w)
        },
    )?);

    let (d, hid, len) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6));
    let w = randn(r, &[b, len, hid]);
    for reverse in [false, true] {
        let inputs = [
            randn(r, &[b, len, d]),
            randn(r, &[4 * hid, d]).map(|x| 0.5 * x),
            randn(r, &[4 * hid, hid]).map(|x| 0.5 * x),
            randn(r, &[4 * hid]),
        ];
        let name = if reverse { "lstm_reverse" } else { "lstm" };
        out.push(check(name, &inputs, h, all, seed, |g, v| {
            let y = g.lstm(v[0], v[1], v[2], v[3], reverse)?;
            weighted_sum(g, y, &w)
        })?);
    }

    let rows = r.gen_range(1..4);
    let cols = r.gen_range(2..6);
    let w = randn(r, &[rows, cols]);
    out.push(check("softmax", &[randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.softmax(v[0]);
        weighted_sum(g, y, &w)
    })?);
    out.push(check("log_softmax", &[randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.log_softmax(v[0]);
        weighted_sum(g, y, &w)
    })?);
    out.push(check("l2_normalize", &[randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.l2_normalize(v[0], 1e-12);
        weighted_sum(g, y, &w)
    })?);
    let idx: Vec<usize> = (0..rows).map(|_| r.gen_range(0..cols)).collect();
    let wp = randn(r, &[rows]);
    out.push(check("pick", &[randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.pick(v[0], &idx)?;
        weighted_sum(g, y, &wp)
    })?);
    let wc = randn(r, &[rows, 2 * cols]);
    out.push(check("concat_last", &[randn(r, &[rows, cols]), randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.concat_last(v[0], v[1])?;
        weighted_sum(g, y, &wc)
    })?);
    let wt = randn(r, &[cols, rows]);
    out.push(check("swap_last2", &[randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let y = g.swap_last2(v[0])?;
        weighted_sum(g, y, &wt)
    })?);
    out.push(check("add_rows", &[randn(r, &[rows, cols]), randn(r, &[rows])], h, all, seed, |g, v| {
        let y = g.add_rows(v[0], v[1])?;
        weighted_sum(g, y, &w)
    })?);
    out.push(check("scale_rows", &[randn(r, &[rows, cols]), randn(r, &[rows])], h, all, seed, |g, v| {
        let y = g.scale_rows(v[0], v[1])?;
        weighted_sum(g, y, &w)
    })?);
    out.push(check("add_bias", &[randn(r, &[rows, cols]), randn(r, &[cols])], h, all, seed, |g, v| {
        let y = g.add_bias(v[0], v[1], 1)?;
        weighted_sum(g, y, &w)
    })?);
    let src_rows = r.gen_range(1..4);
    let gidx: Vec<usize> = (0..rows).map(|_| r.gen_range(0..src_rows)).collect();
    out.push(check("gather", &[randn(r, &[src_rows, cols])], h, all, seed, |g, v| {
        let y = g.gather(v[0], &gidx)?;
        weighted_sum(g, y, &w)
    })?);
    out.push(check("mean_sub_scale", &[randn(r, &[rows, cols]), randn(r, &[rows, cols])], h, all, seed, |g, v| {
        let d = g.sub(v[0], v[1])?;
        let s = g.scale(d, -1.7);
        let sq = g.mul(s, s)?;
        Ok(g.mean(sq))
    })?);
    Ok(out)
}

/// Finite-difference step for whole-network checks.
pub const MODEL_STEP: f64 = 1e-5;

/// A small network with every personalised stage switched on, sized so
/// that the whole-network check stays cheap.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        c_in: 4,
        d1: 8,
        d2: 8,
        n_blocks: 3,
        k_harmonics: 3,
        spatial_dropout: 0.0,
        subject_mode: SubjectMode::SubjectAttention,
        spatial_mode: SpatialMode::PerSubject,
        rnn_mode: RnnMode::BidirectionalAttention,
        rnn_hidden: 4,
        f_out: 3,
        ..ModelConfig::default()
    }
}

/// Checks the gradient of a random linear functional of the network
/// output with respect to the input and a sample of every parameter
/// tensor, in training mode.
pub fn model_check(config: ModelConfig, seed: u64, coords_per_tensor: usize) -> Result<GradCheck> {
    let mut rng = rng::derive(seed, Stream::Gradcheck, 2);
    let c = config.c_in;
    let layout = SensorLayout::new((0..c).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect())?;
    let f_out = config.f_out;
    let subjects = alloc::vec![String::from("a"), String::from("b")];
    let model = Model::new(config, subjects, layout, seed)?;
    let t = 16;
    let x = randn(&mut rng, &[2, c, t]);
    let w = randn(&mut rng, &[2, f_out, t]);
    let mut inputs = alloc::vec![x];
    inputs.extend(model.params.tensors().cloned());
    check("model", &inputs, MODEL_STEP, Coverage::Sample(coords_per_tensor), seed, |g, v| {
        let mut s = model.session(v[1..].to_vec(), true);
        let out = s.forward(g, v[0], &[0, 1], None)?;
        weighted_sum(g, out, &w)
    })
}
