//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its
//! forward value and enough saved state to run its backward rule. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it once in reverse.
//!
//! ```
//! use neurodecode_core::autodiff::Graph;
//! use neurodecode_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.parameter(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

pub mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{BatchStats, ConvDims, LstmDims, LstmGrads, LstmTrace};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Span {
    outer: usize,
    mid: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    SwapLast2 { x: Var, outer: usize, rows: usize, cols: usize },
    Reshape(Var),
    Conv1d { x: Var, w: Var, dims: ConvDims },
    AddBias { x: Var, bias: Var, span: Span },
    Glu { x: Var, span: Span },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, span: Span },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, span: Span },
    Lstm { x: Var, w_input: Var, w_hidden: Var, bias: Var, dims: LstmDims, trace: LstmTrace },
    Softmax { x: Var, n: usize },
    LogSoftmax { x: Var, n: usize },
    L2Normalize { x: Var, n: usize, norms: Vec<f64>, eps: f64 },
    ConcatLast { a: Var, b: Var, na: usize, nb: usize },
    Gather { src: Var, index: Vec<usize>, inner: usize },
    Pick { x: Var, index: Vec<usize>, n: usize },
    AddRows { x: Var, rows: Var, len: usize },
    ScaleRows { x: Var, rows: Var, len: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a leaf whose gradient is tracked.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`; with `trans_b`
    /// the right operand is `[B×n×k]` and is used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::dim("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            let ai = &da[bi * m * k..(bi + 1) * m * k];
            let bslice = &db[bi * k * n..(bi + 1) * k * n];
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::mm_nt(ai, bslice, o, m, k, n);
            } else {
                kernels::mm_nn(ai, bslice, o, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        let op = Op::Bmm { a, b, batch, m, k, n, trans_b };
        Ok(self.push(Tensor::new([batch, m, n], out)?, op, rg))
    }

    /// Swaps the two trailing axes.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("swap_last2", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = self.value(x).len() / (rows * cols);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            let base = o * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let mut shape = s;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SwapLast2 { x, outer, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Dilated 1-D convolution with "same" zero padding.
    ///
    /// `x` is `[C_in×T]` or `[B×C_in×T]`, `w` is `[C_out×C_in×K]` with
    /// `K` odd; the output keeps the time extent.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 3 {
            return Err(Error::dim("conv1d", &sx, &sw));
        }
        if sw[2] % 2 == 0 {
            return Err(Error::UnsupportedKernel(sw[2]));
        }
        if dilation == 0 {
            return Err(Error::Contract("conv1d dilation must be >= 1".into()));
        }
        let (batch, c_in, len) = match sx.as_slice() {
            [c, t] => (1, *c, *t),
            [b, c, t] => (*b, *c, *t),
            _ => return Err(Error::dim("conv1d", &sx, &sw)),
        };
        if c_in != sw[1] {
            return Err(Error::dim("conv1d", &sx, &sw));
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out: sw[0],
            kernel: sw[2],
            len,
            dilation,
        };
        let y = kernels::conv1d_forward(self.data(x), self.data(w), &dims);
        let shape = if sx.len() == 2 {
            vec![dims.c_out, len]
        } else {
            vec![batch, dims.c_out, len]
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv1d { x, w, dims }, rg))
    }

    /// Adds a vector along `axis`, broadcasting over all other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::dim("add_bias", &sx, sb));
        }
        let span = Span {
            outer: sx[..axis].iter().product(),
            mid: sx[axis],
            inner: sx[axis + 1..].iter().product(),
        };
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for o in 0..span.outer {
            for m in 0..span.mid {
                let base = (o * span.mid + m) * span.inner;
                for v in &mut out[base..base + span.inner] {
                    *v += b[m];
                }
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias { x, bias, span }, rg))
    }

    /// Gated linear unit over the channel axis (second to last):
    /// `y[c,t] = x[c,t] · σ(x[C+c,t])`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let nd = sx.len();
        if nd < 2 || !sx[nd - 2].is_multiple_of(2) {
            return Err(Error::dim("glu", &sx, &[]));
        }
        let half = sx[nd - 2] / 2;
        let inner = sx[nd - 1];
        let outer: usize = sx[..nd - 2].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len() / 2];
        for o in 0..outer {
            let base = o * 2 * half * inner;
            for i in 0..half * inner {
                out[o * half * inner + i] =
                    src[base + i] * kernels::sigmoid(src[base + half * inner + i]);
            }
        }
        let mut shape = sx;
        shape[nd - 2] = half;
        let span = Span { outer, mid: half, inner };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Glu { x, span }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), libm::tanh)
    }

    fn bn_span(&self, name: &'static str, x: Var, gamma: Var, beta: Var) -> Result<Span> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::dim(name, sx, &[]));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [sx[1]] {
                return Err(Error::dim(name, sx, self.shape(p)));
            }
        }
        Ok(Span {
            outer: sx[0],
            mid: sx[1],
            inner: sx[2],
        })
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], span: Span) -> (Vec<f64>, Vec<f64>) {
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for o in 0..span.outer {
            for c in 0..span.mid {
                let base = (o * span.mid + c) * span.inner;
                for i in base..base + span.inner {
                    let h = (src[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        (xhat, out)
    }

    /// Training-mode batch normalization of `[B×C×T]` using the batch
    /// statistics per channel. Returns the output and those statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let span = self.bn_span("batch_norm", x, gamma, beta)?;
        if span.outer * span.inner < 2 {
            return Err(Error::Contract("batch_norm needs at least two values per channel".into()));
        }
        let stats = kernels::channel_stats(self.data(x), span.outer, span.mid, span.inner);
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &stats.mean, &inv_std, span);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, span };
        Ok((self.push(Tensor::new(shape, out)?, op, rg), stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let span = self.bn_span("batch_norm_eval", x, gamma, beta)?;
        if mean.len() != span.mid || var.len() != span.mid {
            return Err(Error::dim("batch_norm_eval", self.shape(x), &[mean.len(), var.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, mean, &inv_std, span);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNormEval { x, gamma, beta, xhat, inv_std, span };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Runs a gated recurrent (LSTM) layer over `x: [B×T×D]` from a zero
    /// initial state, returning hidden states `[B×T×H]`. Weights are
    /// `w_input: [4H×D]`, `w_hidden: [4H×H]`, `bias: [4H]` with gate
    /// blocks ordered input, forget, cell, output. With `reverse` the
    /// sequence is consumed from the last step to the first.
    pub fn lstm(&mut self, x: Var, w_input: Var, w_hidden: Var, bias: Var, reverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let swh = self.shape(w_hidden).to_vec();
        if sx.len() != 3 || swh.len() != 2 || swh[0] != 4 * swh[1] {
            return Err(Error::dim("lstm", &sx, &swh));
        }
        let hidden = swh[1];
        if self.shape(w_input) != [4 * hidden, sx[2]] {
            return Err(Error::dim("lstm", &sx, self.shape(w_input)));
        }
        if self.shape(bias) != [4 * hidden] {
            return Err(Error::dim("lstm", &swh, self.shape(bias)));
        }
        let dims = LstmDims {
            batch: sx[0],
            len: sx[1],
            input: sx[2],
            hidden,
            reverse,
        };
        let (out, trace) = kernels::lstm_forward(
            self.data(x),
            self.data(w_input),
            self.data(w_hidden),
            self.data(bias),
            &dims,
        );
        let rg = self.rg(&[x, w_input, w_hidden, bias]);
        let op = Op::Lstm { x, w_input, w_hidden, bias, dims, trace };
        Ok(self.push(Tensor::new([sx[0], sx[1], hidden], out)?, op, rg))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let value = Tensor::new(self.shape(x).to_vec(), kernels::softmax_rows(self.data(x), n)).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x, n }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let value = Tensor::new(self.shape(x).to_vec(), kernels::log_softmax_rows(self.data(x), n)).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax { x, n }, rg)
    }

    /// Scales each trailing-axis row to unit L2 norm; rows with norm
    /// below `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let n = *self.shape(x).last().unwrap();
        let src = self.data(x);
        let mut norms = Vec::with_capacity(src.len() / n);
        let mut out = vec![0.0; src.len()];
        for (xr, yr) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let norm = libm::sqrt(xr.iter().map(|v| v * v).sum::<f64>());
            let d = norm.max(eps);
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = v / d;
            }
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::L2Normalize { x, n, norms, eps }, rg)
    }

    /// Concatenates along the trailing axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nd = sa.len();
        if nd == 0 || sb.len() != nd || sa[..nd - 1] != sb[..nd - 1] {
            return Err(Error::dim("concat_last", &sa, &sb));
        }
        let (na, nb) = (sa[nd - 1], sb[nd - 1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks_exact(na).zip(db.chunks_exact(nb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        shape[nd - 1] = na + nb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast { a, b, na, nb }, rg))
    }

    /// Selects entries of `src` along its leading axis.
    pub fn gather(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if index.is_empty() {
            return Err(Error::Contract("gather with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!("gather index {bad} out of range {}", s[0])));
        }
        let inner: usize = s[1..].iter().product();
        let d = self.data(src);
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let rg = self.rg(&[src]);
        let op = Op::Gather { src, index: index.to_vec(), inner };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// `y[r] = x[r, index[r]]` for a `[R×N]` input.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.len() != s[0] || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::dim("pick", &s, &[index.len()]));
        }
        let n = s[1];
        let d = self.data(x);
        let out = index.iter().enumerate().map(|(r, &i)| d[r * n + i]).collect();
        let rg = self.rg(&[x]);
        let op = Op::Pick { x, index: index.to_vec(), n };
        Ok(self.push(Tensor::new([s[0]], out)?, op, rg))
    }

    fn rows_check(&self, name: &'static str, x: Var, rows: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(rows));
        if sx.len() < 2 || sr.iter().product::<usize>() * sx[sx.len() - 1] != self.value(x).len() {
            return Err(Error::dim(name, sx, sr));
        }
        if sr != &sx[..sx.len() - 1] {
            return Err(Error::dim(name, sx, sr));
        }
        Ok(sx[sx.len() - 1])
    }

    /// Adds `rows` (shape of `x` minus its trailing axis) broadcast along
    /// the trailing axis.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let len = self.rows_check("add_rows", x, rows)?;
        let r = self.data(rows);
        let mut out = self.data(x).to_vec();
        for (chunk, &rv) in out.chunks_exact_mut(len).zip(r) {
            chunk.iter_mut().for_each(|v| *v += rv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, rows]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRows { x, rows, len }, rg))
    }

    /// Multiplies by `rows` broadcast along the trailing axis.
    pub fn scale_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let len = self.rows_check("scale_rows", x, rows)?;
        let r = self.data(rows);
        let mut out = self.data(x).to_vec();
        for (chunk, &rv) in out.chunks_exact_mut(len).zip(r) {
            chunk.iter_mut().for_each(|v| *v *= rv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, rows]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleRows { x, rows, len }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate over fan-out; nodes that do not require grad
    /// are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((d, s), o) in g.iter_mut().zip(gy).zip(db) {
                        *d += s * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((d, s), o) in g.iter_mut().zip(gy).zip(da) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, v)| *d += v * s)),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|d| *d += gy[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|d| *d += gy[0] / n));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| kernels::mm_nt(gy, db, g, *m, *n, *k));
                acc(*b, &mut |g| kernels::mm_tn(da, gy, g, *m, *k, *n));
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                acc(*a, &mut |g| {
                    for bi in 0..*batch {
                        let gyi = &gy[bi * m * n..(bi + 1) * m * n];
                        let bs = &db[bi * k * n..(bi + 1) * k * n];
                        let gi = &mut g[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            kernels::mm_nn(gyi, bs, gi, m, n, k);
                        } else {
                            kernels::mm_nt(gyi, bs, gi, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for bi in 0..*batch {
                        let gyi = &gy[bi * m * n..(bi + 1) * m * n];
                        let ai = &da[bi * m * k..(bi + 1) * m * k];
                        let gi = &mut g[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // b is n×k: g += gyᵀ · a
                            kernels::mm_tn(gyi, ai, gi, m, n, k);
                        } else {
                            kernels::mm_tn(ai, gyi, gi, m, k, n);
                        }
                    }
                });
            }
            Op::SwapLast2 { x, outer, rows, cols } => acc(*x, &mut |g| {
                for o in 0..*outer {
                    let base = o * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[base + r * cols + c] += gy[base + c * rows + r];
                        }
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Conv1d { x, w, dims } => {
                let (dx, dw) = (self.data(*x), self.data(*w));
                acc(*x, &mut |g| kernels::conv1d_backward(dx, dw, gy, dims, Some(g), None));
                acc(*w, &mut |g| kernels::conv1d_backward(dx, dw, gy, dims, None, Some(g)));
            }
            Op::AddBias { x, bias, span } => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*bias, &mut |g| {
                    for o in 0..span.outer {
                        for m in 0..span.mid {
                            let base = (o * span.mid + m) * span.inner;
                            g[m] += gy[base..base + span.inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Glu { x, span } => {
                let src = self.data(*x);
                let block = span.mid * span.inner;
                acc(*x, &mut |g| {
                    for o in 0..span.outer {
                        let base = o * 2 * block;
                        for i in 0..block {
                            let a = src[base + i];
                            let s = kernels::sigmoid(src[base + block + i]);
                            let gv = gy[o * block + i];
                            g[base + i] += gv * s;
                            g[base + block + i] += gv * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let src = self.data(*x);
                acc(*x, &mut |g| {
                    for ((d, &v), &s) in g.iter_mut().zip(gy).zip(src) {
                        *d += v * kernels::gelu_grad(s);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((d, &v), &s) in g.iter_mut().zip(gy).zip(y) {
                    *d += v * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((d, &v), &t) in g.iter_mut().zip(gy).zip(y) {
                    *d += v * (1.0 - t * t);
                }
            }),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, span } => {
                let gam = self.data(*gamma);
                let count = (span.outer * span.inner) as f64;
                let mut sum_g = vec![0.0; span.mid];
                let mut sum_gx = vec![0.0; span.mid];
                for o in 0..span.outer {
                    for c in 0..span.mid {
                        let base = (o * span.mid + c) * span.inner;
                        for i in base..base + span.inner {
                            sum_g[c] += gy[i];
                            sum_gx[c] += gy[i] * xhat[i];
                        }
                    }
                }
                acc(*x, &mut |g| {
                    for o in 0..span.outer {
                        for c in 0..span.mid {
                            let base = (o * span.mid + c) * span.inner;
                            let k = gam[c] * inv_std[c] / count;
                            for i in base..base + span.inner {
                                g[i] += k * (count * gy[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                            }
                        }
                    }
                });
                acc(*gamma, &mut |g| add_into(g, &sum_gx));
                acc(*beta, &mut |g| add_into(g, &sum_g));
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std, span } => {
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0; span.mid];
                let mut sum_gx = vec![0.0; span.mid];
                for o in 0..span.outer {
                    for c in 0..span.mid {
                        let base = (o * span.mid + c) * span.inner;
                        for i in base..base + span.inner {
                            sum_g[c] += gy[i];
                            sum_gx[c] += gy[i] * xhat[i];
                        }
                    }
                }
                acc(*x, &mut |g| {
                    for o in 0..span.outer {
                        for c in 0..span.mid {
                            let base = (o * span.mid + c) * span.inner;
                            for i in base..base + span.inner {
                                g[i] += gy[i] * gam[c] * inv_std[c];
                            }
                        }
                    }
                });
                acc(*gamma, &mut |g| add_into(g, &sum_gx));
                acc(*beta, &mut |g| add_into(g, &sum_g));
            }
            Op::Lstm { x, w_input, w_hidden, bias, dims, trace } => {
                let mut gx = self.nodes[x.0].requires_grad.then(|| vec![0.0; self.nodes[x.0].value.len()]);
                let mut gwi = self.nodes[w_input.0].requires_grad.then(|| vec![0.0; self.nodes[w_input.0].value.len()]);
                let mut gwh = self.nodes[w_hidden.0].requires_grad.then(|| vec![0.0; self.nodes[w_hidden.0].value.len()]);
                let mut gb = self.nodes[bias.0].requires_grad.then(|| vec![0.0; self.nodes[bias.0].value.len()]);
                kernels::lstm_backward(
                    self.data(*x),
                    self.data(*w_input),
                    self.data(*w_hidden),
                    y,
                    trace,
                    gy,
                    dims,
                    LstmGrads {
                        x: gx.as_deref_mut(),
                        w_input: gwi.as_deref_mut(),
                        w_hidden: gwh.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (v, g) in [(*x, gx), (*w_input, gwi), (*w_hidden, gwh), (*bias, gb)] {
                    if let Some(g) = g {
                        acc(v, &mut |d| add_into(d, &g));
                    }
                }
            }
            Op::Softmax { x, n } => acc(*x, &mut |g| {
                for ((gr, yr), gyr) in g.chunks_exact_mut(*n).zip(y.chunks_exact(*n)).zip(gy.chunks_exact(*n)) {
                    let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in gr.iter_mut().zip(yr).zip(gyr) {
                        *d += yv * (gv - dot);
                    }
                }
            }),
            Op::LogSoftmax { x, n } => acc(*x, &mut |g| {
                for ((gr, yr), gyr) in g.chunks_exact_mut(*n).zip(y.chunks_exact(*n)).zip(gy.chunks_exact(*n)) {
                    let total: f64 = gyr.iter().sum();
                    for ((d, &yv), &gv) in gr.iter_mut().zip(yr).zip(gyr) {
                        *d += gv - libm::exp(yv) * total;
                    }
                }
            }),
            Op::L2Normalize { x, n, norms, eps } => acc(*x, &mut |g| {
                for (((gr, yr), gyr), &norm) in g
                    .chunks_exact_mut(*n)
                    .zip(y.chunks_exact(*n))
                    .zip(gy.chunks_exact(*n))
                    .zip(norms)
                {
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in gr.iter_mut().zip(yr).zip(gyr) {
                            *d += (gv - yv * dot) / norm;
                        }
                    } else {
                        for (d, &gv) in gr.iter_mut().zip(gyr) {
                            *d += gv / eps;
                        }
                    }
                }
            }),
            Op::ConcatLast { a, b, na, nb } => {
                let w = na + nb;
                acc(*a, &mut |g| {
                    for (gr, gyr) in g.chunks_exact_mut(*na).zip(gy.chunks_exact(w)) {
                        add_into(gr, &gyr[..*na]);
                    }
                });
                acc(*b, &mut |g| {
                    for (gr, gyr) in g.chunks_exact_mut(*nb).zip(gy.chunks_exact(w)) {
                        add_into(gr, &gyr[*na..]);
                    }
                });
            }
            Op::Gather { src, index, inner } => acc(*src, &mut |g| {
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut g[i * inner..(i + 1) * inner], &gy[r * inner..(r + 1) * inner]);
                }
            }),
            Op::Pick { x, index, n } => acc(*x, &mut |g| {
                for (r, &i) in index.iter().enumerate() {
                    g[r * n + i] += gy[r];
                }
            }),
            Op::AddRows { x, rows, len } => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*rows, &mut |g| {
                    for (d, chunk) in g.iter_mut().zip(gy.chunks_exact(*len)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::ScaleRows { x, rows, len } => {
                let (dx, dr) = (self.data(*x), self.data(*rows));
                acc(*x, &mut |g| {
                    for ((gc, gyc), &r) in g.chunks_exact_mut(*len).zip(gy.chunks_exact(*len)).zip(dr) {
                        gc.iter_mut().zip(gyc).for_each(|(d, v)| *d += v * r);
                    }
                });
                acc(*rows, &mut |g| {
                    for ((d, gyc), xc) in g.iter_mut().zip(gy.chunks_exact(*len)).zip(dx.chunks_exact(*len)) {
                        *d += gyc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
