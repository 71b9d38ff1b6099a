//! Raw forward/backward numeric kernels on flat row-major buffers.
//!
//! Every function here is shape-unchecked; the graph layer validates
//! shapes before calling in. Backward kernels *accumulate* into their
//! output buffers.

use alloc::vec;
use alloc::vec::Vec;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Valid output range `[lo, hi)` of `t` such that `0 <= t + shift < len`.
#[inline]
fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 {
        len.saturating_sub(shift as usize)
    } else {
        len
    };
    (lo.min(len), hi)
}

#[derive(Debug, Clone)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
    pub dilation: usize,
}

impl ConvDims {
    fn shift(&self, k: usize) -> isize {
        (k as isize - (self.kernel / 2) as isize) * self.dilation as isize
    }
}

/// Dilated "same" convolution: `y[b,o,t] = Σ_{i,k} w[o,i,k] · x[b,i,t+(k−K/2)·d]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let t_len = d.len;
    let mut y = vec![0.0; d.batch * d.c_out * t_len];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let y_row = &mut y[(b * d.c_out + o) * t_len..(b * d.c_out + o + 1) * t_len];
            for i in 0..d.c_in {
                let x_row = &x[(b * d.c_in + i) * t_len..(b * d.c_in + i + 1) * t_len];
                for k in 0..d.kernel {
                    let wv = w[(o * d.c_in + i) * d.kernel + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let s = d.shift(k);
                    let (lo, hi) = tap_range(s, t_len);
                    for t in lo..hi {
                        y_row[t] += wv * x_row[(t as isize + s) as usize];
                    }
                }
            }
        }
    }
    y
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: &ConvDims,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let t_len = d.len;
    if let Some(gx) = gx {
        for b in 0..d.batch {
            for o in 0..d.c_out {
                let gy_row = &gy[(b * d.c_out + o) * t_len..(b * d.c_out + o + 1) * t_len];
                for i in 0..d.c_in {
                    let gx_row = &mut gx[(b * d.c_in + i) * t_len..(b * d.c_in + i + 1) * t_len];
                    for k in 0..d.kernel {
                        let wv = w[(o * d.c_in + i) * d.kernel + k];
                        if wv == 0.0 {
                            continue;
                        }
                        let s = d.shift(k);
                        let (lo, hi) = tap_range(s, t_len);
                        for t in lo..hi {
                            gx_row[(t as isize + s) as usize] += wv * gy_row[t];
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..d.batch {
            for o in 0..d.c_out {
                let gy_row = &gy[(b * d.c_out + o) * t_len..(b * d.c_out + o + 1) * t_len];
                for i in 0..d.c_in {
                    let x_row = &x[(b * d.c_in + i) * t_len..(b * d.c_in + i + 1) * t_len];
                    for k in 0..d.kernel {
                        let s = d.shift(k);
                        let (lo, hi) = tap_range(s, t_len);
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += gy_row[t] * x_row[(t as isize + s) as usize];
                        }
                        gw[(o * d.c_in + i) * d.kernel + k] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Row-wise softmax over the trailing axis of extent `n`.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            let e = libm::exp(xv - max);
            *yv = e;
            sum += e;
        }
        for yv in yr.iter_mut() {
            *yv /= sum;
        }
    }
    y
}

pub fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xr.iter().map(|&v| libm::exp(v - max)).sum();
        let lse = max + libm::log(sum);
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            *yv = xv - lse;
        }
    }
    y
}

/// Per-channel statistics of a `B × C × T` batch.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by `B·T`).
    pub var: Vec<f64>,
}

pub fn channel_stats(x: &[f64], batch: usize, channels: usize, len: usize) -> BatchStats {
    let count = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let row = &x[(b * channels + c) * len..(b * channels + c + 1) * len];
            s += row.iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..batch {
            let row = &x[(b * channels + c) * len..(b * channels + c + 1) * len];
            v += row.iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count;
    }
    BatchStats { mean, var }
}

/// Scratch saved by a sequence LSTM forward for its backward pass.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Gate activations `[B, T, 4H]` in (input, forget, cell, output) order.
    pub gates: Vec<f64>,
    /// Cell states `[B, T, H]`.
    pub cells: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmDims {
    pub batch: usize,
    pub len: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

/// One recurrent step: returns `(h', c')` and writes the four gate
/// activations into `gates` (length `4H`).
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_input: &[f64],
    w_hidden: &[f64],
    bias: &[f64],
    gates: &mut [f64],
    h_out: &mut [f64],
    c_out: &mut [f64],
) {
    let hidden = h.len();
    let d = x.len();
    for (r, z) in gates.iter_mut().enumerate() {
        let mut acc = bias[r];
        let wx = &w_input[r * d..(r + 1) * d];
        for (a, b) in wx.iter().zip(x) {
            acc += a * b;
        }
        let wh = &w_hidden[r * hidden..(r + 1) * hidden];
        for (a, b) in wh.iter().zip(h) {
            acc += a * b;
        }
        *z = acc;
    }
    for j in 0..hidden {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hidden + j]);
        let g = libm::tanh(gates[2 * hidden + j]);
        let o = sigmoid(gates[3 * hidden + j]);
        gates[j] = i;
        gates[hidden + j] = f;
        gates[2 * hidden + j] = g;
        gates[3 * hidden + j] = o;
        let cn = f * c[j] + i * g;
        c_out[j] = cn;
        h_out[j] = o * libm::tanh(cn);
    }
}

impl LstmDims {
    fn step_time(&self, s: usize) -> usize {
        if self.reverse {
            self.len - 1 - s
        } else {
            s
        }
    }
}

pub fn lstm_forward(
    x: &[f64],
    w_input: &[f64],
    w_hidden: &[f64],
    bias: &[f64],
    d: &LstmDims,
) -> (Vec<f64>, LstmTrace) {
    let hd = d.hidden;
    let mut out = vec![0.0; d.batch * d.len * hd];
    let mut gates = vec![0.0; d.batch * d.len * 4 * hd];
    let mut cells = vec![0.0; d.batch * d.len * hd];
    let zeros = vec![0.0; hd];
    let mut h_buf = vec![0.0; hd];
    let mut c_buf = vec![0.0; hd];
    for b in 0..d.batch {
        for s in 0..d.len {
            let t = d.step_time(s);
            let bt = b * d.len + t;
            let (h_prev, c_prev): (&[f64], &[f64]) = if s == 0 {
                (&zeros, &zeros)
            } else {
                let pt = b * d.len + d.step_time(s - 1);
                (&out[pt * hd..(pt + 1) * hd], &cells[pt * hd..(pt + 1) * hd])
            };
            lstm_cell(
                &x[bt * d.input..(bt + 1) * d.input],
                h_prev,
                c_prev,
                w_input,
                w_hidden,
                bias,
                &mut gates[bt * 4 * hd..(bt + 1) * 4 * hd],
                &mut h_buf,
                &mut c_buf,
            );
            out[bt * hd..(bt + 1) * hd].copy_from_slice(&h_buf);
            cells[bt * hd..(bt + 1) * hd].copy_from_slice(&c_buf);
        }
    }
    (out, LstmTrace { gates, cells })
}

pub struct LstmGrads<'a> {
    pub x: Option<&'a mut [f64]>,
    pub w_input: Option<&'a mut [f64]>,
    pub w_hidden: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

/// Backpropagation through time for [`lstm_forward`].
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    x: &[f64],
    w_input: &[f64],
    w_hidden: &[f64],
    out: &[f64],
    trace: &LstmTrace,
    gy: &[f64],
    d: &LstmDims,
    mut grads: LstmGrads<'_>,
) {
    let hd = d.hidden;
    let g4 = 4 * hd;
    let mut gh_next = vec![0.0; hd];
    let mut gc_next = vec![0.0; hd];
    let mut dz = vec![0.0; g4];
    let zeros = vec![0.0; hd];
    for b in 0..d.batch {
        gh_next.iter_mut().for_each(|v| *v = 0.0);
        gc_next.iter_mut().for_each(|v| *v = 0.0);
        for s in (0..d.len).rev() {
            let t = d.step_time(s);
            let bt = b * d.len + t;
            let gates = &trace.gates[bt * g4..(bt + 1) * g4];
            let cell = &trace.cells[bt * hd..(bt + 1) * hd];
            let (h_prev, c_prev): (&[f64], &[f64]) = if s == 0 {
                (&zeros, &zeros)
            } else {
                let pt = b * d.len + d.step_time(s - 1);
                (&out[pt * hd..(pt + 1) * hd], &trace.cells[pt * hd..(pt + 1) * hd])
            };
            for j in 0..hd {
                let i = gates[j];
                let f = gates[hd + j];
                let g = gates[2 * hd + j];
                let o = gates[3 * hd + j];
                let gh = gy[bt * hd + j] + gh_next[j];
                let tc = libm::tanh(cell[j]);
                let go = gh * tc;
                let gc = gc_next[j] + gh * o * (1.0 - tc * tc);
                dz[j] = gc * g * i * (1.0 - i);
                dz[hd + j] = gc * c_prev[j] * f * (1.0 - f);
                dz[2 * hd + j] = gc * i * (1.0 - g * g);
                dz[3 * hd + j] = go * o * (1.0 - o);
                gc_next[j] = gc * f;
            }
            let x_t = &x[bt * d.input..(bt + 1) * d.input];
            if let Some(gw) = grads.w_input.as_deref_mut() {
                for r in 0..g4 {
                    let z = dz[r];
                    if z != 0.0 {
                        for (gv, &xv) in gw[r * d.input..(r + 1) * d.input].iter_mut().zip(x_t) {
                            *gv += z * xv;
                        }
                    }
                }
            }
            if let Some(gw) = grads.w_hidden.as_deref_mut() {
                for r in 0..g4 {
                    let z = dz[r];
                    if z != 0.0 {
                        for (gv, &hv) in gw[r * hd..(r + 1) * hd].iter_mut().zip(h_prev) {
                            *gv += z * hv;
                        }
                    }
                }
            }
            if let Some(gb) = grads.bias.as_deref_mut() {
                for (gv, &z) in gb.iter_mut().zip(&dz) {
                    *gv += z;
                }
            }
            if let Some(gx) = grads.x.as_deref_mut() {
                let gx_t = &mut gx[bt * d.input..(bt + 1) * d.input];
                for r in 0..g4 {
                    let z = dz[r];
                    if z != 0.0 {
                        for (gv, &wv) in gx_t.iter_mut().zip(&w_input[r * d.input..(r + 1) * d.input]) {
                            *gv += z * wv;
                        }
                    }
                }
            }
            gh_next.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..g4 {
                let z = dz[r];
                if z != 0.0 {
                    for (gv, &wv) in gh_next.iter_mut().zip(&w_hidden[r * hd..(r + 1) * hd]) {
                        *gv += z * wv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        mm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        mm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        mm_tn(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn tap_range_bounds() {
        assert_eq!(tap_range(0, 5), (0, 5));
        assert_eq!(tap_range(2, 5), (0, 3));
        assert_eq!(tap_range(-2, 5), (2, 5));
        assert_eq!(tap_range(9, 5), (0, 0));
        assert_eq!(tap_range(-9, 5), (5, 5));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
