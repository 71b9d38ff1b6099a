//! Small dense linear algebra for least-squares fits.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cholesky factor `L` (row-major, lower) of a symmetric positive
/// definite `n × n` matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Numerical {
                        stage: "cholesky".into(),
                        detail: alloc::format!("matrix not positive definite at pivot {i}"),
                    });
                }
                l[i * n + i] = libm::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` in place.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Ridge-regularized least-squares map `W: [F × C]` minimizing
/// `Σ ‖W·x − y‖²` over paired `[C × T]` / `[F × T]` samples.
pub fn fit_linear_map(pairs: &[(&Tensor, &Tensor)], ridge: f64) -> Result<Tensor> {
    let (x0, y0) = pairs
        .first()
        .ok_or_else(|| Error::Contract("no samples to fit".into()))?;
    let (c, f) = (x0.shape()[0], y0.shape()[0]);
    let mut xx = vec![0.0; c * c];
    let mut yx = vec![0.0; f * c];
    for (x, y) in pairs {
        if x.shape()[0] != c || y.shape()[0] != f || x.shape()[1] != y.shape()[1] {
            return Err(Error::dim("fit_linear_map", x.shape(), y.shape()));
        }
        let t = x.shape()[1];
        for i in 0..c {
            let xi = x.row(i);
            for j in 0..=i {
                let xj = x.row(j);
                let s: f64 = (0..t).map(|k| xi[k] * xj[k]).sum();
                xx[i * c + j] += s;
                if i != j {
                    xx[j * c + i] += s;
                }
            }
        }
        for r in 0..f {
            let yr = y.row(r);
            for j in 0..c {
                let xj = x.row(j);
                yx[r * c + j] += (0..t).map(|k| yr[k] * xj[k]).sum::<f64>();
            }
        }
    }
    for i in 0..c {
        xx[i * c + i] += ridge;
    }
    let l = cholesky(&xx, c)?;
    // W (X Xᵀ) = Y Xᵀ, solve row by row (X Xᵀ is symmetric).
    for r in 0..f {
        cholesky_solve(&l, c, &mut yx[r * c..(r + 1) * c]);
    }
    Tensor::new([f, c], yx)
}

/// `W · x` for `W: [F × C]`, `x: [C × T]`.
pub fn apply_map(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (f, c) = (w.shape()[0], w.shape()[1]);
    if x.shape()[0] != c {
        return Err(Error::dim("apply_map", w.shape(), x.shape()));
    }
    let t = x.shape()[1];
    let mut out = vec![0.0; f * t];
    crate::autodiff::kernels::mm_nn(w.data(), x.data(), &mut out, f, c, t);
    Tensor::new([f, t], out)
}
