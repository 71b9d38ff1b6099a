use super::*;
use crate::gradcheck;
use crate::rng::{self, Stream};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Naive triple loop, written independently of the kernels.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    c
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let b = t(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.0, 7.0]);
    let i3 = g.constant(Tensor::identity(3));
    let bv = g.constant(b.clone());
    let y = g.matmul(i3, bv).unwrap();
    assert_eq!(g.value(y), &b);

    let z = g.constant(Tensor::zeros([2, 3]));
    let y = g.matmul(z, bv).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let c = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let oracle = matmul_oracle(&a, &c);
    assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
    let (av, cv) = (g.constant(a), g.constant(c));
    let y = g.matmul(av, cv).unwrap();
    assert_eq!(g.value(y).data(), oracle.as_slice());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b).unwrap_err() {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn conv1d_identity_and_zero() {
    let mut g = Graph::new();
    let x = t(&[2, 5], &[1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.5, 0.0, 2.0, 9.0]);
    let xv = g.constant(x.clone());
    let w = g.constant(t(&[2, 2, 1], &[1.0, 0.0, 0.0, 1.0]));
    for d in 1..4 {
        let y = g.conv1d(xv, w, d).unwrap();
        assert_eq!(g.value(y), &x);
    }
    let zero = g.constant(Tensor::zeros([2, 5]));
    let w3 = g.constant(Tensor::full([3, 2, 3], 0.7));
    let y = g.conv1d(zero, w3, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 5]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv1d_impulse_taps_follow_dilation() {
    // Direct summation oracle for a unit impulse at the centre of T=9:
    // y[t] = Σ_k w[k]·x[t + (k−1)·2] is nonzero only where t + (k−1)·2 == 4.
    let mut x = vec![0.0; 9];
    x[4] = 1.0;
    let w = [1.0, 10.0, 100.0];
    let mut oracle = vec![0.0; 9];
    for (tt, o) in oracle.iter_mut().enumerate() {
        for (k, wk) in w.iter().enumerate() {
            let src = tt as isize + (k as isize - 1) * 2;
            if (0..9).contains(&src) {
                *o += wk * x[src as usize];
            }
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 9], &x));
    let wv = g.constant(t(&[1, 1, 3], &w));
    let y = g.conv1d(xv, wv, 2).unwrap();
    assert_eq!(g.value(y).data(), oracle.as_slice());
    let nonzero: Vec<isize> = (0..9).filter(|&i| oracle[i] != 0.0).map(|i| i as isize - 4).collect();
    assert_eq!(nonzero, vec![-2, 0, 2]);
}

#[test]
fn conv1d_rejects_even_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 4]));
    let w = g.constant(Tensor::zeros([1, 1, 2]));
    assert_eq!(g.conv1d(x, w, 1).unwrap_err(), Error::UnsupportedKernel(2));
}

#[test]
fn glu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[4.0, -2.0, 0.0, 0.0]));
    let y = g.glu(x).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -1.0]);

    let x = g.constant(t(&[2, 1], &[3.0, -800.0]));
    let y = g.glu(x).unwrap();
    assert!(g.value(y).data()[0].abs() < 1e-300);

    let mut r = rng::derive(3, Stream::Gradcheck, 9);
    let raw = gradcheck::randn(&mut r, &[4, 2]);
    let x = g.constant(raw.clone());
    let y = g.glu(x).unwrap();
    for c in 0..2 {
        for tt in 0..2 {
            let a = raw.at(&[c, tt]);
            let b = raw.at(&[2 + c, tt]);
            let expect = a / (1.0 + (-b).exp());
            assert!((g.value(y).at(&[c, tt]) - expect).abs() < 1e-15);
        }
    }

    let odd = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(g.glu(odd), Err(Error::Dimension { .. })));
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::full([1], 1.0));
    let zero = g.constant(Tensor::zeros([1]));
    // zero mean, unit (biased) variance
    let x = t(&[2, 1, 2], &[1.0, -1.0, 1.0, -1.0]);
    let xv = g.constant(x.clone());
    let (y, _) = g.batch_norm(xv, one, zero, 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-5 * 0.5 + 1e-9);

    let five = g.constant(Tensor::full([1], 5.0));
    let c = g.constant(Tensor::full([3, 1, 4], 2.5));
    let (y, _) = g.batch_norm(c, one, five, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 5.0).abs() < 1e-12));

    let mut r = rng::derive(11, Stream::Gradcheck, 2);
    let raw = gradcheck::randn(&mut r, &[4, 3, 7]).map(|v| 3.0 * v + 2.0);
    let ones = g.constant(Tensor::full([3], 1.0));
    let zeros = g.constant(Tensor::zeros([3]));
    let xv = g.constant(raw);
    let (y, _) = g.batch_norm(xv, ones, zeros, 1e-5).unwrap();
    let out = g.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|b| (0..7).map(move |tt| (b, tt))).map(|(b, tt)| out.at(&[b, ch, tt])).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batch_norm_eval_with_initial_stats_is_affine() {
    let mut g = Graph::new();
    let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let xv = g.constant(x.clone());
    let gam = g.constant(Tensor::full([2], 1.0));
    let bet = g.constant(Tensor::zeros([2]));
    let y = g.batch_norm_eval(xv, gam, bet, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(&x) < 1e-4);
}

fn lstm_cell_oracle(x: &[f64], h: &[f64], c: &[f64], wi: &Tensor, wh: &Tensor, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z = |row: usize| -> f64 {
        let mut s = b[row];
        for (j, xv) in x.iter().enumerate() {
            s += wi.at(&[row, j]) * xv;
        }
        for (j, hv) in h.iter().enumerate() {
            s += wh.at(&[row, j]) * hv;
        }
        s
    };
    let mut hn = vec![0.0; hid];
    let mut cn = vec![0.0; hid];
    for j in 0..hid {
        let i = sig(z(j));
        let f = sig(z(hid + j));
        let gg = z(2 * hid + j).tanh();
        let o = sig(z(3 * hid + j));
        cn[j] = f * c[j] + i * gg;
        hn[j] = o * cn[j].tanh();
    }
    (hn, cn)
}

#[test]
fn recurrent_cell_examples() {
    let (d, hid) = (3, 2);
    let x = [0.3, -1.0, 2.0];
    let h = [0.5, -0.5];
    let c = [1.5, -2.0];
    let mut gates = vec![0.0; 4 * hid];
    let (mut hn, mut cn) = (vec![0.0; hid], vec![0.0; hid]);

    let zero_wi = vec![0.0; 4 * hid * d];
    let zero_wh = vec![0.0; 4 * hid * hid];
    // all weights and biases zero: i = f = o = 0.5, g = 0, so c' = c/2
    kernels::lstm_cell(&x, &h, &[0.0, 0.0], &zero_wi, &zero_wh, &vec![0.0; 4 * hid], &mut gates, &mut hn, &mut cn);
    assert_eq!(cn, vec![0.0, 0.0]);
    assert_eq!(hn, vec![0.0, 0.0]);

    let mut bias = vec![0.0; 4 * hid];
    bias[hid..2 * hid].iter_mut().for_each(|b| *b = 50.0);
    kernels::lstm_cell(&[0.0; 3], &h, &c, &zero_wi, &zero_wh, &bias, &mut gates, &mut hn, &mut cn);
    for j in 0..hid {
        assert!((cn[j] - c[j]).abs() < 1e-12);
    }

    let mut r = rng::derive(5, Stream::Gradcheck, 3);
    let wi = gradcheck::randn(&mut r, &[4 * hid, d]);
    let wh = gradcheck::randn(&mut r, &[4 * hid, hid]);
    let b = gradcheck::randn(&mut r, &[4 * hid]);
    kernels::lstm_cell(&x, &h, &c, wi.data(), wh.data(), b.data(), &mut gates, &mut hn, &mut cn);
    let (ho, co) = lstm_cell_oracle(&x, &h, &c, &wi, &wh, b.data());
    for j in 0..hid {
        assert!((hn[j] - ho[j]).abs() < 1e-14);
        assert!((cn[j] - co[j]).abs() < 1e-14);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([4], 0.3));
    let y = g.softmax(x);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = g.softmax(x);
    let expect = [0.09003, 0.24473, 0.66524];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-5);
    }
    let shifted = g.constant(t(&[3], &[101.0, 102.0, 103.0]));
    let ys = g.softmax(shifted);
    assert!(g.value(ys).max_abs_diff(g.value(y)) < 1e-15);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.parameter(t(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.parameter(t(&[3], &[1.0, -2.0, 3.0]));
    let y = g.gelu(x);
    let z = g.scale(y, 0.0);
    let s = g.sum(z);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let x = g.parameter(Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shared_subexpression_gradients_sum_over_paths() {
    // f(x) = sum(tanh(x) ⊙ tanh(x)) with one shared node versus two
    // separately built copies of the subgraph.
    let raw = t(&[4], &[0.1, -0.7, 1.3, 2.0]);
    let mut g = Graph::new();
    let x = g.parameter(raw.clone());
    let th = g.tanh(x);
    let sq = g.mul(th, th).unwrap();
    let s = g.sum(sq);
    let shared = g.backward(s).unwrap().get(x).unwrap().to_vec();

    let mut g = Graph::new();
    let x = g.parameter(raw);
    let a = g.tanh(x);
    let b = g.tanh(x);
    let sq = g.mul(a, b).unwrap();
    let s = g.sum(sq);
    let dup = g.backward(s).unwrap().get(x).unwrap().to_vec();
    assert_eq!(shared, dup);
}

#[test]
fn op_suite_passes_over_twenty_seeds() {
    for seed in 0..20 {
        for c in gradcheck::op_suite(seed).unwrap() {
            assert!(c.passed(1e-4), "seed {seed}: {} rel err {:e}", c.name, c.max_rel_error);
        }
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut r = rng::derive(42, Stream::Gradcheck, 4);
        let mut g = Graph::new();
        let x = g.parameter(gradcheck::randn(&mut r, &[2, 3, 8]));
        let w = g.parameter(gradcheck::randn(&mut r, &[4, 3, 3]));
        let y = g.conv1d(x, w, 2).unwrap();
        let y = g.glu(y).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.get(x).unwrap().to_vec(), grads.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let mut g = Graph::new();
            let n = v.len();
            let x = g.constant(Tensor::new([n], v).unwrap());
            let y = g.softmax(x);
            let d = g.value(y).data();
            prop_assert!(d.iter().all(|&p| p >= 0.0));
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn conv1d_identity_kernel_is_exact(
            v in proptest::collection::vec(-1e3f64..1e3, 6..40),
            dilation in 1usize..6,
        ) {
            let c = 2;
            let tl = v.len() / c;
            let x = Tensor::new([c, tl], v[..c * tl].to_vec()).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut w = Tensor::zeros([c, c, 3]);
            for i in 0..c {
                w.data_mut()[(i * c + i) * 3 + 1] = 1.0;
            }
            let wv = g.constant(w);
            let y = g.conv1d(xv, wv, dilation).unwrap();
            prop_assert_eq!(g.value(y), &x);
        }
    }
}
