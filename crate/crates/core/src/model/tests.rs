use super::*;
use crate::gradcheck::{self, randn};
use crate::optim::{adam_step, AdamConfig, AdamState};
use alloc::string::ToString;
use proptest::prelude::*;

fn layout(c: usize, seed: u64) -> SensorLayout {
    let mut r = rng::derive(seed, Stream::Gradcheck, 11);
    SensorLayout::new((0..c).map(|_| [r.gen::<f64>(), r.gen::<f64>()]).collect()).unwrap()
}

fn subjects(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn model(cfg: ModelConfig, n_subj: usize) -> Model {
    let l = layout(cfg.c_in, 3);
    Model::new(cfg, subjects(n_subj), l, 5).unwrap()
}

/// Runs one stage of `m` on `x`.
fn run(m: &Model, x: &Tensor, train: bool, f: impl FnOnce(&mut Session, &mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let mut s = m.session(p, train);
    let xv = g.constant(x.clone());
    let y = f(&mut s, &mut g, xv).unwrap();
    g.value(y).clone()
}

fn zero_params(m: &mut Model, prefix: &str) {
    let names: Vec<String> = m.params.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        m.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn reverse_time(x: &Tensor) -> Tensor {
    let t = *x.shape().last().unwrap();
    let mut out = x.clone();
    for (o, i) in out.data_mut().chunks_exact_mut(t).zip(x.data().chunks_exact(t)) {
        for k in 0..t {
            o[k] = i[t - 1 - k];
        }
    }
    out
}

#[test]
fn dilation_schedule() {
    let got: Vec<(usize, usize)> = (0..5).map(dilations).collect();
    assert_eq!(got, vec![(1, 2), (4, 8), (16, 1), (2, 4), (8, 16)]);
    assert_eq!(receptive_field(5), 1 + 2 * (3 + 12 + 17 + 6 + 24));
}

#[test]
fn modes_round_trip_through_names() {
    for m in SubjectMode::ALL {
        assert_eq!(SubjectMode::parse(m.as_str()).unwrap(), *m);
    }
    for m in SpatialMode::ALL {
        assert_eq!(SpatialMode::parse(m.as_str()).unwrap(), *m);
    }
    for m in RnnMode::ALL {
        assert_eq!(RnnMode::parse(m.as_str()).unwrap(), *m);
    }
    assert!(SubjectMode::parse("subject_layers").is_err());
}

#[test]
fn single_sensor_is_broadcast() {
    let m = model(ModelConfig::tiny(1, 3, 4, 2), 1);
    let x = Tensor::new([1, 1, 5], vec![1.0, -2.0, 3.0, 0.5, 0.0]).unwrap();
    let y = run(&m, &x, false, |s, g, x| s.spatial_attention(g, x, &[0], None));
    for o in 0..3 {
        assert_eq!(&y.data()[o * 5..(o + 1) * 5], x.data());
    }
}

#[test]
fn zero_coefficients_average_the_sensors() {
    let mut m = model(ModelConfig::tiny(3, 2, 4, 2), 1);
    zero_params(&mut m, "spatial");
    let x = Tensor::new([1, 3, 2], vec![1.0, 2.0, 4.0, 5.0, 7.0, 11.0]).unwrap();
    let y = run(&m, &x, false, |s, g, x| s.spatial_attention(g, x, &[0], None));
    for o in 0..2 {
        assert!((y.at(&[0, o, 0]) - 4.0).abs() < 1e-12);
        assert!((y.at(&[0, o, 1]) - 6.0).abs() < 1e-12);
    }
}

#[test]
fn score_gap_of_ten_gives_sigmoid_weight() {
    let cfg = ModelConfig {
        k_harmonics: 2,
        ..ModelConfig::tiny(2, 1, 4, 2)
    };
    let l = SensorLayout::new(vec![[0.0, 0.0], [0.25, 0.0]]).unwrap();
    let mut m = Model::new(cfg, subjects(1), l, 0).unwrap();
    zero_params(&mut m, "spatial");
    // harmonic (k=1, l=0) real part: cos 0 = 1 at sensor 0, cos(π/2) = 0 at sensor 1
    m.params.get_mut("spatial.coeffs").unwrap().data_mut()[2] = 10.0;
    let w = m.spatial_weights(0).unwrap();
    let expected = 1.0 / (1.0 + (-10.0f64).exp());
    assert!((w.data()[0] - expected).abs() < 1e-12);
    assert!((w.data()[0] - 0.99995).abs() < 1e-5);
}

#[test]
fn subject_stage_starts_as_identity() {
    let mut r = rng::derive(1, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[2, 5, 7]);
    for mode in SubjectMode::ALL {
        let cfg = ModelConfig {
            subject_mode: *mode,
            ..ModelConfig::tiny(4, 5, 4, 2)
        };
        let m = model(cfg, 3);
        let y = run(&m, &x, false, |s, g, x| s.subject_stage(g, x, &[2, 0]));
        assert!(y.max_abs_diff(&x) < 1e-12, "{mode:?}");
    }
}

#[test]
fn unknown_subject_is_rejected() {
    let cfg = ModelConfig {
        spatial_mode: SpatialMode::PerSubject,
        ..ModelConfig::tiny(4, 5, 4, 2)
    };
    let m = model(cfg, 2);
    assert!(matches!(m.subject_index("nobody"), Err(Error::UnknownSubject(_))));
    let x = Tensor::zeros([1, 4, 8]);
    assert!(matches!(m.infer(&x, &[7]), Err(Error::UnknownSubject(_))));

    let shared = ModelConfig {
        subject_mode: SubjectMode::Shared,
        ..ModelConfig::tiny(4, 5, 4, 2)
    };
    assert_eq!(model(shared, 2).subject_index("nobody").unwrap(), 0);
}

#[test]
fn zero_input_stays_zero_through_convolutions() {
    let m = model(ModelConfig::tiny(4, 6, 4, 2), 1);
    let x = Tensor::zeros([2, 6, 20]);
    for train in [false, true] {
        let y = run(&m, &x, train, |s, g, x| s.conv_sequence(g, x));
        assert_eq!(y.shape(), &[2, 4, 20]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn default_network_widens_270_to_320() {
    let cfg = ModelConfig {
        c_in: 4,
        k_harmonics: 2,
        rnn_hidden: 4,
        ..ModelConfig::default()
    };
    let m = model(cfg, 1);
    let x = Tensor::full([1, 270, 4], 0.1);
    let y = run(&m, &x, false, |s, g, x| s.conv_sequence(g, x));
    assert_eq!(y.shape(), &[1, 320, 4]);
}

#[test]
fn zero_recurrent_weights_give_zero_output() {
    let mut m = model(ModelConfig::tiny(4, 6, 4, 2), 1);
    zero_params(&mut m, "rnn");
    let mut r = rng::derive(2, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[1, 4, 1]);
    let y = run(&m, &x, false, |s, g, x| s.dual_path_rnn(g, x));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn uniform_attention_averages_over_time() {
    let cfg = ModelConfig {
        rnn_mode: RnnMode::BidirectionalAttention,
        ..ModelConfig::tiny(4, 6, 4, 2)
    };
    let mut m = model(cfg, 1);
    zero_params(&mut m, "rnn.0.attn.q");
    let mut r = rng::derive(3, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[1, 6, 4]);
    let y = run(&m, &x, false, |s, g, x| s.self_attention(g, x, "rnn.0.attn"));
    // oracle: o(mean_t v(x_t)) = o(v(mean_t x_t)) for affine maps
    let p = |n: &str| m.params.get(n).unwrap().clone();
    let affine = |w: &Tensor, b: &Tensor, v: &[f64]| -> Vec<f64> {
        (0..w.shape()[1])
            .map(|j| b.data()[j] + (0..v.len()).map(|i| v[i] * w.at(&[i, j])).sum::<f64>())
            .collect()
    };
    let mean: Vec<f64> = (0..4).map(|d| (0..6).map(|t| x.at(&[0, t, d])).sum::<f64>() / 6.0).collect();
    let v = affine(&p("rnn.0.attn.v.w"), &p("rnn.0.attn.v.b"), &mean);
    let o = affine(&p("rnn.0.attn.o.w"), &p("rnn.0.attn.o.b"), &v);
    for t in 0..6 {
        for d in 0..4 {
            assert!((y.at(&[0, t, d]) - o[d]).abs() < 1e-12);
        }
    }
}

#[test]
fn bidirectional_stage_is_symmetric_under_time_reversal() {
    let cfg = ModelConfig {
        rnn_mode: RnnMode::BidirectionalAttention,
        ..ModelConfig::tiny(4, 6, 4, 2)
    };
    let m = model(cfg, 1);
    let h = m.config.rnn_hidden;
    let mut swapped = m.clone();
    for r in 0..2 {
        for part in ["wi", "wh", "b"] {
            let f = m.params.get(&format!("rnn.{r}.fwd.{part}")).unwrap().clone();
            let b = m.params.get(&format!("rnn.{r}.bwd.{part}")).unwrap().clone();
            *swapped.params.get_mut(&format!("rnn.{r}.fwd.{part}")).unwrap() = b;
            *swapped.params.get_mut(&format!("rnn.{r}.bwd.{part}")).unwrap() = f;
        }
        let w = m.params.get(&format!("rnn.{r}.proj.w")).unwrap();
        let d2 = w.shape()[1];
        let sw = swapped.params.get_mut(&format!("rnn.{r}.proj.w")).unwrap();
        for i in 0..2 * h {
            let src = if i < h { i + h } else { i - h };
            sw.data_mut()[i * d2..(i + 1) * d2].copy_from_slice(&w.data()[src * d2..(src + 1) * d2]);
        }
    }
    let mut r = rng::derive(4, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[2, 4, 9]);
    let y = run(&m, &x, false, |s, g, x| s.dual_path_rnn(g, x));
    let y_rev = run(&swapped, &reverse_time(&x), false, |s, g, x| s.dual_path_rnn(g, x));
    assert!(reverse_time(&y_rev).max_abs_diff(&y) < 1e-12);
}

#[test]
fn final_projection_shapes_and_zero_weights() {
    let mut m = model(ModelConfig::tiny(4, 6, 4, 5), 1);
    let mut r = rng::derive(5, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[1, 4, 300]);
    let y = run(&m, &x, false, |s, g, x| s.final_projection(g, x));
    assert_eq!(y.shape(), &[1, 5, 300]);
    zero_params(&mut m, "proj");
    let y = run(&m, &x, false, |s, g, x| s.final_projection(g, x));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_shape_and_eval_determinism() {
    let m = model(ModelConfig::tiny(4, 6, 4, 3), 2);
    let mut r = rng::derive(6, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[2, 4, 33]);
    let a = m.infer(&x, &[0, 1]).unwrap();
    assert_eq!(a.shape(), &[2, 3, 33]);
    assert_eq!(a, m.infer(&x, &[0, 1]).unwrap());
    let single = m.infer(&x.index_outer(1), &[1]).unwrap();
    assert_eq!(single.shape(), &[3, 33]);
}

#[test]
fn non_finite_values_name_their_stage() {
    let mut m = model(ModelConfig::tiny(4, 6, 4, 3), 1);
    let mut x = Tensor::zeros([1, 4, 8]);
    x.data_mut()[3] = f64::NAN;
    assert!(matches!(m.infer(&x, &[0]), Err(Error::Numerical { ref stage, .. }) if stage == "input"));

    // centre tap; the outer taps of a dilation-8 kernel only ever see padding here
    m.params.get_mut("conv.1.conv2.w").unwrap().data_mut()[1] = f64::INFINITY;
    let err = m.infer(&Tensor::full([1, 4, 8], 1.0), &[0]);
    assert!(matches!(err, Err(Error::Numerical { ref stage, .. }) if stage == "conv_sequence"), "{err:?}");
}

#[test]
fn spatial_dropout_masks_sensors_in_training_only() {
    let cfg = ModelConfig {
        spatial_dropout: 0.45,
        ..ModelConfig::tiny(6, 3, 4, 2)
    };
    let m = model(cfg, 1);
    let x = Tensor::from_fn([1, 6, 4], |i| (i / 4) as f64 * 100.0);
    let clean = run(&m, &x, false, |s, g, x| s.spatial_attention(g, x, &[0], None));
    let mut rng = rng::derive(0, Stream::Dropout, 0);
    let eval_with_rng = run(&m, &x, false, |s, g, x| s.spatial_attention(g, x, &[0], Some(&mut rng)));
    assert_eq!(clean, eval_with_rng);
    let changed = (0..20).any(|k| {
        let mut rng = rng::derive(k, Stream::Dropout, 0);
        run(&m, &x, true, |s, g, x| s.spatial_attention(g, x, &[0], Some(&mut rng))) != clean
    });
    assert!(changed);
}

fn clip_like_loss(g: &mut Graph, out: Var, target: &Tensor) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(out, t).unwrap();
    let sq = g.mul(d, d).unwrap();
    g.mean(sq)
}

fn one_step(m: &mut Model, x: &Tensor, subj: &[usize], target: &Tensor) {
    let mut g = Graph::new();
    let p = m.bind(&mut g, true);
    let mut s = m.session(p.clone(), true);
    let xv = g.constant(x.clone());
    let out = s.forward(&mut g, xv, subj, None).unwrap();
    let stats = core::mem::take(&mut s.bn_stats);
    let loss = clip_like_loss(&mut g, out, target);
    let grads = g.backward(loss).unwrap();
    let mut state = AdamState::new(m.params.sizes());
    let gs: Vec<Option<&[f64]>> = p.iter().map(|v| grads.get(*v)).collect();
    let mut slots: Vec<&mut [f64]> = m.params.tensors_mut().map(|t| t.data_mut()).collect();
    adam_step(&mut slots, &gs, &mut state, &AdamConfig { lr: 1e-2, ..AdamConfig::default() }).unwrap();
    m.update_running_stats(&stats).unwrap();
}

#[test]
fn a_step_on_one_subject_leaves_the_other_untouched() {
    for (spatial, subject) in [
        (SpatialMode::PerSubject, SubjectMode::SubjectLayer),
        (SpatialMode::PerSubject, SubjectMode::SubjectEmbedding),
        (SpatialMode::Shared, SubjectMode::SubjectAttention),
    ] {
        let cfg = ModelConfig {
            spatial_mode: spatial,
            subject_mode: subject,
            ..ModelConfig::tiny(4, 6, 4, 3)
        };
        let mut m = model(cfg, 2);
        let before = m.clone();
        let mut r = rng::derive(7, Stream::Gradcheck, 0);
        let x = randn(&mut r, &[2, 4, 12]);
        let target = randn(&mut r, &[2, 3, 12]);
        let y0 = before.infer(&x.index_outer(0), &[0]).unwrap();
        let y1 = before.infer(&x.index_outer(0), &[1]).unwrap();
        assert!(y0.max_abs_diff(&y1) < 1e-12 || spatial == SpatialMode::PerSubject);

        one_step(&mut m, &x, &[0, 0], &target);
        for (name, rows) in m.subject_owned_rows(1) {
            let a = &before.params.get(&name).unwrap().data()[rows.clone()];
            let b = &m.params.get(&name).unwrap().data()[rows];
            assert_eq!(a, b, "{name}");
        }
        let changed = m
            .subject_owned_rows(0)
            .into_iter()
            .any(|(name, rows)| before.params.get(&name).unwrap().data()[rows.clone()] != m.params.get(&name).unwrap().data()[rows]);
        assert!(changed, "{spatial:?}/{subject:?}");
        let y0 = m.infer(&x.index_outer(0), &[0]).unwrap();
        let y1 = m.infer(&x.index_outer(0), &[1]).unwrap();
        assert!(y0.max_abs_diff(&y1) > 1e-9);
    }
}

#[test]
fn every_mode_combination_runs() {
    let mut r = rng::derive(8, Stream::Gradcheck, 0);
    let x = randn(&mut r, &[2, 4, 16]);
    for sm in SubjectMode::ALL {
        for sp in SpatialMode::ALL {
            for rn in RnnMode::ALL {
                let cfg = ModelConfig {
                    subject_mode: *sm,
                    spatial_mode: *sp,
                    rnn_mode: *rn,
                    ..ModelConfig::tiny(4, 6, 4, 3)
                };
                let m = model(cfg, 2);
                let mut g = Graph::new();
                let p = m.bind(&mut g, true);
                let mut s = m.session(p, true);
                let xv = g.constant(x.clone());
                let mut d = rng::derive(0, Stream::Dropout, 0);
                let out = s.forward(&mut g, xv, &[0, 1], Some(&mut d)).unwrap();
                assert_eq!(g.shape(out), &[2, 3, 16]);
                assert_eq!(s.bn_stats.len(), 2 * m.config.n_blocks);
            }
        }
    }
}

#[test]
fn convolution_and_projection_commute_with_shifts() {
    let m = model(ModelConfig { n_blocks: 3, ..ModelConfig::tiny(4, 6, 4, 3) }, 1);
    let (t, shift) = (120, 7);
    let mut r = rng::derive(9, Stream::Gradcheck, 0);
    let long = randn(&mut r, &[1, 6, t + shift]);
    let a = long.slice_time(0, t).unwrap();
    let b = long.slice_time(shift, t + shift).unwrap();
    let stage = |x: &Tensor| {
        run(&m, x, false, |s, g, x| {
            let h = s.conv_sequence(g, x)?;
            s.final_projection(g, h)
        })
    };
    let (ya, yb) = (stage(&a), stage(&b));
    let band = receptive_field(3) / 2;
    for f in 0..3 {
        for k in band + shift..t - band {
            assert!((ya.at(&[0, f, k]) - yb.at(&[0, f, k - shift])).abs() < 1e-6);
        }
    }
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    for seed in 0..2 {
        let r = gradcheck::model_check(gradcheck::model_check_config(), seed, 3).unwrap();
        assert!(r.passed(1e-3), "{r:?}");
    }
    // block 0 with a projected skip connection and a unidirectional rnn
    let cfg = ModelConfig {
        d1: 6,
        rnn_mode: RnnMode::Unidirectional,
        subject_mode: SubjectMode::SubjectLayer,
        ..gradcheck::model_check_config()
    };
    let r = gradcheck::model_check(cfg, 3, 3).unwrap();
    assert!(r.passed(1e-3), "{r:?}");
}

#[test]
fn restoring_checks_names_and_shapes() {
    let m = model(ModelConfig::tiny(4, 6, 4, 3), 2);
    let back = Model::from_parts(
        m.config.clone(),
        m.subjects.clone(),
        m.layout.clone(),
        m.params.clone(),
        m.buffers.clone(),
    )
    .unwrap();
    assert_eq!(back, m);

    let mut params = m.params.clone();
    params.insert("proj.conv2.b", Tensor::zeros([7]));
    params.insert("bogus", Tensor::zeros([1]));
    let err = Model::from_parts(m.config.clone(), m.subjects.clone(), m.layout.clone(), params, m.buffers.clone())
        .unwrap_err()
        .to_string();
    assert!(err.contains("proj.conv2.b") && err.contains("bogus"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spatial_weights_form_distributions(seed in 0u64..500, c in 1usize..9) {
        let cfg = ModelConfig {
            spatial_mode: SpatialMode::PerSubject,
            ..ModelConfig::tiny(c, 5, 4, 2)
        };
        let m = Model::new(cfg, subjects(3), layout(c, seed), seed).unwrap();
        for s in 0..3 {
            let w = m.spatial_weights(s).unwrap();
            for o in 0..5 {
                let row = w.row(o);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
