use super::*;
use crate::numcore::RngStream;

fn rng(seed: u64) -> RngStream {
    RngStream::new(seed)
}

fn layer(spec: LayerSpec, seed: u64) -> Layer<f64> {
    let mut l = Layer::new("l", spec, &mut rng(seed)).unwrap();
    // Perturb the deterministic initial values so every parameter matters.
    let mut r = rng(seed + 100);
    for p in l.params_mut() {
        if p.trainable {
            for v in p.value.data_mut() {
                *v += 0.3 * r.normal();
            }
        }
    }
    l
}

/// loss = Σ y ⊙ w for a fixed random `w`.
fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check_layer(spec: LayerSpec, shape: &[usize], mode: Mode) {
    let mut l = layer(spec.clone(), 7);
    let x = Tensor::<f64>::randn(shape.to_vec(), &mut rng(3));
    let probe_y = l.infer(&x).unwrap();
    let w = Tensor::<f64>::randn(probe_y.shape().to_vec(), &mut rng(4));

    // Parameter gradients.
    let report = grad_check(
        &mut l,
        |l: &mut Layer<f64>, with_grad| {
            let (y, saved) = l.forward(&x, mode)?;
            if with_grad {
                l.backward(saved, &w)?;
            }
            Ok(weighted_sum(&y, &w))
        },
        GradCheckConfig {
            h: 1e-5,
            max_elems_per_param: 40,
        },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-5, "{spec:?}: {report:?}");

    // Input gradient.
    let (_, saved) = l.forward(&x, mode).unwrap();
    let dx = l.backward(saved, &w).unwrap();
    assert_eq!(dx.shape(), x.shape());
    let h = 1e-5;
    let floor = 1e-4 * dx.max_abs() + 1e-12;
    let n = x.len();
    for j in 0..n.min(60) {
        let idx = j * n / n.min(60);
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        let fp = weighted_sum(&l.forward(&xp, mode).unwrap().0, &w);
        let fm = weighted_sum(&l.forward(&xm, mode).unwrap().0, &w);
        let num = (fp - fm) / (2.0 * h);
        let a = dx.data()[idx];
        let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        assert!(err < 1e-5, "{spec:?} input[{idx}]: analytic {a} numeric {num}");
    }
}

#[test]
fn fd_conv1d() {
    check_layer(
        LayerSpec::Conv1d {
            in_channels: 2,
            out_channels: 3,
            kernel: 5,
            stride: 2,
            dilation: 1,
            padding: 0,
            bias: true,
        },
        &[2, 2, 23],
        Mode::Train,
    );
    check_layer(
        LayerSpec::Conv1d {
            in_channels: 3,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            dilation: 2,
            padding: 2,
            bias: false,
        },
        &[1, 3, 11],
        Mode::Train,
    );
}

#[test]
fn fd_transposed_conv1d() {
    check_layer(
        LayerSpec::TransposedConv1d {
            in_channels: 3,
            out_channels: 2,
            kernel: 5,
            stride: 2,
            bias: true,
        },
        &[2, 3, 7],
        Mode::Train,
    );
}

#[test]
fn fd_depthwise() {
    check_layer(
        LayerSpec::DepthwiseDilatedConv1d {
            channels: 3,
            kernel: 3,
            dilation: 4,
            bias: true,
        },
        &[2, 3, 13],
        Mode::Train,
    );
}

#[test]
fn fd_pointwise_and_dense() {
    check_layer(
        LayerSpec::PointwiseConv1d {
            in_channels: 4,
            out_channels: 3,
            bias: true,
        },
        &[2, 4, 6],
        Mode::Train,
    );
    check_layer(
        LayerSpec::Dense {
            in_features: 5,
            out_features: 3,
            bias: true,
        },
        &[2, 4, 5],
        Mode::Train,
    );
}

#[test]
fn fd_activations() {
    check_layer(LayerSpec::Relu, &[2, 3, 9], Mode::Train);
    check_layer(LayerSpec::Prelu { num_parameters: 1 }, &[2, 3, 9], Mode::Train);
    check_layer(LayerSpec::Prelu { num_parameters: 3 }, &[2, 3, 9], Mode::Train);
    check_layer(LayerSpec::SoftmaxOverSources { sources: 3 }, &[2, 6, 5], Mode::Train);
}

#[test]
fn fd_norms() {
    check_layer(LayerSpec::GlobalLayerNorm { channels: 3 }, &[2, 3, 8], Mode::Train);
    check_layer(LayerSpec::BatchNorm1d { channels: 3 }, &[3, 3, 6], Mode::Train);
    check_layer(LayerSpec::BatchNorm1d { channels: 3 }, &[3, 3, 6], Mode::Eval);
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut l = Layer::<f64>::new(
        "id",
        LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            dilation: 1,
            padding: 1,
            bias: false,
        },
        &mut rng(0),
    )
    .unwrap();
    l.param_mut("weight").unwrap().value = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let x = Tensor::new(vec![1, 1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
    assert_eq!(l.infer(&x).unwrap(), x);
}

#[test]
fn relu_example() {
    let l = Layer::<f64>::new("r", LayerSpec::Relu, &mut rng(0)).unwrap();
    let x = Tensor::new(vec![1, 1, 4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
    assert_eq!(l.infer(&x).unwrap().data(), &[0.0, 0.0, 2.0, 0.0]);
}

#[test]
fn transposed_conv_output_length() {
    let l = Layer::<f32>::new(
        "dec",
        LayerSpec::TransposedConv1d {
            in_channels: 32,
            out_channels: 1,
            kernel: 21,
            stride: 10,
            bias: false,
        },
        &mut rng(0),
    )
    .unwrap();
    let y = l.infer(&Tensor::zeros([1, 32, 100])).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1011]);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let mut l = Layer::<f64>::new(
        "d",
        LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
            bias: false,
        },
        &mut rng(0),
    )
    .unwrap();
    let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let g = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
    let (_, saved) = l.forward(&x, Mode::Train).unwrap();
    l.backward(saved, &g).unwrap();
    assert_eq!(
        l.param("weight").unwrap().grad.data(),
        &[0.5, 1.0, 1.5, -1.0, -2.0, -3.0]
    );
}

#[test]
fn backward_is_linear_in_upstream() {
    let spec = LayerSpec::Conv1d {
        in_channels: 2,
        out_channels: 2,
        kernel: 3,
        stride: 1,
        dilation: 1,
        padding: 1,
        bias: true,
    };
    let mut l = layer(spec, 1);
    let x = Tensor::<f64>::randn([1, 2, 9], &mut rng(2));
    let g1 = Tensor::<f64>::randn([1, 2, 9], &mut rng(3));
    let g2 = Tensor::<f64>::randn([1, 2, 9], &mut rng(4));
    let run = |l: &mut Layer<f64>, g: &Tensor<f64>| {
        let (_, s) = l.forward(&x, Mode::Train).unwrap();
        l.backward(s, g).unwrap()
    };
    let a = run(&mut l, &g1);
    let b = run(&mut l, &g2);
    let sum = run(&mut l, &g1.scale(2.0).add(&g2.scale(-3.0)).unwrap());
    let expect = a.scale(2.0).add(&b.scale(-3.0)).unwrap();
    assert!(crate::numcore::rel_err(&sum, &expect) < 1e-12);
}

#[test]
fn softmax_sums_to_one() {
    let l = Layer::<f32>::new("s", LayerSpec::SoftmaxOverSources { sources: 2 }, &mut rng(0)).unwrap();
    let x = Tensor::<f32>::randn([2, 8, 7], &mut rng(5)).scale(10.0);
    let y = l.infer(&x).unwrap();
    for b in 0..2 {
        let yb = y.slab(b);
        for j in 0..4 * 7 {
            let s = yb[j] + yb[28 + j];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn batch_norm_eval_is_affine_and_train_updates_running_stats() {
    let mut l = layer(LayerSpec::BatchNorm1d { channels: 2 }, 3);
    let x = Tensor::<f64>::randn([4, 2, 5], &mut rng(6)).map(|v| 3.0 * v + 1.0);
    l.forward(&x, Mode::Train).unwrap();
    assert!(l.param("running_mean").unwrap().value.max_abs() > 0.0);
    let f = |v: f64| {
        let t = Tensor::full([1, 2, 1], v);
        l.infer(&t).unwrap().data()[0]
    };
    let (a, b, c) = (f(0.0), f(1.0), f(2.0));
    assert!(((c - b) - (b - a)).abs() < 1e-12);
}

#[test]
fn backward_without_forward_is_usage_error() {
    let mut l = Layer::<f64>::new("r", LayerSpec::Relu, &mut rng(0)).unwrap();
    let err = l.backward(Saved::default(), &Tensor::zeros([1, 1, 1])).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn shape_mismatch_names_layer() {
    let l = Layer::<f64>::new(
        "enc",
        LayerSpec::PointwiseConv1d {
            in_channels: 4,
            out_channels: 2,
            bias: false,
        },
        &mut rng(0),
    )
    .unwrap();
    let err = l.infer(&Tensor::zeros([1, 3, 5])).unwrap_err();
    match err {
        Error::LayerShape { layer, got, .. } => {
            assert_eq!(layer, "enc");
            assert_eq!(got, vec![1, 3, 5]);
        }
        e => panic!("{e:?}"),
    }
}

struct Quad {
    w: Parameter<f64>,
}

impl ParamStore<f64> for Quad {
    fn params(&self) -> Vec<&Parameter<f64>> {
        vec![&self.w]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.w]
    }
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut q = Quad {
        w: Parameter::new("w", Tensor::full([3], 1.5)),
    };
    let mut opt = AdamState::new(1e-3);
    opt.step(&mut q).unwrap();
    assert_eq!(q.w.value.data(), &[1.5; 3]);
}

#[test]
fn adam_first_step_moves_by_lr_against_sign() {
    let mut q = Quad {
        w: Parameter::new("w", Tensor::zeros([3])),
    };
    q.w.grad = Tensor::new(vec![3], vec![4.0, -0.01, 100.0]).unwrap();
    let mut opt = AdamState::new(0.01);
    opt.step(&mut q).unwrap();
    for (w, s) in q.w.value.data().iter().zip([-1.0, 1.0, -1.0]) {
        assert!((w - s * 0.01).abs() < 1e-6, "{w}");
    }
    assert_eq!(q.w.grad.max_abs(), 0.0);
}

#[test]
fn adam_minimizes_quadratic() {
    let mut q = Quad {
        w: Parameter::new("w", Tensor::zeros([1])),
    };
    let mut opt = AdamState::new(0.1);
    for _ in 0..100 {
        let w = q.w.value.data()[0];
        q.w.grad.data_mut()[0] = 2.0 * (w - 3.0);
        opt.step(&mut q).unwrap();
    }
    assert!((q.w.value.data()[0] - 3.0).abs() < 0.05, "{:?}", q.w.value);
}

#[test]
fn adam_leaves_frozen_parameters_and_rejects_nan() {
    let mut q = Quad {
        w: Parameter::frozen("w", Tensor::full([2], 1.0)),
    };
    q.w.grad.fill(1.0);
    let mut opt = AdamState::new(0.1);
    opt.step(&mut q).unwrap();
    assert_eq!(q.w.value.data(), &[1.0, 1.0]);

    q.w.trainable = true;
    q.w.grad.data_mut()[1] = f64::NAN;
    match opt.step(&mut q) {
        Err(Error::NanGradient(name)) => assert_eq!(name, "w"),
        r => panic!("{r:?}"),
    }
    assert_eq!(q.w.value.data(), &[1.0, 1.0]);
}

#[test]
fn clip_scales_to_threshold() {
    let mut q = Quad {
        w: Parameter::new("w", Tensor::zeros([2])),
    };
    q.w.grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    let n = clip_grad_norm(&mut q, 1.0);
    assert_eq!(n, 5.0);
    assert!((q.w.grad.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let spec = LayerSpec::Conv1d {
        in_channels: 1,
        out_channels: 32,
        kernel: 21,
        stride: 10,
        dilation: 1,
        padding: 0,
        bias: false,
    };
    let a = Layer::<f32>::new("e", spec.clone(), &mut rng(9)).unwrap();
    let b = Layer::<f32>::new("e", spec, &mut rng(9)).unwrap();
    let x = Tensor::<f32>::randn([2, 1, 800], &mut rng(1));
    let (ya, yb) = (a.infer(&x).unwrap(), b.infer(&x).unwrap());
    assert_eq!(
        ya.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        yb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck/model.json");
    let mut l = Layer::<f32>::new(
        "c",
        LayerSpec::Conv1d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            dilation: 1,
            padding: 0,
            bias: true,
        },
        &mut rng(1),
    )
    .unwrap();
    let mut opt = AdamState::new(1e-3);
    let x = Tensor::<f32>::randn([1, 2, 8], &mut rng(2));
    let (y, s) = l.forward(&x, Mode::Train).unwrap();
    l.backward(s, &y).unwrap();
    opt.step(&mut l).unwrap();

    let ck = Checkpoint::capture(&l, serde_json::json!({"kind": "test"}), Some(&opt), serde_json::Value::Null);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.blob(), ck.blob());
    assert_eq!(back.optimizer_state().unwrap(), opt);

    let mut fresh = Layer::<f32>::new("c", l.spec().clone(), &mut rng(99)).unwrap();
    back.restore_params(&mut fresh, Coverage::Exact).unwrap();
    for (a, b) in l.params().iter().zip(fresh.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }

    // A resaved checkpoint is byte-identical on disk.
    let path2 = dir.path().join("again.json");
    Checkpoint::capture(&fresh, serde_json::json!({"kind": "test"}), Some(&opt), serde_json::Value::Null)
        .save(&path2)
        .unwrap();
    assert_eq!(
        std::fs::read(path.with_extension("bin")).unwrap(),
        std::fs::read(path2.with_extension("bin")).unwrap()
    );
}

#[test]
fn checkpoint_rejects_tampering_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let l = Layer::<f64>::new(
        "d",
        LayerSpec::Dense {
            in_features: 3,
            out_features: 2,
            bias: true,
        },
        &mut rng(1),
    )
    .unwrap();
    Checkpoint::capture(&l, serde_json::Value::Null, None, serde_json::Value::Null)
        .save(&path)
        .unwrap();

    let mut other = Layer::<f64>::new(
        "d",
        LayerSpec::Dense {
            in_features: 4,
            out_features: 2,
            bias: true,
        },
        &mut rng(1),
    )
    .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert!(matches!(ck.restore_params(&mut other, Coverage::Exact), Err(Error::Checkpoint(_))));
    let mut renamed = Layer::<f64>::new("e", l.spec().clone(), &mut rng(1)).unwrap();
    assert!(ck.restore_params(&mut renamed, Coverage::CheckpointSubset).is_err());

    let mut blob = std::fs::read(path.with_extension("bin")).unwrap();
    blob[0] ^= 1;
    std::fs::write(path.with_extension("bin"), blob).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
}
