use super::*;

fn cfg(depth: usize, width: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        arch: Arch::Toynet,
        n_classes: 2,
        width,
        depth,
        seed,
    }
}

fn input(b: usize, h: usize, w: usize, salt: f32) -> Tensor4 {
    let n = b * 3 * h * w;
    Tensor4::from_vec(
        [b, 3, h, w],
        (0..n).map(|i| (i as f32 * 0.731 + salt).sin()).collect(),
    )
    .unwrap()
}

#[test]
fn toynet_output_shape_matches_input() {
    let (params, net) = build(&cfg(3, 8, 1)).unwrap();
    let logits = net.forward(&params, &input(1, 64, 64, 0.0)).unwrap();
    assert_eq!(logits.shape(), [1, 2, 64, 64]);
}

#[test]
fn same_seed_gives_identical_params() {
    let (a, _) = build(&cfg(3, 8, 5)).unwrap();
    let (b, _) = build(&cfg(3, 8, 5)).unwrap();
    let (c, _) = build(&cfg(3, 8, 6)).unwrap();
    assert!(a.bit_identical(&b));
    assert!(!a.bit_identical(&c));
}

#[test]
fn indivisible_input_is_a_shape_error() {
    let (params, net) = build(&cfg(3, 8, 1)).unwrap();
    let err = net.forward(&params, &input(1, 60, 60, 0.0)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        ModelConfig { n_classes: 1, ..cfg(2, 8, 0) },
        ModelConfig { width: 3, ..cfg(2, 8, 0) },
        ModelConfig { depth: 0, ..cfg(2, 8, 0) },
    ] {
        assert!(build(&bad).is_err());
    }
    let unetpp = ModelConfig { arch: Arch::Unetpp, ..cfg(2, 8, 0) };
    assert!(matches!(build(&unetpp), Err(Error::Unsupported(_))));
}

#[test]
fn probabilities_sum_to_one() {
    let (params, net) = build(&cfg(2, 4, 3)).unwrap();
    let probs = predict_probs(net.as_ref(), &params, &input(2, 16, 16, 1.0)).unwrap();
    for b in 0..2 {
        for p in 0..probs.plane() {
            let s: f64 = probs.pixel(b, p).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn equal_logits_give_uniform_probabilities() {
    let logits = LogitMap::new([1, 3, 2, 2], vec![0.7; 12]).unwrap();
    let probs = softmax_map(&logits);
    for &v in probs.values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    // Reference: exp(x_c) / sum_k exp(x_k) evaluated without max-shifting.
    let vals: Vec<f64> = (0..2 * 2 * 5 * 3).map(|i| ((i as f64) * 1.37).sin() * 4.0).collect();
    let logits = LogitMap::new([2, 2, 5, 3], vals.clone()).unwrap();
    let probs = softmax_map(&logits);
    for b in 0..2 {
        for p in 0..15 {
            let e: Vec<f64> = (0..2).map(|c| vals[(b * 2 + c) * 15 + p].exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                let got = probs.values()[(b * 2 + c) * 15 + p];
                assert!((got - e[c] / z).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let (params, net) = build(&cfg(2, 4, 9)).unwrap();
    let x = input(2, 8, 8, 2.0);
    let a = net.forward(&params, &x).unwrap();
    let b = net.forward(&params, &x).unwrap();
    assert_eq!(
        a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn non_finite_activation_names_the_layer() {
    let (mut params, net) = build(&cfg(1, 4, 0)).unwrap();
    params.values_mut(0)[0] = f32::NAN;
    match net.forward(&params, &input(1, 4, 4, 0.0)) {
        Err(Error::Numerical { layer }) => assert_eq!(layer, "enc0.conv_a"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (params, _) = build(&cfg(2, 4, 11)).unwrap();
    let ck = ModelCheckpoint {
        model: cfg(2, 4, 11),
        normalization: Normalization { mean: [1.0, 2.0, 3.0], std: [4.0, 5.0, 6.5] },
        params,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert!(back.params.bit_identical(&ck.params));
    assert_eq!(back.model, ck.model);
    assert_eq!(back.normalization, ck.normalization);
    assert_eq!(back.id(), ck.id());
}

/// Backprop against finite differences of the scalar `sum(r ⊙ logits)`.
#[test]
fn backward_matches_finite_differences() {
    let (mut params, net) = build(&cfg(1, 4, 21)).unwrap();
    // Non-zero biases so ReLUs are not all at their kinks.
    for t in params.tensors_mut() {
        if t.name.ends_with(".bias") {
            for (i, v) in t.values.iter_mut().enumerate() {
                *v = 0.05 * ((i % 3) as f32 - 1.0);
            }
        }
    }
    let x = input(2, 4, 4, 0.3);
    let (logits, tape) = net.forward_train(&params, &x).unwrap();
    let r: Vec<f64> = (0..logits.values().len()).map(|i| ((i as f64) * 0.917).cos()).collect();
    let objective = |p: &ModelParams| -> f64 {
        let l = net.forward(p, &x).unwrap();
        l.values().iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let mut grads = params.zeros_like();
    net.backward(&params, &tape, &r, &mut grads).unwrap();

    let h = 3e-3f32;
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        for vi in (0..params.values(ti).len()).step_by(7) {
            let orig = params.values(ti)[vi];
            params.values_mut(ti)[vi] = orig + h;
            let up = objective(&params);
            params.values_mut(ti)[vi] = orig - h;
            let down = objective(&params);
            params.values_mut(ti)[vi] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grads.values(ti)[vi] as f64;
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            worst = worst.max(err);
        }
    }
    assert!(worst < 2e-2, "worst relative error {worst}");
}

#[test]
fn predict_image_handles_indivisible_sizes() {
    let (params, net) = build(&cfg(2, 4, 8)).unwrap();
    let norm = Normalization::default();
    let img = RgbImage::from_fn(13, 10, |x, y| image::Rgb([(x * 9) as u8, (y * 13) as u8, 77]));
    let p = predict_image(net.as_ref(), &params, &norm, &img).unwrap();
    assert_eq!(p.shape(), [1, 2, 10, 13]);
    for i in 0..130 {
        assert!((p.values()[i] + p.values()[130 + i] - 1.0).abs() < 1e-12);
    }
    let sq = RgbImage::from_fn(12, 8, |x, y| image::Rgb([(x * 9) as u8, (y * 13) as u8, 77]));
    let direct = predict_probs(net.as_ref(), &params, &norm.to_tensor(&[&sq]).unwrap()).unwrap();
    assert_eq!(predict_image(net.as_ref(), &params, &norm, &sq).unwrap(), direct);
}
