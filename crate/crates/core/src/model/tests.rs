use super::*;
use crate::rng;

fn identity_model(dim: usize, classes: usize) -> ModelBundle {
    ModelBundle::new(
        ModelArch { extractor: ExtractorSpec::Identity { dim }, classifier_bias: true },
        classes,
        0,
    )
    .unwrap()
}

#[test]
fn identity_extractor_passes_input_through() {
    let m = identity_model(2, 3);
    let batch = ndarray::arr2(&[[1.0, 2.0]]).into_dyn();
    let feats = m.forward_features(&batch).unwrap();
    assert_eq!(feats, ndarray::arr2(&[[1.0, 2.0]]));
}

#[test]
fn zero_weight_linear_extractor_gives_zero_features() {
    let mut m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Linear { in_dim: 3, out_dim: 2 },
            classifier_bias: true,
        },
        2,
        1,
    )
    .unwrap();
    m.params.insert("ext.fc.w".into(), ndarray::Array2::<f64>::zeros((2, 3)).into_dyn());
    m.params.insert("ext.fc.b".into(), ndarray::Array1::<f64>::zeros(2).into_dyn());
    let batch = ndarray::arr2(&[[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).into_dyn();
    let feats = m.forward_features(&batch).unwrap();
    assert!(feats.iter().all(|&v| v == 0.0));
}

#[test]
fn two_layer_extractor_matches_hand_composition() {
    let m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Mlp {
                in_dim: 3,
                hidden: vec![4],
                out_dim: 2,
                batch_norm: false,
            },
            classifier_bias: true,
        },
        2,
        7,
    )
    .unwrap();
    let x = ndarray::arr1(&[0.3, -1.2, 0.7]);
    let feats = m.forward_features(&x.clone().insert_axis(ndarray::Axis(0)).into_dyn()).unwrap();

    // independent composition: relu(W0 x + b0), then W_out h + b_out
    let w0 = m.params["ext.fc0.w"].clone().into_dimensionality::<Ix2>().unwrap();
    let b0 = &m.params["ext.fc0.b"];
    let wo = m.params["ext.out.w"].clone().into_dimensionality::<Ix2>().unwrap();
    let bo = &m.params["ext.out.b"];
    let mut h = ndarray::Array1::<f64>::zeros(4);
    for j in 0..4 {
        let pre: f64 = (0..3).map(|k| w0[[j, k]] * x[k]).sum::<f64>() + b0[[j]];
        h[j] = pre.max(0.0);
    }
    for j in 0..2 {
        let expect: f64 = (0..4).map(|k| wo[[j, k]] * h[k]).sum::<f64>() + bo[[j]];
        assert!((feats[[0, j]] - expect).abs() < 1e-12);
    }
}

#[test]
fn logits_with_identity_weights_and_matvec_oracle() {
    let mut m = identity_model(2, 2);
    m.params.insert("classifier.w".into(), ndarray::Array2::<f64>::eye(2).into_dyn());
    m.params.insert("classifier.b".into(), ndarray::Array1::<f64>::zeros(2).into_dyn());
    let logits = m.forward_logits(&ndarray::arr2(&[[1.0, 0.0]]).into_dyn()).unwrap();
    assert_eq!(logits, ndarray::arr2(&[[1.0, 0.0]]));

    m.params.insert("classifier.w".into(), ndarray::Array2::<f64>::zeros((2, 2)).into_dyn());
    let logits = m.forward_logits(&ndarray::arr2(&[[3.0, -4.0]]).into_dyn()).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));

    // random W against an independent matrix-vector product
    let mut r = rng::stream(5, &["model-test"]);
    let w = rng::normal_array(&mut r, &[2, 2]).into_dimensionality::<Ix2>().unwrap();
    m.params.insert("classifier.w".into(), w.clone().into_dyn());
    let z = ndarray::arr1(&[0.8, -0.6]);
    let logits =
        m.forward_logits(&z.clone().insert_axis(ndarray::Axis(0)).into_dyn()).unwrap();
    for j in 0..2 {
        let expect: f64 = (0..2).map(|k| w[[j, k]] * z[k]).sum();
        assert!((logits[[0, j]] - expect).abs() < 1e-12);
    }
}

#[test]
fn forward_rejects_shape_mismatch() {
    let m = identity_model(2, 2);
    let bad = ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn();
    assert!(matches!(m.forward_features(&bad), Err(CoreError::ShapeMismatch(_))));
}

#[test]
fn expand_classifier_preserves_old_rows_bitwise() {
    let m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Identity { dim: 4 },
            classifier_bias: true,
        },
        5,
        3,
    )
    .unwrap();
    let expanded = m.expand_classifier(5, 11).unwrap();
    assert_eq!(expanded.class_count(), 10);
    let old_w = m.classifier_weights();
    let new_w = expanded.classifier_weights();
    assert_eq!(new_w.nrows(), 10);
    for i in 0..5 {
        for j in 0..4 {
            assert_eq!(old_w[[i, j]].to_bits(), new_w[[i, j]].to_bits());
        }
    }

    // old-class logits unchanged by expansion, for a random probe batch
    let mut r = rng::stream(9, &["model-test"]);
    let probe = rng::normal_array(&mut r, &[6, 4]);
    let before = m.forward_logits(&probe).unwrap();
    let after = expanded.forward_logits(&probe).unwrap();
    for i in 0..6 {
        for j in 0..5 {
            assert_eq!(before[[i, j]].to_bits(), after[[i, j]].to_bits());
        }
    }
}

#[test]
fn expand_classifier_rejects_zero_and_is_seed_deterministic() {
    let m = identity_model(4, 5);
    assert!(m.expand_classifier(0, 1).is_err());
    let a = m.expand_classifier(3, 42).unwrap();
    let b = m.expand_classifier(3, 42).unwrap();
    assert_eq!(a.params["classifier.w"], b.params["classifier.w"]);
    let c = m.expand_classifier(3, 43).unwrap();
    assert_ne!(a.params["classifier.w"], c.params["classifier.w"]);
}

fn single_bn_model() -> ModelBundle {
    let mut m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Mlp {
                in_dim: 1,
                hidden: vec![1],
                out_dim: 1,
                batch_norm: true,
            },
            classifier_bias: true,
        },
        2,
        0,
    )
    .unwrap();
    // make the BN input equal to the raw input
    m.params.insert("ext.fc0.w".into(), ndarray::arr2(&[[1.0]]).into_dyn());
    m.params.insert("ext.fc0.b".into(), ndarray::arr1(&[0.0]).into_dyn());
    m
}

#[test]
fn capture_bn_stats_identical_batch_has_zero_variance() {
    let m = single_bn_model();
    let batch = ndarray::arr2(&[[0.7], [0.7], [0.7]]).into_dyn();
    let stats = capture_bn_batch_stats(&m, &batch).unwrap();
    assert_eq!(stats.len(), 1);
    assert!((stats[0].0[0] - 0.7).abs() < 1e-12);
    assert!(stats[0].1[0].abs() < 1e-18, "variance {} should vanish", stats[0].1[0]);
}

#[test]
fn capture_bn_stats_hand_computed_moments() {
    let m = single_bn_model();
    let batch = ndarray::arr2(&[[-1.0], [1.0]]).into_dyn();
    let stats = capture_bn_batch_stats(&m, &batch).unwrap();
    assert!((stats[0].0[0]).abs() < 1e-12, "mean of {{-1,+1}} is 0");
    assert!((stats[0].1[0] - 1.0).abs() < 1e-12, "population variance of {{-1,+1}} is 1");
}

#[test]
fn capture_bn_stats_errors() {
    let m = single_bn_model();
    let one = ndarray::arr2(&[[1.0]]).into_dyn();
    assert!(matches!(capture_bn_batch_stats(&m, &one), Err(CoreError::BatchTooSmall(1, _))));

    let no_bn = identity_model(2, 2);
    let batch = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
    assert!(capture_bn_batch_stats(&no_bn, &batch).is_err());
}

#[test]
fn capture_list_length_matches_bn_layer_count() {
    let m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Conv {
                in_shape: [1, 8, 8],
                channels: vec![4, 8],
                feature_dim: 6,
                residual: false,
            },
            classifier_bias: true,
        },
        3,
        2,
    )
    .unwrap();
    let mut r = rng::stream(1, &["model-test"]);
    let batch = rng::normal_array(&mut r, &[4, 1, 8, 8]);
    let stats = capture_bn_batch_stats(&m, &batch).unwrap();
    assert_eq!(stats.len(), m.arch.extractor.bn_layer_names().len());
    assert_eq!(stats.len(), 2);
}

#[test]
fn conv_backbone_shapes_and_determinism() {
    for residual in [false, true] {
        let m = ModelBundle::new(
            ModelArch {
                extractor: ExtractorSpec::Conv {
                    in_shape: [1, 16, 16],
                    channels: vec![4, 8],
                    feature_dim: 12,
                    residual,
                },
                classifier_bias: true,
            },
            5,
            7,
        )
        .unwrap();
        let mut r = rng::stream(2, &["model-test"]);
        let batch = rng::normal_array(&mut r, &[3, 1, 16, 16]);
        let f1 = m.forward_features(&batch).unwrap();
        let f2 = m.forward_features(&batch).unwrap();
        assert_eq!(f1.shape(), &[3, 12]);
        assert_eq!(f1, f2, "eval forward must be deterministic");
        let logits = m.forward_logits(&batch).unwrap();
        assert_eq!(logits.shape(), &[3, 5]);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn frozen_forward_never_touches_running_stats() {
    let m = ModelBundle::new(
        ModelArch {
            extractor: ExtractorSpec::Conv {
                in_shape: [1, 8, 8],
                channels: vec![4],
                feature_dim: 4,
                residual: false,
            },
            classifier_bias: true,
        },
        2,
        3,
    )
    .unwrap();
    let before = m.bn_stats();
    let mut r = rng::stream(3, &["model-test"]);
    for _ in 0..3 {
        let batch = rng::normal_array(&mut r, &[4, 1, 8, 8]);
        m.forward_logits(&batch).unwrap();
        capture_bn_batch_stats(&m, &batch).unwrap();
    }
    let after = m.bn_stats();
    for ((m0, v0), (m1, v1)) in before.iter().zip(after.iter()) {
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }
}

#[test]
fn generator_output_shape_and_range() {
    let g = GeneratorBundle::new(
        GeneratorSpec::ConvImage { noise_dim: 16, base_channels: 16, out_shape: [1, 16, 16] },
        4,
    )
    .unwrap();
    let mut r = rng::stream(4, &["model-test"]);
    let out = g.sample(5, &mut r).unwrap();
    assert_eq!(out.shape(), &[5, 1, 16, 16]);
    assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)), "tanh output must lie in [-1,1]");

    let gv = GeneratorBundle::new(
        GeneratorSpec::MlpVec { noise_dim: 8, hidden: vec![16], out_dim: 6 },
        4,
    )
    .unwrap();
    let out = gv.sample(3, &mut r).unwrap();
    assert_eq!(out.shape(), &[3, 6]);
}

#[test]
fn generator_rejects_bad_output_shape() {
    let r = GeneratorBundle::new(
        GeneratorSpec::ConvImage { noise_dim: 8, base_channels: 8, out_shape: [1, 10, 10] },
        0,
    );
    assert!(r.is_err(), "10x10 is not divisible by 4");
}

#[test]
fn generator_sampling_is_seed_deterministic() {
    let g = GeneratorBundle::new(
        GeneratorSpec::MlpVec { noise_dim: 4, hidden: vec![8], out_dim: 3 },
        9,
    )
    .unwrap();
    let mut r1 = rng::stream(10, &["gen"]);
    let mut r2 = rng::stream(10, &["gen"]);
    assert_eq!(g.sample(4, &mut r1).unwrap(), g.sample(4, &mut r2).unwrap());
}
