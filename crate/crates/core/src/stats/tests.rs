use super::*;
use crate::model::{ExtractorSpec, GeneratorSpec, ModelArch, ModelBundle};
use crate::rng;
use ndarray::arr1;

fn spd_cov(seed: u64, d: usize, scale: f64) -> Array2<f64> {
    let mut r = rng::stream(seed, &["spd"]);
    let a = rng::normal_array(&mut r, &[d, d]).into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut c = a.dot(&a.t()) / d as f64 * scale;
    for i in 0..d {
        c[[i, i]] += 0.25 * scale;
    }
    c
}

fn sample_gaussian(
    rng: &mut rng::Stream,
    mean: &Array1<f64>,
    chol: &Array2<f64>,
    n: usize,
) -> Array2<f64> {
    let d = mean.len();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let xi = Array1::from_iter(
            (0..d).map(|_| rand::Rng::sample::<f64, _>(rng, rand_distr::StandardNormal)),
        );
        out.row_mut(i).assign(&(mean + &chol.dot(&xi)));
    }
    out
}

// ---------------------------------------------------------------------------
// estimation
// ---------------------------------------------------------------------------

#[test]
fn single_point_classes_give_zero_covariance() {
    let mut by_class = BTreeMap::new();
    by_class.insert(0, ndarray::arr2(&[[1.0, -2.0]]));
    by_class.insert(1, ndarray::arr2(&[[3.0, 4.0]]));
    let s = estimate_class_stats(&by_class).unwrap();
    assert_eq!(s.means[&0], arr1(&[1.0, -2.0]));
    assert_eq!(s.means[&1], arr1(&[3.0, 4.0]));
    assert!(s.tied_cov.iter().all(|&v| v == 0.0));
    assert_eq!(s.counts[&0], 1);
}

#[test]
fn two_class_hand_computed_example() {
    let mut by_class = BTreeMap::new();
    by_class.insert(0, ndarray::arr2(&[[0.0, 0.0], [2.0, 0.0]]));
    by_class.insert(1, ndarray::arr2(&[[0.0, 2.0], [2.0, 2.0]]));
    let s = estimate_class_stats(&by_class).unwrap();
    assert_eq!(s.means[&0], arr1(&[1.0, 0.0]));
    assert_eq!(s.means[&1], arr1(&[1.0, 2.0]));
    let expect = ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0]]);
    for (a, b) in s.tied_cov.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn estimator_recovers_known_gaussian_parameters() {
    let d = 4;
    let n = 5000;
    let cov = spd_cov(1, d, 1.0);
    let chol = cholesky(&cov).unwrap();
    let mut r = rng::stream(2, &["estimator-oracle"]);
    let mut by_class = BTreeMap::new();
    let mut true_means = BTreeMap::new();
    for k in 0..3usize {
        let mean = Array1::from_iter((0..d).map(|j| (k * d + j) as f64 * 0.5));
        by_class.insert(k, sample_gaussian(&mut r, &mean, &chol, n));
        true_means.insert(k, mean);
    }
    let s = estimate_class_stats(&by_class).unwrap();
    for k in 0..3usize {
        let err = (&s.means[&k] - &true_means[&k]).mapv(|x| x * x).sum().sqrt();
        assert!(err < 0.1, "class {k} mean error {err}");
    }
    let cov_err = (&s.tied_cov - &cov).mapv(|x| x * x).sum().sqrt();
    assert!(cov_err < 0.1, "covariance error {cov_err}");
}

#[test]
fn estimation_is_permutation_stable() {
    let mut r = rng::stream(3, &["perm"]);
    let z = rng::normal_array(&mut r, &[400, 6]).into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut by_class = BTreeMap::new();
    by_class.insert(0, z.clone());
    let s1 = estimate_class_stats(&by_class).unwrap();

    let perm = rng::permutation(&mut r, 400);
    let mut z2 = Array2::<f64>::zeros((400, 6));
    for (i, &pi) in perm.iter().enumerate() {
        z2.row_mut(i).assign(&z.row(pi));
    }
    by_class.insert(0, z2);
    let s2 = estimate_class_stats(&by_class).unwrap();

    let mean_gap = (&s1.means[&0] - &s2.means[&0]).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    let cov_gap = (&s1.tied_cov - &s2.tied_cov).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
    assert!(mean_gap < 1e-9, "mean permutation gap {mean_gap}");
    assert!(cov_gap < 1e-9, "cov permutation gap {cov_gap}");
}

#[test]
fn estimate_rejects_empty_and_mismatched_input() {
    assert!(estimate_class_stats(&BTreeMap::new()).is_err());
    let mut by_class = BTreeMap::new();
    by_class.insert(0, ndarray::arr2(&[[1.0, 2.0]]));
    by_class.insert(1, ndarray::arr2(&[[1.0, 2.0, 3.0]]));
    assert!(matches!(estimate_class_stats(&by_class), Err(CoreError::ShapeMismatch(_))));
    let mut with_empty = BTreeMap::new();
    with_empty.insert(0, Array2::<f64>::zeros((0, 2)));
    assert!(estimate_class_stats(&with_empty).is_err());
}

// ---------------------------------------------------------------------------
// batch statistics
// ---------------------------------------------------------------------------

#[test]
fn batch_stats_hand_cases() {
    let f = ndarray::arr2(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
    let b = batch_stats(&f, &[0, 0, 0]).unwrap();
    assert_eq!(b.batch_means[&0], arr1(&[1.0, 1.0]));
    assert!(b.batch_cov.iter().all(|&v| v == 0.0));

    let f = ndarray::arr2(&[[0.0, 0.0], [2.0, 0.0]]);
    let b = batch_stats(&f, &[0, 0]).unwrap();
    assert_eq!(b.batch_means[&0], arr1(&[1.0, 0.0]));
    let expect = ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0]]);
    for (a, e) in b.batch_cov.iter().zip(expect.iter()) {
        assert!((a - e).abs() < 1e-12);
    }

    // two classes, one point each: every point equals its class mean
    let f = ndarray::arr2(&[[5.0, -1.0], [-2.0, 3.0]]);
    let b = batch_stats(&f, &[0, 1]).unwrap();
    assert!(b.batch_cov.iter().all(|&v| v == 0.0));
}

#[test]
fn batch_stats_rejects_tiny_batches() {
    let f = ndarray::arr2(&[[1.0, 2.0]]);
    assert!(matches!(batch_stats(&f, &[0]), Err(CoreError::BatchTooSmall(1, _))));
}

// ---------------------------------------------------------------------------
// DCE loss
// ---------------------------------------------------------------------------

fn stored_stats(d: usize) -> ClassStatistics {
    let mut means = BTreeMap::new();
    means.insert(0, Array1::zeros(d));
    means.insert(1, Array1::from_elem(d, 1.0));
    let mut counts = BTreeMap::new();
    counts.insert(0, 10);
    counts.insert(1, 10);
    ClassStatistics { means, tied_cov: Array2::eye(d), counts, feature_dim: d }
}

#[test]
fn dce_zero_on_matching_statistics() {
    let stored = stored_stats(2);
    let batch = BatchStatistics {
        batch_means: stored.means.clone(),
        batch_cov: stored.tied_cov.clone(),
        counts: [(0, 2), (1, 2)].into_iter().collect(),
        batch_size: 4,
    };
    assert_eq!(dce_loss(&batch, &stored).unwrap(), 0.0);
}

#[test]
fn dce_hand_cases() {
    let stored = stored_stats(2);
    // one class, mean off by (0,1), covariance matching
    let batch = BatchStatistics {
        batch_means: [(0, arr1(&[0.0, 1.0]))].into_iter().collect(),
        batch_cov: Array2::eye(2),
        counts: [(0, 3)].into_iter().collect(),
        batch_size: 3,
    };
    assert!((dce_loss(&batch, &stored).unwrap() - 1.0).abs() < 1e-12);

    // mean matching, covariance zero vs identity: Frobenius of -I is sqrt(2)
    let batch = BatchStatistics {
        batch_means: [(0, Array1::zeros(2))].into_iter().collect(),
        batch_cov: Array2::zeros((2, 2)),
        counts: [(0, 3)].into_iter().collect(),
        batch_size: 3,
    };
    assert!((dce_loss(&batch, &stored).unwrap() - 2.0_f64.sqrt()).abs() < 1e-12);
}

#[test]
fn dce_rejects_unknown_class() {
    let stored = stored_stats(2);
    let batch = BatchStatistics {
        batch_means: [(7, Array1::zeros(2))].into_iter().collect(),
        batch_cov: Array2::zeros((2, 2)),
        counts: [(7, 2)].into_iter().collect(),
        batch_size: 2,
    };
    assert!(matches!(dce_loss(&batch, &stored), Err(CoreError::UnknownClass(7))));
}

#[test]
fn dce_value_and_graph_versions_agree() {
    let mut r = rng::stream(4, &["dce"]);
    let d = 3;
    let feats =
        rng::normal_array(&mut r, &[8, d]).into_dimensionality::<ndarray::Ix2>().unwrap();
    let labels = [0, 1, 0, 1, 0, 0, 1, 1];
    let stored = ClassStatistics {
        means: [(0, arr1(&[0.1, -0.2, 0.3])), (1, arr1(&[1.0, 0.5, -0.5]))]
            .into_iter()
            .collect(),
        tied_cov: spd_cov(5, d, 1.0),
        counts: [(0, 50), (1, 50)].into_iter().collect(),
        feature_dim: d,
    };
    let val = {
        let b = batch_stats(&feats, &labels).unwrap();
        dce_loss(&b, &stored).unwrap()
    };
    let tape = Tape::new();
    let f = tape.input(feats.into_dyn());
    let graph = dce_loss_var(&tape, &f, &labels, &stored).unwrap().scalar_value();
    assert!((val - graph).abs() < 1e-10, "value {val} vs graph {graph}");
}

#[test]
fn dce_is_nonnegative_on_random_batches() {
    let stored = stored_stats(4);
    let mut r = rng::stream(6, &["dce-prop"]);
    for _ in 0..50 {
        let feats = rng::normal_array(&mut r, &[6, 4])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let labels = [0, 1, 1, 0, 1, 0];
        let b = batch_stats(&feats, &labels).unwrap();
        assert!(dce_loss(&b, &stored).unwrap() >= 0.0);
    }
}

#[test]
fn dce_gradient_matches_finite_differences() {
    let d = 4;
    let stored = ClassStatistics {
        means: [(0, arr1(&[0.3, -0.1, 0.2, 0.0])), (1, arr1(&[1.0, 0.7, -0.4, 0.5]))]
            .into_iter()
            .collect(),
        tied_cov: spd_cov(7, d, 0.8),
        counts: [(0, 20), (1, 20)].into_iter().collect(),
        feature_dim: d,
    };
    let mut r = rng::stream(8, &["dce-grad"]);
    let feats = rng::normal_array(&mut r, &[6, d]);
    let labels = vec![0usize, 1, 0, 1, 1, 0];
    crate::tensor::tests::fd_check(
        &|t, v| dce_loss_var(t, &v[0], &labels, &stored).unwrap(),
        &[feats],
        1e-3,
    );
}

// ---------------------------------------------------------------------------
// mixture Monte-Carlo KL
// ---------------------------------------------------------------------------

fn single_component(mean: Array1<f64>, cov: Array2<f64>) -> ClassStatistics {
    let d = mean.len();
    ClassStatistics {
        means: [(0, mean)].into_iter().collect(),
        tied_cov: cov,
        counts: [(0, 100)].into_iter().collect(),
        feature_dim: d,
    }
}

#[test]
fn self_kl_is_near_zero() {
    let mut r = rng::stream(9, &["self-kl"]);
    let mut by_class = BTreeMap::new();
    for k in 0..3usize {
        let z = rng::normal_array(&mut r, &[200, 4])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            + k as f64;
        by_class.insert(k, z);
    }
    let s = estimate_class_stats(&by_class).unwrap();
    let kl = mixture_kl_mc(&s, &s, 20_000, 1).unwrap();
    assert!(kl.abs() <= 0.02, "self KL {kl}");
}

#[test]
fn single_component_matches_analytic_gaussian_kl() {
    let p = single_component(Array1::zeros(2), Array2::eye(2));
    let q = single_component(arr1(&[1.0, 0.0]), Array2::eye(2));
    let analytic = gaussian_kl_same_cov(&p.means[&0], &q.means[&0], &p.tied_cov);
    assert!((analytic - 0.5).abs() < 1e-9);
    let est = mixture_kl_mc(&p, &q, 100_000, 2).unwrap();
    assert!(
        (est - analytic).abs() / analytic < 0.02,
        "estimate {est} vs analytic {analytic}"
    );
}

#[test]
fn kl_grows_with_mean_separation() {
    let p = single_component(Array1::zeros(2), Array2::eye(2));
    let q1 = single_component(arr1(&[1.0, 0.0]), Array2::eye(2));
    let q2 = single_component(arr1(&[2.0, 0.0]), Array2::eye(2));
    let e1 = mixture_kl_mc(&p, &q1, 50_000, 3).unwrap();
    let e2 = mixture_kl_mc(&p, &q2, 50_000, 3).unwrap();
    assert!(e2 > e1, "KL must increase with separation: {e1} vs {e2}");
}

#[test]
fn mixture_kl_error_paths() {
    let p = single_component(Array1::zeros(2), Array2::eye(2));
    assert!(mixture_kl_mc(&p, &p, 0, 1).is_err());
    let bad = single_component(Array1::zeros(2), Array2::eye(2) * -1.0);
    assert!(matches!(
        mixture_kl_mc(&bad, &p, 10, 1),
        Err(CoreError::NotPositiveDefinite(_))
    ));
}

#[test]
fn mixture_kl_is_seed_deterministic() {
    let p = single_component(Array1::zeros(3), spd_cov(11, 3, 1.0));
    let q = single_component(arr1(&[0.5, 0.0, -0.5]), spd_cov(11, 3, 1.0));
    let a = mixture_kl_mc(&p, &q, 5000, 42).unwrap();
    let b = mixture_kl_mc(&p, &q, 5000, 42).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

// ---------------------------------------------------------------------------
// KDE
// ---------------------------------------------------------------------------

#[test]
fn kde_two_kernel_hand_computation() {
    let reference = ndarray::arr2(&[[-1.0], [1.0]]);
    let queries = ndarray::arr2(&[[0.0]]);
    let ld = kde_log_density(&reference, &queries).unwrap();

    // independent two-term Gaussian sum with Scott bandwidth
    let n = 2.0_f64;
    let sigma = 1.0; // population std of {-1, +1}
    let h = sigma * n.powf(-1.0 / 5.0);
    let kernel = |x: f64, xi: f64| {
        (-((x - xi) * (x - xi)) / (2.0 * h * h)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt())
    };
    let expect = (kernel(0.0, -1.0) + kernel(0.0, 1.0)) / 2.0;
    assert!((ld[0].exp() - expect).abs() < 1e-12, "kde {} vs hand {expect}", ld[0].exp());
}

#[test]
fn kde_density_integrates_to_one() {
    let reference = ndarray::arr2(&[[-1.0], [0.0], [2.0]]);
    let step = 0.01;
    let grid: Vec<f64> = (-1500..1500).map(|i| i as f64 * step).collect();
    let queries =
        Array2::from_shape_vec((grid.len(), 1), grid.clone()).unwrap();
    let ld = kde_log_density(&reference, &queries).unwrap();
    let mut integral = 0.0;
    for i in 1..grid.len() {
        integral += 0.5 * (ld[i - 1].exp() + ld[i].exp()) * step;
    }
    assert!((integral - 1.0).abs() < 1e-2, "integral {integral}");
}

#[test]
fn kde_symmetric_reference_gives_symmetric_density() {
    let reference = ndarray::arr2(&[[-2.0], [2.0]]);
    let queries = ndarray::arr2(&[[0.7], [-0.7], [1.3], [-1.3]]);
    let ld = kde_log_density(&reference, &queries).unwrap();
    assert!((ld[0] - ld[1]).abs() < 1e-12);
    assert!((ld[2] - ld[3]).abs() < 1e-12);
}

#[test]
fn kde_rejects_degenerate_reference() {
    let reference = ndarray::arr2(&[[3.0, 1.0], [3.0, 2.0]]);
    let queries = ndarray::arr2(&[[3.0, 1.5]]);
    assert!(matches!(
        kde_log_density(&reference, &queries),
        Err(CoreError::ZeroBandwidth(0))
    ));
}

#[test]
fn kde_kl_identical_sets_is_small() {
    let mut r = rng::stream(12, &["kde-kl"]);
    let z = rng::normal_array(&mut r, &[100, 2]).into_dimensionality::<ndarray::Ix2>().unwrap();
    let kl = kde_kl_mc(&z, &z.clone(), 5000, 7).unwrap();
    assert!(kl.abs() < 0.05, "identical-set KDE KL {kl}");
}

#[test]
fn kde_kl_separated_clusters_is_large() {
    let mut r = rng::stream(13, &["kde-kl"]);
    let a = rng::normal_array(&mut r, &[80, 1]).into_dimensionality::<ndarray::Ix2>().unwrap();
    let b = &a + 10.0;
    let kl = kde_kl_mc(&a, &b, 5000, 8).unwrap();
    assert!(kl > 1.0, "separated-cluster KDE KL {kl}");
}

// ---------------------------------------------------------------------------
// estimation-stage feature collection
// ---------------------------------------------------------------------------

fn identity_model(dim: usize, classes: usize, seed: u64) -> ModelBundle {
    ModelBundle::new(
        ModelArch { extractor: ExtractorSpec::Identity { dim }, classifier_bias: false },
        classes,
        seed,
    )
    .unwrap()
}

#[test]
fn first_task_collects_exactly_the_real_features() {
    let model = identity_model(3, 2, 0);
    let mut r = rng::stream(14, &["collect"]);
    let inputs = rng::normal_array(&mut r, &[100, 3]);
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let by_class =
        collect_estimation_features(&model, &inputs, &labels, None, 0, 2, 16, 1).unwrap();
    let total: usize = by_class.values().map(|m| m.nrows()).sum();
    assert_eq!(total, 100);
    assert_eq!(by_class.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn generated_count_tracks_the_class_ratio() {
    let d = 3;
    let batch = 16;
    for (old_classes, new_classes, n_real) in [(2usize, 2usize, 50usize), (8, 2, 50)] {
        let total_classes = old_classes + new_classes;
        let model = identity_model(d, total_classes, 0);
        let old_model = identity_model(d, old_classes, 1);
        let generator = crate::model::GeneratorBundle::new(
            GeneratorSpec::MlpVec { noise_dim: 4, hidden: vec![8], out_dim: d },
            2,
        )
        .unwrap();
        let mut r = rng::stream(15, &["collect"]);
        let inputs = rng::normal_array(&mut r, &[n_real, d]);
        // real data belongs to the new classes
        let labels: Vec<usize> =
            (0..n_real).map(|i| old_classes + (i % new_classes)).collect();
        let by_class = collect_estimation_features(
            &model,
            &inputs,
            &labels,
            Some((&old_model, &generator)),
            old_classes,
            new_classes,
            batch,
            3,
        )
        .unwrap();
        let generated: usize = by_class
            .iter()
            .filter(|(k, _)| **k < old_classes)
            .map(|(_, m)| m.nrows())
            .sum();
        let target = old_classes / new_classes * n_real;
        assert!(
            generated >= target && generated < target + batch,
            "generated {generated} for target {target}"
        );
        let real: usize = by_class
            .iter()
            .filter(|(k, _)| **k >= old_classes)
            .map(|(_, m)| m.nrows())
            .sum();
        assert_eq!(real, n_real);
    }
}

#[test]
fn collect_requires_generator_when_old_classes_exist() {
    let model = identity_model(2, 4, 0);
    let inputs = ndarray::arr2(&[[0.0, 1.0]]).into_dyn();
    let err = collect_estimation_features(&model, &inputs, &[2], None, 2, 2, 8, 1);
    assert!(err.is_err());
}
