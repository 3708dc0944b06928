//! Tied-Gaussian class statistics, the data-consistency enhancement (DCE)
//! loss, and the consistency meters.
//!
//! The estimation stage models penultimate-layer features class-conditionally
//! as N(u_k, Σ̄) with one covariance shared by all classes. The implied data
//! distribution is the mixture Σ_k p(k)·N(u_k, Σ̄) with p(k) taken from class
//! counts. Consistency between two feature sets is measured either through
//! fitted mixtures (Monte-Carlo KL) or non-parametrically (Gaussian-kernel
//! KDE with Scott's-rule bandwidth).
//!
//! Covariances use the biased divisor (total sample count), and accumulation
//! uses Kahan compensation so results are stable under sample reordering.

use crate::error::{CoreError, Result};
use crate::model::{GeneratorBundle, ModelBundle};
use crate::rng;
use crate::tensor::{argmax_rows, Tape, Var};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-class feature means plus one tied covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub means: BTreeMap<usize, Array1<f64>>,
    pub tied_cov: Array2<f64>,
    pub counts: BTreeMap<usize, usize>,
    pub feature_dim: usize,
}

impl ClassStatistics {
    /// Class prior p(k) = count_k / total.
    pub fn prior(&self, class: usize) -> f64 {
        let total: usize = self.counts.values().sum();
        self.counts.get(&class).map(|&c| c as f64 / total as f64).unwrap_or(0.0)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.means.keys().copied().collect()
    }

    /// Check symmetry, PSD (via jittered Cholesky), counts >= 1, and that
    /// every mean has a count.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if self.tied_cov.nrows() != d || self.tied_cov.ncols() != d {
            return Err(CoreError::ShapeMismatch(format!(
                "tied covariance is {}x{}, expected {d}x{d}",
                self.tied_cov.nrows(),
                self.tied_cov.ncols()
            )));
        }
        let mut asym: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                asym = asym.max((self.tied_cov[[i, j]] - self.tied_cov[[j, i]]).abs());
            }
        }
        if asym > 1e-9 {
            return Err(CoreError::InvalidArgument(format!("covariance asymmetry {asym}")));
        }
        // PSD up to -1e-6 of the trace scale; absolute floor admits the
        // legitimate all-zero covariance (single sample per class).
        let trace_scale = (0..d).map(|i| self.tied_cov[[i, i]]).sum::<f64>() / d as f64;
        let eps = CHOLESKY_JITTER * trace_scale.max(0.0) + 1e-12;
        let mut shifted = self.tied_cov.clone();
        for i in 0..d {
            shifted[[i, i]] += eps;
        }
        cholesky(&shifted).ok_or(CoreError::NotPositiveDefinite(d))?;
        for (k, u) in &self.means {
            if u.len() != d {
                return Err(CoreError::ShapeMismatch(format!("mean of class {k} has wrong dim")));
            }
            match self.counts.get(k) {
                Some(&c) if c >= 1 => {}
                _ => {
                    return Err(CoreError::InvalidArgument(format!(
                        "class {k} has a mean but no positive count"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Per-batch class means and covariance of one feature batch.
#[derive(Debug, Clone)]
pub struct BatchStatistics {
    pub batch_means: BTreeMap<usize, Array1<f64>>,
    pub batch_cov: Array2<f64>,
    pub counts: BTreeMap<usize, usize>,
    pub batch_size: usize,
}

// ---------------------------------------------------------------------------
// Kahan accumulation
// ---------------------------------------------------------------------------

/// Kahan-compensated vector accumulator.
struct KahanVec {
    sum: Array1<f64>,
    comp: Array1<f64>,
}

impl KahanVec {
    fn new(d: usize) -> Self {
        KahanVec { sum: Array1::zeros(d), comp: Array1::zeros(d) }
    }

    fn add(&mut self, x: &ArrayView1<f64>) {
        for i in 0..self.sum.len() {
            let y = x[i] - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
    }
}

/// Kahan-compensated matrix accumulator for outer products.
struct KahanMat {
    sum: Array2<f64>,
    comp: Array2<f64>,
}

impl KahanMat {
    fn new(d: usize) -> Self {
        KahanMat { sum: Array2::zeros((d, d)), comp: Array2::zeros((d, d)) }
    }

    /// Add the outer product v·vᵀ.
    fn add_outer(&mut self, v: &ArrayView1<f64>) {
        let d = v.len();
        for i in 0..d {
            for j in 0..d {
                let x = v[i] * v[j];
                let y = x - self.comp[[i, j]];
                let t = self.sum[[i, j]] + y;
                self.comp[[i, j]] = (t - self.sum[[i, j]]) - y;
                self.sum[[i, j]] = t;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// estimation
// ---------------------------------------------------------------------------

/// Fit per-class means and the tied covariance from features grouped by class.
///
/// `u_k` is the arithmetic class mean; `Σ̄` sums centered outer products over
/// every sample and divides by the total count (biased estimator).
pub fn estimate_class_stats(
    features_by_class: &BTreeMap<usize, Array2<f64>>,
) -> Result<ClassStatistics> {
    if features_by_class.is_empty() {
        return Err(CoreError::InvalidArgument("no classes to estimate from".into()));
    }
    let d = features_by_class.values().next().unwrap().ncols();
    let mut means = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut total = 0usize;
    for (&k, z) in features_by_class {
        if z.nrows() == 0 {
            return Err(CoreError::InvalidArgument(format!("class {k} has no features")));
        }
        if z.ncols() != d {
            return Err(CoreError::ShapeMismatch(format!(
                "class {k} features have dim {}, expected {d}",
                z.ncols()
            )));
        }
        let mut acc = KahanVec::new(d);
        for row in z.rows() {
            acc.add(&row);
        }
        means.insert(k, acc.sum / z.nrows() as f64);
        counts.insert(k, z.nrows());
        total += z.nrows();
    }
    let mut cov_acc = KahanMat::new(d);
    for (&k, z) in features_by_class {
        let u = &means[&k];
        for row in z.rows() {
            let centered = &row - u;
            cov_acc.add_outer(&centered.view());
        }
    }
    let tied_cov = cov_acc.sum / total as f64;
    let stats = ClassStatistics { means, tied_cov, counts, feature_dim: d };
    stats.validate()?;
    Ok(stats)
}

/// Per-class means and batch covariance of one labelled feature batch.
///
/// `Σ̂` divides by the full batch size, matching the stored-statistics
/// convention. Classes absent from the batch are absent from the result.
pub fn batch_stats(features: &Array2<f64>, labels: &[usize]) -> Result<BatchStatistics> {
    let b = features.nrows();
    if b < 2 {
        return Err(CoreError::BatchTooSmall(b, "batch statistics need at least 2 samples"));
    }
    if labels.len() != b {
        return Err(CoreError::ShapeMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            b
        )));
    }
    let d = features.ncols();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut batch_means = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (&k, idxs) in &by_class {
        let mut acc = KahanVec::new(d);
        for &i in idxs {
            acc.add(&features.row(i));
        }
        batch_means.insert(k, acc.sum / idxs.len() as f64);
        counts.insert(k, idxs.len());
    }
    let mut cov_acc = KahanMat::new(d);
    for (&k, idxs) in &by_class {
        let u = &batch_means[&k];
        for &i in idxs {
            let centered = &features.row(i) - u;
            cov_acc.add_outer(&centered.view());
        }
    }
    Ok(BatchStatistics {
        batch_means,
        batch_cov: cov_acc.sum / b as f64,
        counts,
        batch_size: b,
    })
}

// ---------------------------------------------------------------------------
// DCE loss
// ---------------------------------------------------------------------------

/// DCE alignment value: Σ_k ‖û_k − u_k‖₂ + ‖Σ̂ − Σ̄‖_F over classes present
/// in the batch. Errors if the batch contains a class unknown to `stored`.
pub fn dce_loss(batch: &BatchStatistics, stored: &ClassStatistics) -> Result<f64> {
    let mut loss = 0.0;
    for (&k, u_hat) in &batch.batch_means {
        let u = stored.means.get(&k).ok_or(CoreError::UnknownClass(k))?;
        loss += (u_hat - u).mapv(|x| x * x).sum().sqrt();
    }
    let diff = &batch.batch_cov - &stored.tied_cov;
    loss += diff.mapv(|x| x * x).sum().sqrt();
    Ok(loss)
}

/// Graph version of the DCE loss, differentiable w.r.t. `features`.
///
/// Batch means and covariance are rebuilt inside the tape from `features`
/// (shape `[B,d]`) and `labels`, so gradients flow back into the samples that
/// produced them.
pub fn dce_loss_var(
    tape: &Tape,
    features: &Var,
    labels: &[usize],
    stored: &ClassStatistics,
) -> Result<Var> {
    let shape = features.shape();
    let (b, d) = (shape[0], shape[1]);
    if b < 2 {
        return Err(CoreError::BatchTooSmall(b, "batch statistics need at least 2 samples"));
    }
    if labels.len() != b {
        return Err(CoreError::ShapeMismatch(format!("{} labels for {b} rows", labels.len())));
    }
    if d != stored.feature_dim {
        return Err(CoreError::ShapeMismatch(format!(
            "features dim {d} vs stored dim {}",
            stored.feature_dim
        )));
    }
    let mut present: Vec<usize> = Vec::new();
    for &y in labels {
        if !stored.means.contains_key(&y) {
            return Err(CoreError::UnknownClass(y));
        }
        if !present.contains(&y) {
            present.push(y);
        }
    }
    present.sort_unstable();
    let p = present.len();

    // averaging matrix [P,B] and assignment matrix [B,P]
    let mut avg = Array2::<f64>::zeros((p, b));
    let mut assign = Array2::<f64>::zeros((b, p));
    for (pi, &k) in present.iter().enumerate() {
        let count = labels.iter().filter(|&&y| y == k).count() as f64;
        for (i, &y) in labels.iter().enumerate() {
            if y == k {
                avg[[pi, i]] = 1.0 / count;
                assign[[i, pi]] = 1.0;
            }
        }
    }
    let avg_c = tape.constant(avg.into_dyn());
    let assign_c = tape.constant(assign.into_dyn());

    let u_hat = avg_c.matmul(features); // [P,d]
    let centered = features.sub(&assign_c.matmul(&u_hat)); // [B,d]
    let cov_hat = centered.t().matmul(&centered).mul_scalar(1.0 / b as f64); // [d,d]

    let mut u_stored = Array2::<f64>::zeros((p, d));
    for (pi, &k) in present.iter().enumerate() {
        u_stored.row_mut(pi).assign(&stored.means[&k]);
    }
    let u_c = tape.constant(u_stored.into_dyn());
    let mean_term = u_hat.sub(&u_c).square().sum_axis(1).sqrt().sum_all();

    let cov_c = tape.constant(stored.tied_cov.clone().into_dyn());
    let cov_term = cov_hat.sub(&cov_c).square().sum_all().sqrt();

    Ok(mean_term.add(&cov_term))
}

// ---------------------------------------------------------------------------
// Gaussian-mixture Monte-Carlo KL
// ---------------------------------------------------------------------------

/// Relative jitter added to a covariance before factorization.
pub const CHOLESKY_JITTER: f64 = 1e-6;

fn jitter(cov: &Array2<f64>) -> Array2<f64> {
    let d = cov.nrows();
    let mean_diag = (0..d).map(|i| cov[[i, i]]).sum::<f64>() / d as f64;
    let mut out = cov.clone();
    for i in 0..d {
        out[[i, i]] += CHOLESKY_JITTER * mean_diag;
    }
    out
}

/// Lower-triangular Cholesky factor, or None if not positive definite.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve L x = b for lower-triangular L.
fn solve_lower(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let d = b.len();
    let mut x = Array1::<f64>::zeros(d);
    for i in 0..d {
        let mut s = b[i];
        for j in 0..i {
            s -= l[[i, j]] * x[j];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A fitted mixture prepared for sampling and log-density evaluation.
struct PreparedMixture {
    classes: Vec<usize>,
    log_priors: Vec<f64>,
    cum_priors: Vec<f64>,
    means: Vec<Array1<f64>>,
    chol: Array2<f64>,
    log_det: f64,
    dim: usize,
}

impl PreparedMixture {
    fn new(stats: &ClassStatistics) -> Result<Self> {
        let d = stats.feature_dim;
        let chol =
            cholesky(&jitter(&stats.tied_cov)).ok_or(CoreError::NotPositiveDefinite(d))?;
        let log_det = 2.0 * (0..d).map(|i| chol[[i, i]].ln()).sum::<f64>();
        let classes = stats.classes();
        let total: usize = stats.counts.values().sum();
        let mut log_priors = Vec::with_capacity(classes.len());
        let mut cum_priors = Vec::with_capacity(classes.len());
        let mut acc = 0.0;
        for k in &classes {
            let p = stats.counts[k] as f64 / total as f64;
            log_priors.push(p.ln());
            acc += p;
            cum_priors.push(acc);
        }
        let means = classes.iter().map(|k| stats.means[k].clone()).collect();
        Ok(PreparedMixture { classes, log_priors, cum_priors, means, chol, log_det, dim: d })
    }

    fn sample(&self, rng: &mut rng::Stream) -> Array1<f64> {
        let u: f64 = rng.random::<f64>();
        let idx = self
            .cum_priors
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.classes.len() - 1);
        let xi: Array1<f64> =
            Array1::from_iter((0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.means[idx] + &self.chol.dot(&xi)
    }

    fn log_pdf(&self, z: &ArrayView1<f64>) -> f64 {
        let d = self.dim as f64;
        let comps: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_priors)
            .map(|(u, lp)| {
                let diff = z - u;
                let w = solve_lower(&self.chol, &diff.view());
                let maha = w.mapv(|x| x * x).sum();
                lp - 0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + maha)
            })
            .collect();
        logsumexp(&comps)
    }
}

/// Monte-Carlo KL(p ‖ q) between two tied-Gaussian mixtures.
///
/// Draws `num_samples` points from `p` (component by prior, then
/// N(u_k, Σ̄_p)) and averages the low-variance estimator `r - 1 - log r`
/// with `r = q(z)/p(z)`, which is unbiased for the KL divergence and
/// non-negative term by term. Deterministic given `seed`.
pub fn mixture_kl_mc(
    p: &ClassStatistics,
    q: &ClassStatistics,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    if num_samples < 1 {
        return Err(CoreError::InvalidArgument("num_samples must be >= 1".into()));
    }
    if p.feature_dim != q.feature_dim {
        return Err(CoreError::ShapeMismatch(format!(
            "mixture dims differ: {} vs {}",
            p.feature_dim, q.feature_dim
        )));
    }
    let pm = PreparedMixture::new(p)?;
    let qm = PreparedMixture::new(q)?;
    let mut rng = rng::stream(seed, &["mixture-kl-mc"]);
    let mut acc = 0.0;
    let mut comp = 0.0;
    for _ in 0..num_samples {
        let z = pm.sample(&mut rng);
        let lr = qm.log_pdf(&z.view()) - pm.log_pdf(&z.view());
        let term = lr.exp() - 1.0 - lr;
        let y = term - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
    }
    Ok(acc / num_samples as f64)
}

/// Closed-form KL between two Gaussians with identical covariance:
/// `0.5 (u1-u2)ᵀ Σ⁻¹ (u1-u2)`. Test oracle for the MC estimator.
pub fn gaussian_kl_same_cov(u1: &Array1<f64>, u2: &Array1<f64>, cov: &Array2<f64>) -> f64 {
    let l = cholesky(cov).expect("oracle covariance must be PD");
    let diff = u1 - u2;
    let w = solve_lower(&l, &diff.view());
    0.5 * w.mapv(|x| x * x).sum()
}

// ---------------------------------------------------------------------------
// KDE consistency meter
// ---------------------------------------------------------------------------

/// A Gaussian-kernel KDE with Scott's-rule per-dimension bandwidths.
pub struct Kde {
    reference: Array2<f64>,
    bandwidth: Array1<f64>,
    log_norm: f64,
}

impl Kde {
    /// Fit on a reference set (rows = samples). Errors if fewer than 2
    /// samples or if any dimension has zero spread (zero bandwidth).
    pub fn fit(reference: &Array2<f64>) -> Result<Self> {
        let n = reference.nrows();
        if n < 2 {
            return Err(CoreError::BatchTooSmall(n, "KDE needs at least 2 reference samples"));
        }
        let d = reference.ncols();
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut bandwidth = Array1::<f64>::zeros(d);
        for j in 0..d {
            let col = reference.index_axis(Axis(1), j);
            let mean = col.sum() / n as f64;
            let var = col.mapv(|x| (x - mean) * (x - mean)).sum() / n as f64;
            let h = var.sqrt() * factor;
            if h == 0.0 {
                return Err(CoreError::ZeroBandwidth(j));
            }
            bandwidth[j] = h;
        }
        let log_norm = -(n as f64).ln()
            - bandwidth.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum::<f64>();
        Ok(Kde { reference: reference.clone(), bandwidth, log_norm })
    }

    pub fn bandwidth(&self) -> &Array1<f64> {
        &self.bandwidth
    }

    /// Log density at one query point.
    pub fn log_pdf(&self, z: &ArrayView1<f64>) -> f64 {
        let kernels: Vec<f64> = self
            .reference
            .rows()
            .into_iter()
            .map(|row| {
                let mut e = 0.0;
                for j in 0..z.len() {
                    let u = (z[j] - row[j]) / self.bandwidth[j];
                    e += u * u;
                }
                -0.5 * e
            })
            .collect();
        logsumexp(&kernels) + self.log_norm
    }

    /// Draw one sample: a uniformly chosen reference point plus kernel noise.
    pub fn sample(&self, rng: &mut rng::Stream) -> Array1<f64> {
        let i = rng.random_range(0..self.reference.nrows());
        let mut z = self.reference.row(i).to_owned();
        for j in 0..z.len() {
            let xi: f64 = rng.sample(StandardNormal);
            z[j] += self.bandwidth[j] * xi;
        }
        z
    }
}

/// Log density of a Gaussian-kernel KDE over `reference` at each query row.
pub fn kde_log_density(reference: &Array2<f64>, queries: &Array2<f64>) -> Result<Array1<f64>> {
    if reference.ncols() != queries.ncols() {
        return Err(CoreError::ShapeMismatch(format!(
            "reference dim {} vs query dim {}",
            reference.ncols(),
            queries.ncols()
        )));
    }
    let kde = Kde::fit(reference)?;
    Ok(Array1::from_iter(queries.rows().into_iter().map(|q| kde.log_pdf(&q))))
}

/// Monte-Carlo KL(p ‖ q) where p, q are KDEs over the real and synthetic
/// feature sets. Samples are drawn from p by resampling real features with
/// kernel noise; the estimator is `r - 1 - log r` with `r = q(z)/p(z)`.
pub fn kde_kl_mc(
    real_features: &Array2<f64>,
    synth_features: &Array2<f64>,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    if num_samples < 1 {
        return Err(CoreError::InvalidArgument("num_samples must be >= 1".into()));
    }
    if real_features.ncols() != synth_features.ncols() {
        return Err(CoreError::ShapeMismatch(format!(
            "real dim {} vs synthetic dim {}",
            real_features.ncols(),
            synth_features.ncols()
        )));
    }
    let p = Kde::fit(real_features)?;
    let q = Kde::fit(synth_features)?;
    let mut rng = rng::stream(seed, &["kde-kl-mc"]);
    let mut acc = 0.0;
    let mut comp = 0.0;
    for _ in 0..num_samples {
        let z = p.sample(&mut rng);
        let lr = q.log_pdf(&z.view()) - p.log_pdf(&z.view());
        let term = lr.exp() - 1.0 - lr;
        let y = term - comp;
        let t = acc + y;
        comp = (t - acc) - y;
        acc = t;
    }
    Ok(acc / num_samples as f64)
}

// ---------------------------------------------------------------------------
// estimation-stage feature collection
// ---------------------------------------------------------------------------

/// Collect the feature sets the estimation stage fits on.
///
/// Real task samples pass once through the (new) model's extractor in eval
/// mode. When old classes exist, the generator produces
/// `|C_old|/|C_new| × real_count` samples (rounded up to whole batches);
/// each is labelled by the old model's argmax and featurized by the new
/// extractor.
pub fn collect_estimation_features(
    model: &ModelBundle,
    real_inputs: &ndarray::ArrayD<f64>,
    real_labels: &[usize],
    old: Option<(&ModelBundle, &GeneratorBundle)>,
    old_class_count: usize,
    new_class_count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Array2<f64>>> {
    if old_class_count > 0 && old.is_none() {
        return Err(CoreError::InvalidArgument(
            "old classes exist but no generator/old model was provided".into(),
        ));
    }
    if new_class_count == 0 {
        return Err(CoreError::InvalidArgument("new_class_count must be positive".into()));
    }
    let n_real = real_inputs.shape()[0];
    if n_real == 0 {
        return Err(CoreError::InvalidArgument("no real samples to estimate from".into()));
    }

    let mut rows_by_class: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();

    // real pass, eval mode, in batches
    let mut start = 0usize;
    while start < n_real {
        let end = (start + batch_size).min(n_real);
        let batch = real_inputs.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned();
        let feats = model.forward_features(&batch)?;
        for (i, row) in feats.rows().into_iter().enumerate() {
            rows_by_class.entry(real_labels[start + i]).or_default().push(row.to_owned());
        }
        start = end;
    }

    if let Some((old_model, generator)) = old {
        let target = (old_class_count as f64 / new_class_count as f64 * n_real as f64).round()
            as usize;
        let batches = target.div_ceil(batch_size);
        let mut gen_rng = rng::stream(seed, &["estimation", "generator"]);
        for _ in 0..batches {
            let samples = generator.sample(batch_size, &mut gen_rng)?;
            let old_logits = old_model.forward_logits(&samples)?;
            let labels = argmax_rows(&old_logits);
            let feats = model.forward_features(&samples)?;
            for (i, row) in feats.rows().into_iter().enumerate() {
                rows_by_class.entry(labels[i]).or_default().push(row.to_owned());
            }
        }
    }

    let d = model.feature_dim();
    let mut out = BTreeMap::new();
    for (k, rows) in rows_by_class {
        let mut m = Array2::<f64>::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(r);
        }
        out.insert(k, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
