//! Evaluation metrics and classifier-bias diagnostics.
//!
//! Covers the incremental-accuracy family (A_i after each phase, their mean),
//! per-class weight-norm profiles grouped by task, the gradient-direction
//! ratio R_k = ‖Σ g‖/Σ‖g‖ used to compare gradient stability between real
//! and synthetic batches, and the 2-task experiment that isolates how loss
//! choice and data quality bias class-weight norms.

use crate::data::{epoch_batches, DataSet, TaskSequence};
use crate::error::{CoreError, Result};
use crate::inversion::{train_generator, InversionConfig};
use crate::model::{GeneratorSpec, ModelArch, ModelBundle};
use crate::nn::{BoundParams, OptimizerSpec, SgdMomentum};
use crate::rng;
use crate::tensor::{argmax_rows, backward, Tape};
use crate::training::{
    hkd_loss_var, lce_loss_var, train_task, DebiasMode, RkdHook, TaskTrainContext, TrainConfig,
};
use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};

/// Per-run record of phase accuracies, timings, and norm snapshots.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// A_1..A_N, the accuracy over all seen classes after each task.
    pub per_phase_accuracy: Vec<f64>,
    /// Mean of the recorded phase accuracies.
    pub mean_accuracy: f64,
    /// Wall-clock seconds per task (inversion + training + estimation).
    pub per_task_seconds: Vec<f64>,
    /// Per-class weight norms after each task.
    pub weight_norm_snapshots: Vec<WeightNormProfile>,
}

impl MetricsRecord {
    pub fn push_phase(&mut self, accuracy: f64, seconds: f64, norms: WeightNormProfile) {
        self.per_phase_accuracy.push(accuracy);
        self.per_task_seconds.push(seconds);
        self.weight_norm_snapshots.push(norms);
        self.mean_accuracy =
            self.per_phase_accuracy.iter().sum::<f64>() / self.per_phase_accuracy.len() as f64;
    }

    /// A_N, the accuracy after the final task.
    pub fn final_accuracy(&self) -> f64 {
        self.per_phase_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Fraction of samples whose global argmax logit equals the label.
pub fn incremental_accuracy(model: &ModelBundle, test_union: &DataSet) -> Result<f64> {
    if test_union.is_empty() {
        return Err(CoreError::InvalidArgument("empty test set".into()));
    }
    let n = test_union.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (inputs, labels) = test_union.gather(&idx);
        let logits = model.forward_logits(&inputs)?;
        let pred = argmax_rows(&logits);
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Per-class weight norms with per-task means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightNormProfile {
    /// `(class_row, task_index, norm)` for every classifier row.
    pub per_class: Vec<(usize, usize, f64)>,
    /// Mean norm per task.
    pub per_task_mean: Vec<f64>,
}

/// Compute `n_k = ‖w_k‖₂` per class, grouped by task boundaries
/// (cumulative row ends, e.g. `[2, 4]` for two 2-class tasks).
pub fn weight_norm_profile(w: &Array2<f64>, task_boundaries: &[usize]) -> Result<WeightNormProfile> {
    let k = w.nrows();
    if task_boundaries.is_empty() || *task_boundaries.last().unwrap() != k {
        return Err(CoreError::InvalidArgument(format!(
            "boundaries {task_boundaries:?} must end at row count {k}"
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut per_task_mean = Vec::with_capacity(task_boundaries.len());
    let mut start = 0usize;
    for (task, &end) in task_boundaries.iter().enumerate() {
        if end <= start {
            return Err(CoreError::InvalidArgument(
                "task boundaries must be strictly increasing".into(),
            ));
        }
        let mut sum = 0.0;
        for row in start..end {
            let norm = w.row(row).mapv(|x| x * x).sum().sqrt();
            per_class.push((row, task, norm));
            sum += norm;
        }
        per_task_mean.push(sum / (end - start) as f64);
        start = end;
    }
    Ok(WeightNormProfile { per_class, per_task_mean })
}

/// Ratio of the norm of the mean gradient to the mean gradient norm,
/// `‖Σ_m g_m‖ / Σ_m ‖g_m‖ ∈ [0, 1]`.
pub fn gradient_direction_ratio(grads: &[Array1<f64>]) -> Result<f64> {
    if grads.is_empty() {
        return Err(CoreError::InvalidArgument("no gradients given".into()));
    }
    let mut sum = Array1::<f64>::zeros(grads[0].len());
    let mut norm_sum = 0.0;
    for g in grads {
        if g.len() != sum.len() {
            return Err(CoreError::ShapeMismatch("gradient dims differ".into()));
        }
        sum += g;
        norm_sum += g.mapv(|x| x * x).sum().sqrt();
    }
    if norm_sum == 0.0 {
        return Err(CoreError::InvalidArgument("all gradients are zero".into()));
    }
    Ok(sum.mapv(|x| x * x).sum().sqrt() / norm_sum)
}

/// Arithmetic mean of per-class ratios.
pub fn mean_direction_ratio(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(CoreError::InvalidArgument("no ratios given".into()));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

// ---------------------------------------------------------------------------
// 2-task bias experiment
// ---------------------------------------------------------------------------

/// Training scheme for the second task's two data halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScheme {
    /// Standard replay training: HKD on synthetic old data, LCE on real new.
    SynthHkdRealLce,
    /// Unbiased control: LCE on real old data, LCE on real new.
    RealLceRealLce,
    /// HKD on real old data, LCE on real new (isolates the loss effect).
    RealHkdRealLce,
    /// LCE on synthetic old data, LCE on real new (isolates the data effect).
    SynthLceRealLce,
}

impl BiasScheme {
    pub fn uses_synthetic_old_data(self) -> bool {
        matches!(self, BiasScheme::SynthHkdRealLce | BiasScheme::SynthLceRealLce)
    }

    fn old_half_uses_hkd(self) -> bool {
        matches!(self, BiasScheme::SynthHkdRealLce | BiasScheme::RealHkdRealLce)
    }

    pub fn name(self) -> &'static str {
        match self {
            BiasScheme::SynthHkdRealLce => "synthHKD_realLCE",
            BiasScheme::RealLceRealLce => "realLCE_realLCE",
            BiasScheme::RealHkdRealLce => "realHKD_realLCE",
            BiasScheme::SynthLceRealLce => "synthLCE_realLCE",
        }
    }
}

impl std::str::FromStr for BiasScheme {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthHKD_realLCE" | "synth_hkd_real_lce" => Ok(BiasScheme::SynthHkdRealLce),
            "realLCE_realLCE" | "real_lce_real_lce" => Ok(BiasScheme::RealLceRealLce),
            "realHKD_realLCE" | "real_hkd_real_lce" => Ok(BiasScheme::RealHkdRealLce),
            "synthLCE_realLCE" | "synth_lce_real_lce" => Ok(BiasScheme::SynthLceRealLce),
            other => Err(CoreError::InvalidArgument(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Settings for [`two_task_bias_experiment`].
pub struct BiasExperimentSettings<'a> {
    pub arch: &'a ModelArch,
    pub train_cfg: &'a TrainConfig,
    /// Inversion settings, needed by synthetic-data schemes.
    pub inversion_cfg: Option<&'a InversionConfig>,
    pub generator_spec: Option<&'a GeneratorSpec>,
    pub seed: u64,
}

/// One epoch row of the R-bar trace. `r_real` covers the new-class rows
/// (always trained on real data); `r_old_half` covers the old-class rows,
/// whose data is synthetic exactly when the scheme says so.
#[derive(Debug, Clone, Serialize)]
pub struct RBarPoint {
    pub epoch: usize,
    pub r_real: f64,
    pub r_old_half: f64,
}

/// Outcome of one scheme run.
pub struct BiasExperimentOutcome {
    pub scheme: BiasScheme,
    pub norm_profile: WeightNormProfile,
    pub rbar_trace: Vec<RBarPoint>,
    pub model: ModelBundle,
}

/// Run one training scheme on a 2-task split and record the end-of-task
/// weight-norm profile plus per-epoch gradient-direction ratios for both
/// class halves.
pub fn two_task_bias_experiment(
    scheme: BiasScheme,
    seq: &TaskSequence,
    settings: &BiasExperimentSettings<'_>,
) -> Result<BiasExperimentOutcome> {
    if seq.num_tasks() != 2 {
        return Err(CoreError::InvalidArgument(format!(
            "bias experiment needs a 2-task split, got {}",
            seq.num_tasks()
        )));
    }
    let k1 = seq.tasks[0].class_count();
    let k2 = seq.tasks[1].class_count();
    let cfg = settings.train_cfg;
    cfg.validate()?;

    // task 1: standard CE (local == global on the first task)
    let mut t1_cfg = cfg.clone();
    t1_cfg.debias_mode = DebiasMode::None;
    let first = ModelBundle::new(
        settings.arch.clone(),
        k1,
        rng::derive_seed(settings.seed, &["bias-exp", "model-init"]),
    )?;
    let t1 = train_task(
        first,
        &TaskTrainContext {
            old: None,
            task_rows: (0, k1),
            train_data: &seq.tasks[0].train,
            cfg: &t1_cfg,
            rkd_hook: RkdHook::Zero,
            seed: rng::derive_seed(settings.seed, &["bias-exp", "task1"]),
        },
    )?;
    let old_model = t1.model;

    // old-data source for task 2
    let generator = if scheme.uses_synthetic_old_data() {
        let inv_cfg = settings.inversion_cfg.ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "scheme {} needs a generator but no inversion settings were given",
                scheme.name()
            ))
        })?;
        let gen_spec = settings.generator_spec.ok_or_else(|| {
            CoreError::InvalidArgument("missing generator spec for synthetic scheme".into())
        })?;
        let stats_source = crate::stats::collect_estimation_features(
            &old_model,
            &seq.tasks[0].train.inputs,
            &seq.tasks[0].train.labels,
            None,
            0,
            k1,
            cfg.batch_size,
            rng::derive_seed(settings.seed, &["bias-exp", "estimation"]),
        )?;
        let stats = crate::stats::estimate_class_stats(&stats_source)?;
        let out = train_generator(
            &old_model,
            Some(&stats),
            gen_spec,
            inv_cfg,
            rng::derive_seed(settings.seed, &["bias-exp", "inversion"]),
            None,
        )?;
        Some(out.generator)
    } else {
        None
    };

    // task 2: custom two-half loop with gradient tracing
    let mut model = old_model.expand_classifier(
        k2,
        rng::derive_seed(settings.seed, &["bias-exp", "expand"]),
    )?;
    let (base_lr, momentum, weight_decay) = match cfg.optimizer {
        OptimizerSpec::Sgd { lr, momentum, weight_decay } => (lr, momentum, weight_decay),
        OptimizerSpec::Adam { .. } => {
            return Err(CoreError::Config("bias experiment uses momentum SGD".into()))
        }
    };
    let mut opt = SgdMomentum::new(base_lr, momentum, weight_decay);
    let new_data = &seq.tasks[1].train;
    let old_data = &seq.tasks[0].train;
    let mut noise_rng = rng::stream(settings.seed, &["bias-exp", "noise"]);
    let mut rbar_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_schedule.lr_at(base_lr, epoch);
        let mut new_shuffle =
            rng::stream(settings.seed, &["bias-exp", "shuffle-new", &epoch.to_string()]);
        let mut old_shuffle =
            rng::stream(settings.seed, &["bias-exp", "shuffle-old", &epoch.to_string()]);
        let new_batches = epoch_batches(new_data.len(), cfg.batch_size, &mut new_shuffle);
        let mut old_batches = epoch_batches(old_data.len(), cfg.batch_size, &mut old_shuffle);

        // per-class gradient accumulators over the epoch
        let mut grad_sum = Array2::<f64>::zeros((k1 + k2, model.feature_dim()));
        let mut grad_norm_sum = Array1::<f64>::zeros(k1 + k2);

        for (bi, idx) in new_batches.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (real_inputs, real_labels) = new_data.gather(idx);
            let local_labels: Vec<usize> = real_labels.iter().map(|&y| y - k1).collect();

            // old-half batch of the same size
            let (old_inputs, old_local_labels): (ndarray::ArrayD<f64>, Vec<usize>) =
                if let Some(generator) = &generator {
                    let synth = generator.sample(idx.len(), &mut noise_rng)?;
                    let pseudo = argmax_rows(&old_model.forward_logits(&synth)?);
                    (synth, pseudo)
                } else {
                    if old_batches.is_empty() {
                        let mut reshuffle = rng::stream(
                            settings.seed,
                            &["bias-exp", "reshuffle-old", &epoch.to_string(), &bi.to_string()],
                        );
                        old_batches =
                            epoch_batches(old_data.len(), cfg.batch_size, &mut reshuffle);
                    }
                    let oidx: Vec<usize> =
                        old_batches.remove(0).into_iter().take(idx.len()).collect();
                    let (inputs, labels) = old_data.gather(&oidx);
                    (inputs, labels) // old rows start at 0: global == local
                };

            let tape = Tape::new();
            let bound = BoundParams::bind(&tape, &model.params);
            let real_x = tape.input(real_inputs);
            let (_, real_logits) = model.forward_train(&tape, &bound, &real_x)?;
            let l_new = lce_loss_var(
                &tape,
                &real_logits.narrow(1, k1, k2),
                &local_labels,
                cfg.temperature,
            )?;

            let old_x = tape.input(old_inputs.clone());
            let (_, old_logits_new_model) = model.forward_train(&tape, &bound, &old_x)?;
            let old_slice = old_logits_new_model.narrow(1, 0, k1);
            let l_old = if scheme.old_half_uses_hkd() {
                let teacher = tape.constant(old_model.forward_logits(&old_inputs)?.into_dyn());
                hkd_loss_var(&tape, &teacher, &old_slice)?
            } else {
                lce_loss_var(&tape, &old_slice, &old_local_labels, cfg.temperature)?
            };

            let total = l_new.add(&l_old);
            let total_v = total.scalar_value();
            if !total_v.is_finite() {
                return Err(CoreError::NonFinite {
                    stage: "bias-experiment".into(),
                    detail: format!("scheme {} epoch {epoch}", scheme.name()),
                });
            }
            let grads = backward(&total);
            // the two halves touch disjoint classifier rows, so one backward
            // pass yields clean per-half row gradients
            let w_grad = grads
                .wrt(&bound.get("classifier.w"))
                .into_dimensionality::<Ix2>()
                .unwrap();
            for row in 0..k1 + k2 {
                let g = w_grad.row(row);
                grad_sum.row_mut(row).scaled_add(1.0, &g);
                grad_norm_sum[row] += g.mapv(|x| x * x).sum().sqrt();
            }
            let param_grads = bound.grads(&grads);
            opt.step(&mut model.params, &param_grads);
        }

        let rbar_of = |rows: std::ops::Range<usize>| {
            let mut ratios = Vec::new();
            for row in rows {
                if grad_norm_sum[row] > 0.0 {
                    let r = grad_sum.row(row).mapv(|x| x * x).sum().sqrt() / grad_norm_sum[row];
                    ratios.push(r);
                }
            }
            mean_direction_ratio(&ratios).unwrap_or(0.0)
        };
        rbar_trace.push(RBarPoint {
            epoch,
            r_real: rbar_of(k1..k1 + k2),
            r_old_half: rbar_of(0..k1),
        });
    }

    let norm_profile = weight_norm_profile(&model.classifier_weights(), &[k1, k1 + k2])?;
    Ok(BiasExperimentOutcome { scheme, norm_profile, rbar_trace, model })
}

#[cfg(test)]
mod tests;
