//! Training stage: learn task i from real new-class batches and generated
//! old-class batches.
//!
//! The objective is `λ3·L_hkd + λ4·L_lce + λ5·L_rkd + λ_war·L_war`:
//!
//! * `L_hkd` — hard knowledge distillation, the per-class-scaled L1 distance
//!   between old-model logits and the new model's old-class logit slice on
//!   generated samples;
//! * `L_lce` — local cross-entropy with softmax restricted to the current
//!   task's class block;
//! * `L_rkd` — pluggable relational hook (defaults off; a simplified,
//!   non-canonical cosine-similarity matcher is provided);
//! * `L_war` — weight alignment regularization pulling old-class weight
//!   norms toward the new-class mean norm and vice versa (the cross-pairing
//!   is as specified; a same-group variant is available behind a flag).
//!
//! Debias comparators: `wa` rescales new-class rows once after training so
//! group mean norms match; `sce` replaces HKD+LCE with two independent local
//! cross-entropies.

use crate::data::{epoch_batches, DataSet};
use crate::error::{CoreError, Result};
use crate::model::{GeneratorBundle, ModelBundle};
use crate::nn::{BoundParams, LrSchedule, OptimizerSpec, SgdMomentum};
use crate::rng;
use crate::tensor::{argmax_rows, backward, Tape, Var};
use ndarray::{Array2, Ix2};
use serde::{Deserialize, Serialize};

/// Classifier-debiasing strategy used during/after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMode {
    /// Weight alignment regularization during training (the framework's own
    /// debiaser).
    #[default]
    War,
    /// Post-training weight aligning: rescale new-class rows once.
    Wa,
    /// Split cross-entropy: local CE on generated data instead of HKD.
    Sce,
    /// No debiasing.
    None,
}

/// Training-stage hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Shared batch size for real and generated batches.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// λ3, HKD weight (scaled by sqrt(K_old/K_new) when
    /// `scale_hkd_by_task_ratio` is set).
    #[serde(default = "default_one")]
    pub lambda_hkd: f64,
    /// λ4, local-CE weight.
    #[serde(default = "default_one")]
    pub lambda_lce: f64,
    /// λ5, relational-hook weight (defaults to 0; the provided hook is a
    /// simplified stand-in, not the canonical relational loss).
    #[serde(default)]
    pub lambda_rkd: f64,
    /// λ_war, weight alignment regularization strength.
    #[serde(default = "default_lambda_war")]
    pub lambda_war: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default)]
    pub debias_mode: DebiasMode,
    /// Scale λ3 by sqrt(K_old/K_new), the baseline convention for balancing
    /// distillation against new-task learning as tasks accumulate.
    #[serde(default = "default_true")]
    pub scale_hkd_by_task_ratio: bool,
    /// Study flag: align each group to its own mean norm instead of the
    /// written cross-pairing.
    #[serde(default)]
    pub war_same_group: bool,
}

fn default_epochs() -> usize {
    200
}

fn default_batch() -> usize {
    128
}

fn default_one() -> f64 {
    1.0
}

fn default_lambda_war() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::Sgd { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(CoreError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("train.batch_size must be >= 2".into()));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Config("train.temperature must be > 0".into()));
        }
        if self.lambda_war < 0.0 {
            return Err(CoreError::Config("train.lambda_war must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Hard knowledge distillation: `(1/K_old) · mean_B ‖old − new_slice‖₁`.
pub fn hkd_loss_var(tape: &Tape, old_logits: &Var, new_old_slice: &Var) -> Result<Var> {
    let (a, b) = (old_logits.shape(), new_old_slice.shape());
    if a != b {
        return Err(CoreError::ShapeMismatch(format!("hkd shapes {a:?} vs {b:?}")));
    }
    let (batch, k_old) = (a[0], a[1]);
    let _ = tape;
    Ok(old_logits
        .sub(new_old_slice)
        .abs()
        .sum_all()
        .mul_scalar(1.0 / (batch * k_old) as f64))
}

/// Value wrapper over [`hkd_loss_var`].
pub fn hkd_loss(old_logits: &Array2<f64>, new_old_slice: &Array2<f64>) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.input(old_logits.clone().into_dyn());
    let b = tape.input(new_old_slice.clone().into_dyn());
    Ok(hkd_loss_var(&tape, &a, &b)?.scalar_value())
}

/// Local cross-entropy: temperature-scaled CE with softmax over the current
/// task's logit slice only. Labels are task-local (`0..K_new`).
pub fn lce_loss_var(
    tape: &Tape,
    slice_logits: &Var,
    local_labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let shape = slice_logits.shape();
    let (b, k) = (shape[0], shape[1]);
    if local_labels.len() != b {
        return Err(CoreError::ShapeMismatch(format!(
            "{} labels for {b} logit rows",
            local_labels.len()
        )));
    }
    let mut onehot = Array2::<f64>::zeros((b, k));
    for (i, &y) in local_labels.iter().enumerate() {
        if y >= k {
            return Err(CoreError::InvalidArgument(format!(
                "label {y} outside the local class range 0..{k}"
            )));
        }
        onehot[(i, y)] = 1.0;
    }
    let onehot_c = tape.constant(onehot.into_dyn());
    let ls = slice_logits.mul_scalar(1.0 / temperature).log_softmax_rows();
    Ok(ls.mul(&onehot_c).sum_all().mul_scalar(-1.0 / b as f64))
}

/// Value wrapper over [`lce_loss_var`].
pub fn lce_loss(
    slice_logits: &Array2<f64>,
    local_labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.input(slice_logits.clone().into_dyn());
    Ok(lce_loss_var(&tape, &v, local_labels, temperature)?.scalar_value())
}

fn check_partition(k: usize, old_ids: &[usize], new_ids: &[usize]) -> Result<()> {
    if old_ids.is_empty() || new_ids.is_empty() {
        return Err(CoreError::InvalidArgument(
            "war/wa need non-empty old and new groups".into(),
        ));
    }
    let mut seen = vec![false; k];
    for &i in old_ids.iter().chain(new_ids) {
        if i >= k || seen[i] {
            return Err(CoreError::InvalidArgument(format!(
                "class groups must partition rows 0..{k} (row {i})"
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|&s| !s) {
        return Err(CoreError::InvalidArgument(
            "class groups must cover every classifier row".into(),
        ));
    }
    Ok(())
}

/// Weight alignment regularization on the classifier matrix.
///
/// With the written cross-pairing, old rows are pulled toward the new-group
/// mean norm and new rows toward the old-group mean norm; the group means
/// are detached (moving constants), so only individual norms carry gradient.
pub fn war_loss_var(
    tape: &Tape,
    w: &Var,
    old_ids: &[usize],
    new_ids: &[usize],
    same_group: bool,
) -> Result<Var> {
    let k = w.shape()[0];
    check_partition(k, old_ids, new_ids)?;
    let norms_v = w.value().into_dimensionality::<Ix2>().unwrap();
    let norm_of = |i: usize| norms_v.row(i).mapv(|x| x * x).sum().sqrt();
    let mean_of =
        |ids: &[usize]| ids.iter().map(|&i| norm_of(i)).sum::<f64>() / ids.len() as f64;
    let (n_old, n_new) = (mean_of(old_ids), mean_of(new_ids));

    let mut target = ndarray::Array1::<f64>::zeros(k);
    for &i in old_ids {
        target[i] = if same_group { n_old } else { n_new };
    }
    for &i in new_ids {
        target[i] = if same_group { n_new } else { n_old };
    }
    war_loss_with_fixed_targets(tape, w, &target)
}

/// WAR with explicit per-row norm targets held constant. The group means of
/// [`war_loss_var`] are evaluated here exactly once per call, so gradients
/// flow through individual norms only.
pub fn war_loss_with_fixed_targets(
    tape: &Tape,
    w: &Var,
    target: &ndarray::Array1<f64>,
) -> Result<Var> {
    let k = w.shape()[0];
    if target.len() != k {
        return Err(CoreError::ShapeMismatch(format!(
            "{} norm targets for {k} rows",
            target.len()
        )));
    }
    let norms = w.square().sum_axis(1).sqrt(); // [K]
    let target_c = tape.constant(target.clone().into_dyn());
    Ok(norms.sub(&target_c).abs().sum_all().mul_scalar(1.0 / k as f64))
}

/// Value wrapper over [`war_loss_var`] (written cross-pairing).
pub fn war_loss(w: &Array2<f64>, old_ids: &[usize], new_ids: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.input(w.clone().into_dyn());
    Ok(war_loss_var(&tape, &v, old_ids, new_ids, false)?.scalar_value())
}

/// Weight aligning: rescale new-class rows by `γ = mean(n_old)/mean(n_new)`.
/// Returns the aligned matrix and γ.
pub fn wa_postprocess(
    w: &Array2<f64>,
    old_ids: &[usize],
    new_ids: &[usize],
) -> Result<(Array2<f64>, f64)> {
    check_partition(w.nrows(), old_ids, new_ids)?;
    let norm_of = |i: usize| w.row(i).mapv(|x| x * x).sum().sqrt();
    let mean_old = old_ids.iter().map(|&i| norm_of(i)).sum::<f64>() / old_ids.len() as f64;
    let mean_new = new_ids.iter().map(|&i| norm_of(i)).sum::<f64>() / new_ids.len() as f64;
    if mean_new == 0.0 {
        return Err(CoreError::InvalidArgument(
            "new-class mean norm is zero; cannot align".into(),
        ));
    }
    let gamma = mean_old / mean_new;
    let mut out = w.clone();
    for &i in new_ids {
        let scaled = &out.row(i) * gamma;
        out.row_mut(i).assign(&scaled);
    }
    Ok((out, gamma))
}

/// Apply weight aligning to a model's classifier in place. New-class biases
/// are scaled by the same γ so within-block logit rankings are preserved.
pub fn apply_weight_aligning(
    model: &mut ModelBundle,
    old_ids: &[usize],
    new_ids: &[usize],
) -> Result<f64> {
    let w = model.classifier_weights();
    let (aligned, gamma) = wa_postprocess(&w, old_ids, new_ids)?;
    model.params.insert("classifier.w".into(), aligned.into_dyn());
    if let Some(b) = model.params.get_mut("classifier.b") {
        for &i in new_ids {
            b[[i]] *= gamma;
        }
    }
    Ok(gamma)
}

/// Split cross-entropy: independent local CE on the generated old-class
/// block and the real new-class block.
pub fn sce_loss_var(
    tape: &Tape,
    synth_old_slice: &Var,
    synth_labels: &[usize],
    real_new_slice: &Var,
    real_labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let a = lce_loss_var(tape, synth_old_slice, synth_labels, temperature)?;
    let b = lce_loss_var(tape, real_new_slice, real_labels, temperature)?;
    Ok(a.add(&b))
}

/// Value wrapper over [`sce_loss_var`].
pub fn sce_loss(
    synth_old_slice: &Array2<f64>,
    synth_labels: &[usize],
    real_new_slice: &Array2<f64>,
    real_labels: &[usize],
    temperature: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.input(synth_old_slice.clone().into_dyn());
    let b = tape.input(real_new_slice.clone().into_dyn());
    Ok(sce_loss_var(&tape, &a, synth_labels, &b, real_labels, temperature)?.scalar_value())
}

/// Relational-distillation hook applied to real-batch features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RkdHook {
    /// No relational term.
    #[default]
    Zero,
    /// Simplified angle-preserving stand-in (not the canonical relational
    /// loss): match cosine-similarity matrices of old and new features.
    CosineSimilarity,
}

fn row_normalize(v: &Var) -> Var {
    let norms = v.square().sum_axis_keep(1).sqrt().add_scalar(1e-12);
    v.div(&norms)
}

/// Evaluate the relational hook: `old_feats` are treated as constants.
pub fn rkd_hook_var(tape: &Tape, hook: RkdHook, old_feats: &Array2<f64>, new_feats: &Var) -> Var {
    match hook {
        RkdHook::Zero => tape.scalar(0.0),
        RkdHook::CosineSimilarity => {
            let old = tape.constant(old_feats.clone().into_dyn());
            let so = {
                let n = row_normalize(&old);
                n.matmul(&n.t())
            };
            let sn = {
                let n = row_normalize(new_feats);
                n.matmul(&n.t())
            };
            sn.sub(&so).square().mean_all()
        }
    }
}

// ---------------------------------------------------------------------------
// task training loop
// ---------------------------------------------------------------------------

/// Per-epoch averages logged by [`train_task`].
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_hkd: f64,
    pub l_lce: f64,
    pub l_rkd: f64,
    pub l_war: f64,
    pub total: f64,
    pub train_acc: f64,
}

/// Result of one task's training stage.
pub struct TaskTrainOutcome {
    pub model: ModelBundle,
    pub epoch_log: Vec<EpochLog>,
    /// γ applied by the `wa` debias mode, when used.
    pub wa_gamma: Option<f64>,
}

/// Inputs to one task's training stage.
pub struct TaskTrainContext<'a> {
    /// Frozen old model and the generator trained this task; `None` on the
    /// first task.
    pub old: Option<(&'a ModelBundle, &'a GeneratorBundle)>,
    /// Current task's classifier rows `[start, end)`.
    pub task_rows: (usize, usize),
    /// Real training data of the current task (labels are global rows).
    pub train_data: &'a DataSet,
    pub cfg: &'a TrainConfig,
    pub rkd_hook: RkdHook,
    pub seed: u64,
}

/// Train the (already expanded) new model for one task.
///
/// Each iteration draws one real batch and, past the first task, one
/// generated batch of the same size. The frozen old model only ever runs
/// eval-mode forward passes.
pub fn train_task(mut model: ModelBundle, ctx: &TaskTrainContext<'_>) -> Result<TaskTrainOutcome> {
    ctx.cfg.validate()?;
    let (k_start, k_end) = ctx.task_rows;
    let k_new = k_end - k_start;
    if k_end != model.class_count() || k_new == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "task rows {k_start}..{k_end} do not match classifier with {} rows",
            model.class_count()
        )));
    }
    if k_start > 0 && ctx.old.is_none() {
        return Err(CoreError::InvalidArgument(
            "tasks beyond the first need the old model and a generator for replay".into(),
        ));
    }
    if ctx.train_data.is_empty() {
        return Err(CoreError::InvalidArgument("no training data for this task".into()));
    }

    let (base_lr, momentum, weight_decay) = match ctx.cfg.optimizer {
        OptimizerSpec::Sgd { lr, momentum, weight_decay } => (lr, momentum, weight_decay),
        OptimizerSpec::Adam { .. } => {
            return Err(CoreError::Config("training stage uses momentum SGD".into()))
        }
    };
    let mut opt = SgdMomentum::new(base_lr, momentum, weight_decay);

    let lambda_hkd_eff = if ctx.cfg.scale_hkd_by_task_ratio && k_start > 0 {
        ctx.cfg.lambda_hkd * (k_start as f64 / k_new as f64).sqrt()
    } else {
        ctx.cfg.lambda_hkd
    };
    let old_ids: Vec<usize> = (0..k_start).collect();
    let new_ids: Vec<usize> = (k_start..k_end).collect();
    let use_war = ctx.cfg.debias_mode == DebiasMode::War && k_start > 0;

    let mut noise_rng = rng::stream(ctx.seed, &["train", "noise"]);
    let mut epoch_log = Vec::with_capacity(ctx.cfg.epochs);

    for epoch in 0..ctx.cfg.epochs {
        opt.lr = ctx.cfg.lr_schedule.lr_at(base_lr, epoch);
        let mut shuffle_rng =
            rng::stream(ctx.seed, &["train", "shuffle", &epoch.to_string()]);
        let batches =
            epoch_batches(ctx.train_data.len(), ctx.cfg.batch_size, &mut shuffle_rng);
        let mut sums = [0.0f64; 5]; // hkd, lce, rkd, war, total
        let mut n_batches = 0usize;

        for idx in &batches {
            if idx.len() < 2 {
                continue; // BN needs at least two samples
            }
            let (real_inputs, real_labels) = ctx.train_data.gather(idx);
            let local_labels: Vec<usize> =
                real_labels.iter().map(|&y| y - k_start).collect();

            let tape = Tape::new();
            let bound = BoundParams::bind(&tape, &model.params);
            let real_x = tape.input(real_inputs);
            let (real_feats, real_logits) = model.forward_train(&tape, &bound, &real_x)?;
            let real_slice = real_logits.narrow(1, k_start, k_new);

            let mut l_hkd = tape.scalar(0.0);
            let mut l_lce = tape.scalar(0.0);
            let mut l_rkd = tape.scalar(0.0);
            let mut l_war = tape.scalar(0.0);

            if let Some((old_model, generator)) = ctx.old {
                let use_sce = ctx.cfg.debias_mode == DebiasMode::Sce;
                let needs_synth = use_sce || ctx.cfg.lambda_hkd != 0.0;
                if needs_synth {
                    let synth = generator.sample(idx.len(), &mut noise_rng)?;
                    let old_logits = old_model.forward_logits(&synth)?;
                    let synth_x = tape.input(synth);
                    let (_, synth_logits) = model.forward_train(&tape, &bound, &synth_x)?;
                    let synth_slice = synth_logits.narrow(1, 0, k_start);
                    if use_sce {
                        let pseudo = argmax_rows(&old_logits);
                        // reported under lce in the epoch log
                        l_lce = sce_loss_var(
                            &tape,
                            &synth_slice,
                            &pseudo,
                            &real_slice,
                            &local_labels,
                            ctx.cfg.temperature,
                        )?;
                    } else {
                        let old_c = tape.constant(old_logits.into_dyn());
                        l_hkd = hkd_loss_var(&tape, &old_c, &synth_slice)?;
                    }
                }
                if !use_sce {
                    l_lce =
                        lce_loss_var(&tape, &real_slice, &local_labels, ctx.cfg.temperature)?;
                }

                if ctx.cfg.lambda_rkd != 0.0 && ctx.rkd_hook != RkdHook::Zero {
                    let old_feats_real = old_model.forward_features(&real_x.value())?;
                    l_rkd = rkd_hook_var(&tape, ctx.rkd_hook, &old_feats_real, &real_feats);
                }
                if use_war {
                    l_war = war_loss_var(
                        &tape,
                        &bound.get("classifier.w"),
                        &old_ids,
                        &new_ids,
                        ctx.cfg.war_same_group,
                    )?;
                }
            } else {
                l_lce = lce_loss_var(&tape, &real_slice, &local_labels, ctx.cfg.temperature)?;
            }

            let mut total = l_lce.mul_scalar(ctx.cfg.lambda_lce);
            if ctx.old.is_some() && ctx.cfg.debias_mode != DebiasMode::Sce {
                total = total.add(&l_hkd.mul_scalar(lambda_hkd_eff));
            }
            if ctx.cfg.lambda_rkd != 0.0 {
                total = total.add(&l_rkd.mul_scalar(ctx.cfg.lambda_rkd));
            }
            if use_war {
                total = total.add(&l_war.mul_scalar(ctx.cfg.lambda_war));
            }

            let total_v = total.scalar_value();
            if !total_v.is_finite() {
                return Err(CoreError::NonFinite {
                    stage: "training".into(),
                    detail: format!("epoch {epoch}: total loss {total_v}"),
                });
            }
            let grads = bound.grads(&backward(&total));
            opt.step(&mut model.params, &grads);

            sums[0] += l_hkd.scalar_value();
            sums[1] += l_lce.scalar_value();
            sums[2] += l_rkd.scalar_value();
            sums[3] += l_war.scalar_value();
            sums[4] += total_v;
            n_batches += 1;
        }

        let nb = n_batches.max(1) as f64;
        epoch_log.push(EpochLog {
            epoch,
            l_hkd: sums[0] / nb,
            l_lce: sums[1] / nb,
            l_rkd: sums[2] / nb,
            l_war: sums[3] / nb,
            total: sums[4] / nb,
            train_acc: task_train_accuracy(&model, ctx.train_data)?,
        });
    }

    let wa_gamma = if ctx.cfg.debias_mode == DebiasMode::Wa && k_start > 0 {
        Some(apply_weight_aligning(&mut model, &old_ids, &new_ids)?)
    } else {
        None
    };

    Ok(TaskTrainOutcome { model, epoch_log, wa_gamma })
}

fn task_train_accuracy(model: &ModelBundle, data: &DataSet) -> Result<f64> {
    let mut correct = 0usize;
    let mut start = 0usize;
    let n = data.len();
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (inputs, labels) = data.gather(&idx);
        let logits = model.forward_logits(&inputs)?;
        let pred = argmax_rows(&logits);
        for (i, &y) in labels.iter().enumerate() {
            if pred[i] == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}
