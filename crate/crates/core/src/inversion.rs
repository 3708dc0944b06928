//! Inversion stage: train a fresh generator against the frozen old model.
//!
//! The objective is `L_ce + λ1·L_stat + λ2·L_div + λ_dce·L_dce`:
//!
//! * `L_ce` — temperature-scaled cross-entropy of old-model logits against
//!   their own argmax (generated samples should classify confidently);
//! * `L_stat` — per-channel Gaussian KL from each BN layer's stored running
//!   statistics to the batch statistics of the generated data;
//! * `L_div` — class-diversity term on the batch-mean softmax;
//! * `L_dce` — alignment of generated feature statistics to the tied-Gaussian
//!   statistics stored by the previous estimation stage.
//!
//! The old model is strictly read-only here: forward passes run in eval mode
//! and never update its BN running statistics.

use crate::error::{CoreError, Result};
use crate::model::{GeneratorBundle, GeneratorSpec, ModelBundle};
use crate::nn::{Adam, BoundParams, OptimizerSpec};
use crate::rng;
use crate::stats::{dce_loss_var, ClassStatistics};
use crate::tensor::{argmax_rows, backward, Tape, Var};
use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};

/// Sign convention for the diversity term.
///
/// The written objective adds the entropy of the batch-mean softmax to a
/// minimized loss, which as stated would *reduce* class balance; predecessor
/// methods maximize that entropy. `MaximizeEntropy` (default) returns the
/// negative entropy so minimizing it spreads pseudo-labels; `Literal` keeps
/// the written sign for study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversitySign {
    #[default]
    MaximizeEntropy,
    Literal,
}

/// Inversion-stage hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerSpec,
    /// λ1, weight of the BN statistics-alignment loss.
    #[serde(default = "default_one")]
    pub lambda_stat: f64,
    /// λ2, weight of the class-diversity loss.
    #[serde(default = "default_one")]
    pub lambda_div: f64,
    /// λ_dce, weight of the data-consistency enhancement loss.
    #[serde(default = "default_lambda_dce")]
    pub lambda_dce: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default)]
    pub diversity_sign: DiversitySign,
    /// Dump a generated sample grid every N steps (image data only).
    #[serde(default)]
    pub dump_samples_every: Option<usize>,
}

fn default_steps() -> usize {
    5000
}

fn default_batch() -> usize {
    128
}

fn default_one() -> f64 {
    1.0
}

fn default_lambda_dce() -> f64 {
    0.05
}

fn default_optimizer() -> OptimizerSpec {
    OptimizerSpec::Adam { lr: 0.001 }
}

impl Default for InversionConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(CoreError::Config("inversion.steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("inversion.batch_size must be >= 2".into()));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::Config("inversion.temperature must be > 0".into()));
        }
        if self.lambda_dce < 0.0 || self.lambda_stat < 0.0 || self.lambda_div < 0.0 {
            return Err(CoreError::Config("inversion loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Cross-entropy of logits against their own row argmax, with temperature.
pub fn inversion_ce_loss_var(tape: &Tape, old_logits: &Var, temperature: f64) -> Result<Var> {
    let shape = old_logits.shape();
    let (b, k) = (shape[0], shape[1]);
    if k < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "inversion CE needs >= 2 old classes, got {k}"
        )));
    }
    let values = old_logits.value().into_dimensionality::<Ix2>().unwrap();
    let pseudo = argmax_rows(&values);
    let mut onehot = Array2::<f64>::zeros((b, k));
    for (i, &y) in pseudo.iter().enumerate() {
        onehot[(i, y)] = 1.0;
    }
    let onehot_c = tape.constant(onehot.into_dyn());
    let ls = old_logits.mul_scalar(1.0 / temperature).log_softmax_rows();
    Ok(ls.mul(&onehot_c).sum_all().mul_scalar(-1.0 / b as f64))
}

/// Value wrapper over [`inversion_ce_loss_var`].
pub fn inversion_ce_loss(old_logits: &Array2<f64>, temperature: f64) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.input(old_logits.clone().into_dyn());
    Ok(inversion_ce_loss_var(&tape, &v, temperature)?.scalar_value())
}

/// Per-channel Gaussian KL from stored running statistics to batch
/// statistics, channel-averaged within each layer and summed over layers:
/// `KL(N(μ_l, σ²_l) ‖ N(μ̂_l, σ̂²_l))`.
pub fn bn_stat_loss_var(
    tape: &Tape,
    running: &[(Array1<f64>, Array1<f64>)],
    batch: &[(Var, Var)],
) -> Result<Var> {
    if running.len() != batch.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} running layers vs {} batch layers",
            running.len(),
            batch.len()
        )));
    }
    let mut total = tape.scalar(0.0);
    for ((mu_r, var_r), (mu_b, var_b)) in running.iter().zip(batch) {
        let c = mu_r.len();
        if mu_b.shape()[0] != c || var_r.len() != c {
            return Err(CoreError::ShapeMismatch("BN layer channel mismatch".into()));
        }
        if var_r.iter().any(|&v| v <= 0.0) {
            return Err(CoreError::InvalidArgument(
                "running variance must be positive".into(),
            ));
        }
        if var_b.value().iter().any(|&v| v <= 0.0) {
            return Err(CoreError::InvalidArgument(
                "batch variance must be positive".into(),
            ));
        }
        let mu_r_c = tape.constant(mu_r.clone().into_dyn());
        let var_r_c = tape.constant(var_r.clone().into_dyn());
        // 0.5·ln(σ̂²/σ²) + (σ² + (μ−μ̂)²)/(2σ̂²) − 0.5, per channel
        let log_ratio = var_b.ln().sub(&var_r_c.ln()).mul_scalar(0.5);
        let num = var_r_c.add(&mu_r_c.sub(mu_b).square());
        let frac = num.div(&var_b.mul_scalar(2.0));
        let kl = log_ratio.add(&frac).add_scalar(-0.5);
        total = total.add(&kl.mean_all());
    }
    Ok(total)
}

/// Value wrapper over [`bn_stat_loss_var`].
pub fn bn_stat_loss(
    running: &[(Array1<f64>, Array1<f64>)],
    batch: &[(Array1<f64>, Array1<f64>)],
) -> Result<f64> {
    let tape = Tape::new();
    let batch_vars: Vec<(Var, Var)> = batch
        .iter()
        .map(|(m, v)| {
            (tape.input(m.clone().into_dyn()), tape.input(v.clone().into_dyn()))
        })
        .collect();
    Ok(bn_stat_loss_var(&tape, running, &batch_vars)?.scalar_value())
}

fn check_probability_vector(p: &Array1<f64>) -> Result<()> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CoreError::InvalidArgument(
            "probability vector has negative or non-finite entries".into(),
        ));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(CoreError::InvalidArgument(format!(
            "probability vector sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Diversity term on the batch-mean softmax vector.
///
/// With [`DiversitySign::MaximizeEntropy`] this is the negative entropy
/// `Σ p ln p` (minimum `-ln K` at the uniform vector); `Literal` negates it.
pub fn diversity_loss_var(tape: &Tape, mean_softmax: &Var, sign: DiversitySign) -> Result<Var> {
    let p = mean_softmax.value().into_dimensionality::<ndarray::Ix1>().map_err(|_| {
        CoreError::ShapeMismatch("diversity loss expects a probability vector".into())
    })?;
    check_probability_vector(&p)?;
    let _ = tape;
    // x·ln(x + tiny) is exact for x = 0 and bitwise identical to x·ln x for
    // any x of practical magnitude
    let neg_entropy = mean_softmax.mul(&mean_softmax.add_scalar(1e-300).ln()).sum_all();
    Ok(match sign {
        DiversitySign::MaximizeEntropy => neg_entropy,
        DiversitySign::Literal => neg_entropy.neg(),
    })
}

/// Value wrapper over [`diversity_loss_var`] (maximize-entropy sign).
pub fn diversity_loss(mean_softmax: &Array1<f64>) -> Result<f64> {
    let tape = Tape::new();
    let v = tape.input(mean_softmax.clone().into_dyn());
    Ok(diversity_loss_var(&tape, &v, DiversitySign::MaximizeEntropy)?.scalar_value())
}

// ---------------------------------------------------------------------------
// generator training
// ---------------------------------------------------------------------------

/// Per-step loss components of an inversion run.
#[derive(Debug, Clone, Serialize)]
pub struct InversionStepLog {
    pub step: usize,
    pub l_ce: f64,
    pub l_stat: f64,
    pub l_div: f64,
    pub l_dce: f64,
    pub total: f64,
}

/// A trained generator plus its loss curve.
pub struct InversionOutcome {
    pub generator: GeneratorBundle,
    pub curve: Vec<InversionStepLog>,
}

/// Observer invoked with generated batches for periodic sample dumps.
pub type SampleObserver<'a> = &'a mut dyn FnMut(usize, &ndarray::ArrayD<f64>);

/// Train a fresh generator against the frozen `old_model`.
///
/// `stored_stats` must be present when `lambda_dce > 0`. DCE is applied to
/// the pseudo-labelled rows whose class exists in the stored statistics
/// (classes absent from a batch simply contribute nothing). The old model's
/// parameters and BN running statistics are unchanged on return.
pub fn train_generator(
    old_model: &ModelBundle,
    stored_stats: Option<&ClassStatistics>,
    gen_spec: &GeneratorSpec,
    cfg: &InversionConfig,
    seed: u64,
    mut observer: Option<SampleObserver<'_>>,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    if cfg.lambda_dce > 0.0 && stored_stats.is_none() {
        return Err(CoreError::InvalidArgument(
            "lambda_dce > 0 requires stored class statistics".into(),
        ));
    }
    if old_model.class_count() < 2 {
        return Err(CoreError::InvalidArgument(
            "inversion needs an old model with >= 2 classes".into(),
        ));
    }

    let mut generator = GeneratorBundle::new(
        gen_spec.clone(),
        rng::derive_seed(seed, &["inversion", "generator-init"]),
    )?;
    let mut opt = match cfg.optimizer {
        OptimizerSpec::Adam { lr } => Adam::new(lr),
        OptimizerSpec::Sgd { .. } => {
            return Err(CoreError::Config(
                "inversion stage uses the adaptive-moment optimizer".into(),
            ))
        }
    };
    let mut noise_rng = rng::stream(seed, &["inversion", "noise"]);
    let running_bn = old_model.bn_stats();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &generator.params);
        let noise = tape.input(rng::normal_array(
            &mut noise_rng,
            &[cfg.batch_size, generator.noise_dim()],
        ));
        let samples = generator.forward_train(&bound, &noise);

        let mut bn_sink = Vec::new();
        let (feats, logits) =
            old_model.forward_frozen(&tape, &samples, Some(&mut bn_sink))?;

        let l_ce = inversion_ce_loss_var(&tape, &logits, cfg.temperature)?;
        let l_stat = bn_stat_loss_var(&tape, &running_bn, &bn_sink)?;
        let p_mean = logits.softmax_rows().mean_axis_keep(0).reshape(&[old_model.class_count()]);
        let l_div = diversity_loss_var(&tape, &p_mean, cfg.diversity_sign)?;

        let (l_dce, dce_value) = if cfg.lambda_dce > 0.0 {
            let stored = stored_stats.expect("checked above");
            let pseudo = argmax_rows(&logits.value().into_dimensionality::<Ix2>().unwrap());
            let keep: Vec<usize> =
                (0..pseudo.len()).filter(|&i| stored.means.contains_key(&pseudo[i])).collect();
            if keep.len() >= 2 {
                let mut select = Array2::<f64>::zeros((keep.len(), cfg.batch_size));
                let mut labels = Vec::with_capacity(keep.len());
                for (row, &i) in keep.iter().enumerate() {
                    select[(row, i)] = 1.0;
                    labels.push(pseudo[i]);
                }
                let sub = tape.constant(select.into_dyn()).matmul(&feats);
                let l = dce_loss_var(&tape, &sub, &labels, stored)?;
                let v = l.scalar_value();
                (Some(l), v)
            } else {
                (None, 0.0)
            }
        } else {
            (None, 0.0)
        };

        let mut total = l_ce.add(&l_stat.mul_scalar(cfg.lambda_stat));
        total = total.add(&l_div.mul_scalar(cfg.lambda_div));
        if let Some(l) = &l_dce {
            total = total.add(&l.mul_scalar(cfg.lambda_dce));
        }

        let log = InversionStepLog {
            step,
            l_ce: l_ce.scalar_value(),
            l_stat: l_stat.scalar_value(),
            l_div: l_div.scalar_value(),
            l_dce: dce_value,
            total: total.scalar_value(),
        };
        if !log.total.is_finite() {
            return Err(CoreError::NonFinite {
                stage: "inversion".into(),
                detail: format!("step {step}: total loss {}", log.total),
            });
        }
        let grads = bound.grads(&backward(&total));
        opt.step(&mut generator.params, &grads);

        if let (Some(obs), Some(every)) = (observer.as_deref_mut(), cfg.dump_samples_every) {
            if every > 0 && (step + 1) % every == 0 {
                obs(step + 1, &samples.value());
            }
        }
        curve.push(log);
    }

    Ok(InversionOutcome { generator, curve })
}
