//! Classification-model and generator abstractions.
//!
//! A [`ModelBundle`] is a feature extractor `h(·)` plus an expandable linear
//! classifier `g(·)` whose weight rows follow global class order (rows for
//! task j precede rows for task j+1). Batch-normalization running statistics
//! are addressable per layer, in traversal order, and a frozen model can run
//! forward passes that capture differentiable batch statistics without being
//! mutated.
//!
//! A [`GeneratorBundle`] maps noise vectors to synthetic samples with the
//! same shape as real data. Generators are created fresh for each task's
//! inversion stage and discarded after its training stage.

use crate::error::{CoreError, Result};
use crate::nn::{
    self, batch_norm, conv2d, linear, BnPass, BnRunning, BoundParams, ParamMap,
};
use crate::rng;
use crate::tensor::{Tape, UnfoldSpec, Var};
use ndarray::{Array1, Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const K3: UnfoldSpec = UnfoldSpec { kernel: (3, 3), stride: 1, pad: 1 };
const K1: UnfoldSpec = UnfoldSpec { kernel: (1, 1), stride: 1, pad: 0 };

/// Feature-extractor architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Pass-through: features are the input vector (oracle pipelines).
    Identity { dim: usize },
    /// Single linear map (oracle pipelines).
    Linear { in_dim: usize, out_dim: usize },
    /// MLP with optional batch norm after each hidden layer.
    Mlp { in_dim: usize, hidden: Vec<usize>, out_dim: usize, batch_norm: bool },
    /// Small convolutional backbone: per block conv3x3 → BN → ReLU → 2x2
    /// average pool; then global average pool and a linear projection to the
    /// feature dimension. `residual: true` switches blocks to two-conv
    /// residual blocks (the full-scale preset).
    Conv {
        in_shape: [usize; 3],
        channels: Vec<usize>,
        feature_dim: usize,
        #[serde(default)]
        residual: bool,
    },
}

impl ExtractorSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            ExtractorSpec::Identity { dim } => *dim,
            ExtractorSpec::Linear { out_dim, .. } => *out_dim,
            ExtractorSpec::Mlp { out_dim, .. } => *out_dim,
            ExtractorSpec::Conv { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ExtractorSpec::Identity { dim } => vec![*dim],
            ExtractorSpec::Linear { in_dim, .. } => vec![*in_dim],
            ExtractorSpec::Mlp { in_dim, .. } => vec![*in_dim],
            ExtractorSpec::Conv { in_shape, .. } => in_shape.to_vec(),
        }
    }

    /// BN layer names in forward-traversal order.
    pub fn bn_layer_names(&self) -> Vec<String> {
        match self {
            ExtractorSpec::Identity { .. } | ExtractorSpec::Linear { .. } => vec![],
            ExtractorSpec::Mlp { hidden, batch_norm, .. } => {
                if *batch_norm {
                    (0..hidden.len()).map(|i| format!("ext.bn{i}")).collect()
                } else {
                    vec![]
                }
            }
            ExtractorSpec::Conv { channels, residual, .. } => {
                let mut names = Vec::new();
                for i in 0..channels.len() {
                    if *residual {
                        names.push(format!("ext.bn{i}a"));
                        names.push(format!("ext.bn{i}b"));
                    } else {
                        names.push(format!("ext.bn{i}"));
                    }
                }
                names
            }
        }
    }

    fn init_params(&self, params: &mut ParamMap, rng: &mut rng::Stream) {
        match self {
            ExtractorSpec::Identity { .. } => {}
            ExtractorSpec::Linear { in_dim, out_dim } => {
                nn::init_linear(params, rng, "ext.fc", *in_dim, *out_dim, true);
            }
            ExtractorSpec::Mlp { in_dim, hidden, out_dim, batch_norm } => {
                let mut prev = *in_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    nn::init_linear(params, rng, &format!("ext.fc{i}"), prev, h, true);
                    if *batch_norm {
                        nn::init_batch_norm(params, &format!("ext.bn{i}"), h);
                    }
                    prev = h;
                }
                nn::init_linear(params, rng, "ext.out", prev, *out_dim, true);
            }
            ExtractorSpec::Conv { in_shape, channels, feature_dim, residual } => {
                let mut prev = in_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    if *residual {
                        nn::init_conv(params, rng, &format!("ext.conv{i}a"), prev, c, (3, 3), false);
                        nn::init_batch_norm(params, &format!("ext.bn{i}a"), c);
                        nn::init_conv(params, rng, &format!("ext.conv{i}b"), c, c, (3, 3), false);
                        nn::init_batch_norm(params, &format!("ext.bn{i}b"), c);
                        if prev != c {
                            nn::init_conv(params, rng, &format!("ext.conv{i}p"), prev, c, (1, 1), false);
                        }
                    } else {
                        nn::init_conv(params, rng, &format!("ext.conv{i}"), prev, c, (3, 3), true);
                        nn::init_batch_norm(params, &format!("ext.bn{i}"), c);
                    }
                    prev = c;
                }
                let last = *channels.last().unwrap_or(&in_shape[0]);
                nn::init_linear(params, rng, "ext.out", last, *feature_dim, true);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        p: &BoundParams,
        x: &Var,
        running: &mut BTreeMap<String, BnRunning>,
        train: bool,
        update_running: bool,
        capture: &mut Option<&mut Vec<(Var, Var)>>,
    ) -> Var {
        let bn = |name: &str, v: &Var, running: &mut BTreeMap<String, BnRunning>,
                  capture: &mut Option<&mut Vec<(Var, Var)>>| {
            let r = running.get_mut(name).expect("bn running stats missing");
            let mut pass = BnPass {
                train,
                update_running,
                momentum: BN_MOMENTUM,
                capture: capture.as_deref_mut(),
            };
            batch_norm(p, name, v, r, &mut pass, BN_EPS)
        };
        match self {
            ExtractorSpec::Identity { .. } => x.clone(),
            ExtractorSpec::Linear { .. } => linear(p, "ext.fc", x),
            ExtractorSpec::Mlp { hidden, batch_norm: use_bn, .. } => {
                let mut h = x.clone();
                for i in 0..hidden.len() {
                    h = linear(p, &format!("ext.fc{i}"), &h);
                    if *use_bn {
                        h = bn(&format!("ext.bn{i}"), &h, running, capture);
                    }
                    h = h.relu();
                }
                linear(p, "ext.out", &h)
            }
            ExtractorSpec::Conv { channels, residual, .. } => {
                let mut h = x.clone();
                for (i, _) in channels.iter().enumerate() {
                    if *residual {
                        let t = conv2d(p, &format!("ext.conv{i}a"), &h, K3);
                        let t = bn(&format!("ext.bn{i}a"), &t, running, capture).relu();
                        let t = conv2d(p, &format!("ext.conv{i}b"), &t, K3);
                        let t = bn(&format!("ext.bn{i}b"), &t, running, capture);
                        let skip = if p.contains(&format!("ext.conv{i}p.w")) {
                            conv2d(p, &format!("ext.conv{i}p"), &h, K1)
                        } else {
                            h.clone()
                        };
                        h = t.add(&skip).relu().avg_pool2();
                    } else {
                        let t = conv2d(p, &format!("ext.conv{i}"), &h, K3);
                        h = bn(&format!("ext.bn{i}"), &t, running, capture).relu().avg_pool2();
                    }
                }
                linear(p, "ext.out", &h.global_avg_pool())
            }
        }
    }
}

/// Architecture of a classification model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub extractor: ExtractorSpec,
    /// Include a bias vector in the classifier. Biases are part of g(·) but
    /// excluded from the per-class weight norms `n_k`.
    #[serde(default = "default_true")]
    pub classifier_bias: bool,
}

fn default_true() -> bool {
    true
}

/// Feature extractor + expandable linear classifier with BN running stats.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ModelArch,
    pub params: ParamMap,
    pub bn_running: BTreeMap<String, BnRunning>,
    class_count: usize,
}

impl ModelBundle {
    /// Random-initialize a model with `class_count` classifier rows.
    pub fn new(arch: ModelArch, class_count: usize, seed: u64) -> Result<Self> {
        if class_count == 0 {
            return Err(CoreError::InvalidArgument("class_count must be >= 1".into()));
        }
        let mut stream = rng::stream(seed, &["model-init"]);
        let mut params = ParamMap::new();
        arch.extractor.init_params(&mut params, &mut stream);
        let d = arch.extractor.feature_dim();
        nn::init_linear(&mut params, &mut stream, "classifier", d, class_count, arch.classifier_bias);
        let bn_running = arch
            .extractor
            .bn_layer_names()
            .into_iter()
            .map(|name| {
                let ch = params[&format!("{name}.gamma")].len();
                (name, BnRunning::new(ch))
            })
            .collect();
        Ok(ModelBundle { arch, params, bn_running, class_count })
    }

    /// Reassemble a bundle from checkpointed parts.
    pub fn from_parts(
        arch: ModelArch,
        params: ParamMap,
        bn_running: BTreeMap<String, BnRunning>,
        class_count: usize,
    ) -> Result<Self> {
        let w = params
            .get("classifier.w")
            .ok_or_else(|| CoreError::Checkpoint("missing classifier weights".into()))?;
        if w.shape() != [class_count, arch.extractor.feature_dim()] {
            return Err(CoreError::Checkpoint(format!(
                "classifier shape {:?} does not match {class_count} classes x dim {}",
                w.shape(),
                arch.extractor.feature_dim()
            )));
        }
        for name in arch.extractor.bn_layer_names() {
            let r = bn_running
                .get(&name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing BN stats for {name}")))?;
            if r.var.iter().any(|&v| v <= 0.0) {
                return Err(CoreError::Checkpoint(format!(
                    "non-positive running variance in {name}"
                )));
            }
        }
        Ok(ModelBundle { arch, params, bn_running, class_count })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.extractor.feature_dim()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.extractor.input_shape()
    }

    /// Classifier weight matrix `[K, d]`.
    pub fn classifier_weights(&self) -> Array2<f64> {
        self.params["classifier.w"].clone().into_dimensionality::<Ix2>().unwrap()
    }

    /// Running (mean, variance) pairs, one per BN layer in traversal order.
    pub fn bn_stats(&self) -> Vec<(Array1<f64>, Array1<f64>)> {
        self.arch
            .extractor
            .bn_layer_names()
            .iter()
            .map(|n| {
                let r = &self.bn_running[n];
                (r.mean.clone(), r.var.clone())
            })
            .collect()
    }

    fn check_batch(&self, batch: &ArrayD<f64>) -> Result<()> {
        let expect = self.input_shape();
        if batch.ndim() != expect.len() + 1 || batch.shape()[1..] != expect[..] {
            return Err(CoreError::ShapeMismatch(format!(
                "batch shape {:?} does not match input spec {:?}",
                batch.shape(),
                expect
            )));
        }
        Ok(())
    }

    /// Graph forward through a frozen model (eval-mode BN, parameters bound
    /// as constants). Never mutates the bundle; `capture` receives in-graph
    /// BN input moments when provided.
    pub fn forward_frozen(
        &self,
        tape: &Tape,
        x: &Var,
        mut capture: Option<&mut Vec<(Var, Var)>>,
    ) -> Result<(Var, Var)> {
        let bound = BoundParams::bind(tape, &self.params);
        let mut running = self.bn_running.clone();
        let feats =
            self.arch.extractor.forward(&bound, x, &mut running, false, false, &mut capture);
        let logits = linear(&bound, "classifier", &feats);
        Ok((feats, logits))
    }

    /// Graph forward in training mode through pre-bound parameters.
    /// BN normalizes by batch moments and updates running statistics.
    pub fn forward_train(
        &mut self,
        _tape: &Tape,
        bound: &BoundParams,
        x: &Var,
    ) -> Result<(Var, Var)> {
        let mut capture = None;
        let feats = self.arch.extractor.forward(
            bound,
            x,
            &mut self.bn_running,
            true,
            true,
            &mut capture,
        );
        let logits = linear(bound, "classifier", &feats);
        Ok((feats, logits))
    }

    /// Eval-mode features `z = h(x)` for a value batch.
    pub fn forward_features(&self, batch: &ArrayD<f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let tape = Tape::new();
        let x = tape.input(batch.clone());
        let (feats, _) = self.forward_frozen(&tape, &x, None)?;
        Ok(feats.value().into_dimensionality::<Ix2>().unwrap())
    }

    /// Eval-mode logits `g(h(x))` for a value batch.
    pub fn forward_logits(&self, batch: &ArrayD<f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let tape = Tape::new();
        let x = tape.input(batch.clone());
        let (_, logits) = self.forward_frozen(&tape, &x, None)?;
        Ok(logits.value().into_dimensionality::<Ix2>().unwrap())
    }

    /// Append classifier rows for `new_class_count` new classes.
    ///
    /// Existing rows (and biases) are preserved bitwise; new rows are drawn
    /// with the fan-in-scaled uniform rule under `seed`.
    pub fn expand_classifier(&self, new_class_count: usize, seed: u64) -> Result<ModelBundle> {
        if new_class_count == 0 {
            return Err(CoreError::InvalidArgument("must add at least one class".into()));
        }
        let d = self.feature_dim();
        let mut stream = rng::stream(seed, &["expand-classifier"]);
        let old_w = self.classifier_weights();
        let new_rows = nn::fan_in_uniform(&mut stream, &[new_class_count, d], d)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut w = Array2::<f64>::zeros((self.class_count + new_class_count, d));
        w.slice_mut(ndarray::s![..self.class_count, ..]).assign(&old_w);
        w.slice_mut(ndarray::s![self.class_count.., ..]).assign(&new_rows);

        let mut out = self.clone();
        out.params.insert("classifier.w".into(), w.into_dyn());
        if self.arch.classifier_bias {
            let old_b = &self.params["classifier.b"];
            let new_b = nn::fan_in_uniform(&mut stream, &[new_class_count], d);
            let mut b = Array1::<f64>::zeros(self.class_count + new_class_count);
            for i in 0..self.class_count {
                b[i] = old_b[[i]];
            }
            for i in 0..new_class_count {
                b[self.class_count + i] = new_b[[i]];
            }
            out.params.insert("classifier.b".into(), b.into_dyn());
        }
        out.class_count += new_class_count;
        Ok(out)
    }
}

/// Batch mean/variance observed at each normalization-layer input during one
/// eval-mode forward pass, in `bn_stats` layer order.
pub fn capture_bn_batch_stats(
    model: &ModelBundle,
    batch: &ArrayD<f64>,
) -> Result<Vec<(Array1<f64>, Array1<f64>)>> {
    if model.arch.extractor.bn_layer_names().is_empty() {
        return Err(CoreError::InvalidArgument(
            "model has no normalization layers to capture".into(),
        ));
    }
    if batch.shape()[0] < 2 {
        return Err(CoreError::BatchTooSmall(
            batch.shape()[0],
            "batch variance is undefined below 2 samples",
        ));
    }
    model.check_batch(batch)?;
    let tape = Tape::new();
    let x = tape.input(batch.clone());
    let mut captured = Vec::new();
    model.forward_frozen(&tape, &x, Some(&mut captured))?;
    Ok(captured
        .into_iter()
        .map(|(m, v)| {
            (
                m.value().into_dimensionality::<ndarray::Ix1>().unwrap(),
                v.value().into_dimensionality::<ndarray::Ix1>().unwrap(),
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

/// Generator architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// MLP noise → vector sample with a linear output head (vector data is
    /// unbounded, so no squashing).
    MlpVec { noise_dim: usize, hidden: Vec<usize>, out_dim: usize },
    /// Dense → reshape → two (upsample 2x → conv3x3 → BN → ReLU) stages →
    /// conv3x3 → tanh, for image samples in the [-1, 1] normalization range.
    /// Spatial dims of `out_shape` must be divisible by 4.
    ConvImage { noise_dim: usize, base_channels: usize, out_shape: [usize; 3] },
}

impl GeneratorSpec {
    pub fn noise_dim(&self) -> usize {
        match self {
            GeneratorSpec::MlpVec { noise_dim, .. } => *noise_dim,
            GeneratorSpec::ConvImage { noise_dim, .. } => *noise_dim,
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            GeneratorSpec::MlpVec { out_dim, .. } => vec![*out_dim],
            GeneratorSpec::ConvImage { out_shape, .. } => out_shape.to_vec(),
        }
    }

    fn stage_channels(base: usize) -> (usize, usize) {
        ((base / 2).max(4), (base / 4).max(4))
    }

    fn init_params(&self, params: &mut ParamMap, rng: &mut rng::Stream) -> Result<()> {
        match self {
            GeneratorSpec::MlpVec { noise_dim, hidden, out_dim } => {
                let mut prev = *noise_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    nn::init_linear(params, rng, &format!("g.fc{i}"), prev, h, true);
                    nn::init_batch_norm(params, &format!("g.bn{i}"), h);
                    prev = h;
                }
                nn::init_linear(params, rng, "g.out", prev, *out_dim, true);
                Ok(())
            }
            GeneratorSpec::ConvImage { noise_dim, base_channels, out_shape } => {
                let [c, h, w] = *out_shape;
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "generator output {h}x{w} must be divisible by 4"
                    )));
                }
                let (c1, c2) = Self::stage_channels(*base_channels);
                nn::init_linear(params, rng, "g.fc", *noise_dim, base_channels * (h / 4) * (w / 4), true);
                nn::init_batch_norm(params, "g.bn0", *base_channels);
                nn::init_conv(params, rng, "g.conv1", *base_channels, c1, (3, 3), true);
                nn::init_batch_norm(params, "g.bn1", c1);
                nn::init_conv(params, rng, "g.conv2", c1, c2, (3, 3), true);
                nn::init_batch_norm(params, "g.bn2", c2);
                nn::init_conv(params, rng, "g.out", c2, c, (3, 3), true);
                Ok(())
            }
        }
    }

    fn bn_layer_names(&self) -> Vec<String> {
        match self {
            GeneratorSpec::MlpVec { hidden, .. } => {
                (0..hidden.len()).map(|i| format!("g.bn{i}")).collect()
            }
            GeneratorSpec::ConvImage { .. } => {
                vec!["g.bn0".into(), "g.bn1".into(), "g.bn2".into()]
            }
        }
    }

    fn forward(
        &self,
        p: &BoundParams,
        noise: &Var,
        running: &mut BTreeMap<String, BnRunning>,
        train: bool,
    ) -> Var {
        let bn = |name: &str, v: &Var, running: &mut BTreeMap<String, BnRunning>| {
            let r = running.get_mut(name).expect("generator bn stats missing");
            let mut pass = BnPass {
                train,
                update_running: train,
                momentum: BN_MOMENTUM,
                capture: None,
            };
            batch_norm(p, name, v, r, &mut pass, BN_EPS)
        };
        match self {
            GeneratorSpec::MlpVec { hidden, .. } => {
                let mut h = noise.clone();
                for i in 0..hidden.len() {
                    h = linear(p, &format!("g.fc{i}"), &h);
                    h = bn(&format!("g.bn{i}"), &h, running).relu();
                }
                linear(p, "g.out", &h)
            }
            GeneratorSpec::ConvImage { base_channels, out_shape, .. } => {
                let [_, oh, ow] = *out_shape;
                let b = noise.shape()[0];
                let h = linear(p, "g.fc", noise).reshape(&[b, *base_channels, oh / 4, ow / 4]);
                let h = bn("g.bn0", &h, running).relu();
                let h = conv2d(p, "g.conv1", &h.upsample2x(), K3);
                let h = bn("g.bn1", &h, running).relu();
                let h = conv2d(p, "g.conv2", &h.upsample2x(), K3);
                let h = bn("g.bn2", &h, running).relu();
                conv2d(p, "g.out", &h, K3).tanh()
            }
        }
    }
}

/// Noise-to-sample generator with its own parameters and BN state.
#[derive(Debug, Clone)]
pub struct GeneratorBundle {
    pub spec: GeneratorSpec,
    pub params: ParamMap,
    pub bn_running: BTreeMap<String, BnRunning>,
}

impl GeneratorBundle {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let mut stream = rng::stream(seed, &["generator-init"]);
        let mut params = ParamMap::new();
        spec.init_params(&mut params, &mut stream)?;
        let bn_running = spec
            .bn_layer_names()
            .into_iter()
            .map(|name| {
                let ch = params[&format!("{name}.gamma")].len();
                (name, BnRunning::new(ch))
            })
            .collect();
        Ok(GeneratorBundle { spec, params, bn_running })
    }

    pub fn noise_dim(&self) -> usize {
        self.spec.noise_dim()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape()
    }

    /// Training-mode graph forward through pre-bound parameters (updates BN
    /// running statistics).
    pub fn forward_train(&mut self, bound: &BoundParams, noise: &Var) -> Var {
        self.spec.forward(bound, noise, &mut self.bn_running, true)
    }

    /// Eval-mode graph forward with parameters bound as constants.
    pub fn forward_frozen(&self, tape: &Tape, noise: &Var) -> Var {
        let bound = BoundParams::bind(tape, &self.params);
        let mut running = self.bn_running.clone();
        self.spec.forward(&bound, noise, &mut running, false)
    }

    /// Draw `batch` synthetic samples in eval mode.
    pub fn sample(&self, batch: usize, rng: &mut rng::Stream) -> Result<ArrayD<f64>> {
        if batch == 0 {
            return Err(CoreError::InvalidArgument("batch must be >= 1".into()));
        }
        let tape = Tape::new();
        let noise = tape.input(rng::normal_array(rng, &[batch, self.noise_dim()]));
        let out = self.forward_frozen(&tape, &noise).value();
        debug_assert_eq!(out.shape()[1..], self.output_shape()[..]);
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
