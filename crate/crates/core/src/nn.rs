//! Neural-network building blocks over the tape autodiff: parameter maps,
//! layer forward helpers, initializers, optimizers, and LR schedules.
//!
//! Parameters are plain named f64 arrays in a `BTreeMap` (deterministic
//! iteration order). Each training step binds them onto a fresh tape with
//! [`BoundParams::bind`], runs forward/backward, and applies an optimizer
//! step to the arrays.

use crate::rng::Stream;
use crate::tensor::{Gradients, Tape, UnfoldSpec, Var};
use ndarray::{Array1, ArrayD, Dimension, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Named trainable arrays of a model or generator.
pub type ParamMap = BTreeMap<String, ArrayD<f64>>;

/// Per-layer batch-normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        BnRunning { mean: Array1::zeros(channels), var: Array1::ones(channels) }
    }
}

/// Parameters bound onto one tape as graph leaves.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &ParamMap) -> Self {
        let map = params.iter().map(|(k, v)| (k.clone(), tape.input(v.clone()))).collect();
        BoundParams { map }
    }

    /// Bind vars directly (used by gradient-check harnesses).
    pub fn from_vars(entries: Vec<(String, Var)>) -> Self {
        BoundParams { map: entries.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
            .clone()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Collect gradients for every bound parameter.
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.map.iter().map(|(k, v)| (k.clone(), g.wrt(v))).collect()
    }
}

// ---------------------------------------------------------------------------
// layer forwards
// ---------------------------------------------------------------------------

/// `y = x W^T + b` with `W` stored `[out, in]` under `<prefix>.w` / `<prefix>.b`.
pub fn linear(p: &BoundParams, prefix: &str, x: &Var) -> Var {
    let w = p.get(&format!("{prefix}.w"));
    let y = x.matmul(&w.t());
    if p.contains(&format!("{prefix}.b")) {
        y.add(&p.get(&format!("{prefix}.b")))
    } else {
        y
    }
}

/// 2-D convolution via unfold + matmul. `W` stored `[out_c, in_c*kh*kw]`.
pub fn conv2d(p: &BoundParams, prefix: &str, x: &Var, spec: UnfoldSpec) -> Var {
    let shape = x.shape();
    assert_eq!(shape.ndim(), 4, "conv2d input must be [B,C,H,W]");
    let (b, h, w_in) = (shape[0], shape[2], shape[3]);
    let (oh, ow) = spec.out_hw(h, w_in);
    let w = p.get(&format!("{prefix}.w"));
    let out_c = w.shape()[0];
    let cols = x.unfold(spec); // [B*OH*OW, C*KH*KW]
    let mut y = cols.matmul(&w.t()); // [B*OH*OW, OC]
    if p.contains(&format!("{prefix}.b")) {
        y = y.add(&p.get(&format!("{prefix}.b")));
    }
    y.reshape(&[b, oh, ow, out_c]).permute(&[0, 3, 1, 2])
}

/// Per-channel batch moments (mean, population variance) of a 2-D `[B,F]`
/// or 4-D `[B,C,H,W]` node, as `[F]`/`[C]` graph nodes.
pub fn batch_moments(x: &Var) -> (Var, Var) {
    let shape = x.shape();
    match shape.ndim() {
        2 => {
            let mu = x.mean_axis_keep(0); // [1,F]
            let xc = x.sub(&mu);
            let var = xc.square().mean_axis_keep(0);
            let f = shape[1];
            (mu.reshape(&[f]), var.reshape(&[f]))
        }
        4 => {
            let c = shape[1];
            let n = (shape[0] * shape[2] * shape[3]) as f64;
            let mu = x.sum_axis_keep(0).sum_axis_keep(2).sum_axis_keep(3).mul_scalar(1.0 / n);
            let xc = x.sub(&mu);
            let var = xc
                .square()
                .sum_axis_keep(0)
                .sum_axis_keep(2)
                .sum_axis_keep(3)
                .mul_scalar(1.0 / n);
            (mu.reshape(&[c]), var.reshape(&[c]))
        }
        d => panic!("batch_moments: unsupported ndim {d}"),
    }
}

fn reshape_channelwise(v: &Var, ndim: usize) -> Var {
    let c = v.shape()[0];
    match ndim {
        2 => v.reshape(&[1, c]),
        4 => v.reshape(&[1, c, 1, 1]),
        d => panic!("reshape_channelwise: unsupported ndim {d}"),
    }
}

/// How a batch-normalization layer should run for one forward pass.
pub struct BnPass<'a> {
    /// Normalize with in-graph batch statistics (training) or stored running
    /// statistics (evaluation).
    pub train: bool,
    /// Update running statistics from this batch (training passes only).
    pub update_running: bool,
    pub momentum: f64,
    /// Sink for in-graph (mean, var) of the layer input, captured in layer
    /// order regardless of `train`.
    pub capture: Option<&'a mut Vec<(Var, Var)>>,
}

impl BnPass<'_> {
    pub fn eval() -> Self {
        BnPass { train: false, update_running: false, momentum: 0.1, capture: None }
    }

    pub fn train(momentum: f64) -> Self {
        BnPass { train: true, update_running: true, momentum, capture: None }
    }
}

/// Batch normalization with affine parameters `<prefix>.gamma` / `<prefix>.beta`.
///
/// In training mode the batch is normalized by its own moments and, when
/// requested, running statistics are updated from the same moments. In eval
/// mode stored running statistics are used as constants. Capture (used by the
/// statistics-alignment loss and `capture_bn_batch_stats`) always records the
/// in-graph moments of the input, so a frozen model can expose differentiable
/// batch statistics without ever being mutated.
pub fn batch_norm(
    p: &BoundParams,
    prefix: &str,
    x: &Var,
    running: &mut BnRunning,
    pass: &mut BnPass<'_>,
    eps: f64,
) -> Var {
    let ndim = x.shape().ndim();
    let needs_moments = pass.train || pass.capture.is_some();
    let moments = if needs_moments { Some(batch_moments(x)) } else { None };

    if let (Some((mu, var)), Some(sink)) = (&moments, pass.capture.as_deref_mut()) {
        sink.push((mu.clone(), var.clone()));
    }

    let (mu_used, var_used) = if pass.train {
        let (mu, var) = moments.expect("train moments");
        if pass.update_running {
            let m = pass.momentum;
            let mu_v = mu.value().into_dimensionality::<ndarray::Ix1>().unwrap();
            let var_v = var.value().into_dimensionality::<ndarray::Ix1>().unwrap();
            running.mean = &running.mean * (1.0 - m) + &mu_v * m;
            running.var = &running.var * (1.0 - m) + &var_v * m;
        }
        (mu, var)
    } else {
        let t = x.tape();
        (
            t.constant(running.mean.clone().into_dyn()),
            t.constant(running.var.clone().into_dyn()),
        )
    };

    let mu_r = reshape_channelwise(&mu_used, ndim);
    let var_r = reshape_channelwise(&var_used, ndim);
    let xhat = x.sub(&mu_r).div(&var_r.add_scalar(eps).sqrt());
    let gamma = reshape_channelwise(&p.get(&format!("{prefix}.gamma")), ndim);
    let beta = reshape_channelwise(&p.get(&format!("{prefix}.beta")), ndim);
    xhat.mul(&gamma).add(&beta)
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(rng: &mut Stream, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Insert linear-layer parameters (`.w` `[out,in]`, optional `.b` `[out]`).
pub fn init_linear(
    params: &mut ParamMap,
    rng: &mut Stream,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) {
    params.insert(format!("{prefix}.w"), fan_in_uniform(rng, &[out_dim, in_dim], in_dim));
    if bias {
        params.insert(format!("{prefix}.b"), fan_in_uniform(rng, &[out_dim], in_dim));
    }
}

/// Insert conv parameters (`.w` `[out_c, in_c*kh*kw]`, `.b` `[out_c]`).
pub fn init_conv(
    params: &mut ParamMap,
    rng: &mut Stream,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    kernel: (usize, usize),
    bias: bool,
) {
    let fan_in = in_c * kernel.0 * kernel.1;
    params.insert(format!("{prefix}.w"), fan_in_uniform(rng, &[out_c, fan_in], fan_in));
    if bias {
        params.insert(format!("{prefix}.b"), fan_in_uniform(rng, &[out_c], fan_in));
    }
}

/// Insert batch-norm affine parameters (gamma = 1, beta = 0).
pub fn init_batch_norm(params: &mut ParamMap, prefix: &str, channels: usize) {
    params.insert(format!("{prefix}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0));
    params.insert(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[channels])));
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// Optimizer configuration as it appears in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    /// Momentum SGD with weight decay (training stage).
    Sgd { lr: f64, momentum: f64, weight_decay: f64 },
    /// Adam with a constant learning rate (inversion stage).
    Adam { lr: f64 },
}

/// Momentum SGD: `v = m*v + (g + wd*w); w -= lr*v`.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, ArrayD<f64>>) {
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let g_eff = g + &(&*w * self.weight_decay);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            *v = &*v * self.momentum + &g_eff;
            *w -= &(&*v * self.lr);
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, w) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            *v = &*v * self.beta2 + &(&(g * g) * (1.0 - self.beta2));
            let m_hat = &*m / b1t;
            let v_hat = &*v / b2t;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + self.eps) * self.lr;
            *w -= &update;
        }
    }
}

/// Step-decay learning-rate schedule: multiply by `gamma` at each milestone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { milestones: vec![], gamma: 0.1 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        base * self.gamma.powi(hits as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{backward, Tape};
    use ndarray::IxDyn;

    fn tiny_params(seed: u64) -> (ParamMap, Stream) {
        let mut rng = rng::stream(seed, &["nn-test"]);
        let mut p = ParamMap::new();
        init_linear(&mut p, &mut rng, "fc", 3, 2, true);
        (p, rng)
    }

    #[test]
    fn linear_matches_manual_matvec() {
        let (params, _) = tiny_params(0);
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let x = tape.input(ndarray::arr2(&[[1.0, 2.0, 3.0]]).into_dyn());
        let y = linear(&bound, "fc", &x).value();
        let w = &params["fc.w"];
        let b = &params["fc.b"];
        for j in 0..2 {
            let expect = (0..3).map(|k| w[[j, k]] * (k + 1) as f64).sum::<f64>() + b[[j]];
            assert!((y[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_gradients_match_fd() {
        let (params, mut rng) = tiny_params(1);
        let x = rng::normal_array(&mut rng, &[4, 3]);
        crate::tensor::tests::fd_check(
            &|_, v| {
                let bound = BoundParams::from_vars(vec![
                    ("fc.w".to_string(), v[1].clone()),
                    ("fc.b".to_string(), v[2].clone()),
                ]);
                linear(&bound, "fc", &v[0]).tanh().sum_all().mul_scalar(0.5)
            },
            &[x, params["fc.w"].clone(), params["fc.b"].clone()],
            1e-5,
        );
    }

    #[test]
    fn conv2d_shape_and_gradient() {
        let mut rng = rng::stream(2, &["nn-test"]);
        let mut params = ParamMap::new();
        init_conv(&mut params, &mut rng, "c1", 2, 4, (3, 3), true);
        let x = rng::normal_array(&mut rng, &[2, 2, 6, 6]);
        let spec = crate::tensor::UnfoldSpec { kernel: (3, 3), stride: 1, pad: 1 };

        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let y = conv2d(&bound, "c1", &tape.input(x.clone()), spec);
        assert_eq!(y.shape().slice(), &[2, 4, 6, 6]);

        crate::tensor::tests::fd_check(
            &|_, v| {
                let bound = BoundParams::from_vars(vec![
                    ("c1.w".to_string(), v[1].clone()),
                    ("c1.b".to_string(), v[2].clone()),
                ]);
                conv2d(&bound, "c1", &v[0], spec).square().sum_all()
            },
            &[x, params["c1.w"].clone(), params["c1.b"].clone()],
            1e-4,
        );
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running() {
        let mut params = ParamMap::new();
        init_batch_norm(&mut params, "bn", 3);
        let mut running = BnRunning::new(3);
        let mut rng = rng::stream(3, &["nn-test"]);
        let x = rng::normal_array(&mut rng, &[16, 3]);

        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let mut pass = BnPass::train(0.1);
        let y = batch_norm(&bound, "bn", &tape.input(x.clone()), &mut running, &mut pass, 1e-5);
        let yv = y.value().into_dimensionality::<ndarray::Ix2>().unwrap();
        for j in 0..3 {
            let col = yv.column(j);
            let mean: f64 = col.mean().unwrap();
            let var: f64 = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running stats moved off initialization toward batch moments
        assert!(running.mean.iter().any(|&m| m != 0.0));
        assert!(running.var.iter().any(|&v| (v - 1.0).abs() > 1e-12));
    }

    #[test]
    fn batch_norm_eval_is_frozen_and_capture_works() {
        let mut params = ParamMap::new();
        init_batch_norm(&mut params, "bn", 2);
        let mut running = BnRunning::new(2);
        running.mean = ndarray::arr1(&[1.0, -1.0]);
        running.var = ndarray::arr1(&[4.0, 9.0]);
        let before = running.clone();

        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, &params);
        let x = tape.input(ndarray::arr2(&[[1.0, 2.0], [3.0, -4.0]]).into_dyn());
        let mut captured = Vec::new();
        let mut pass = BnPass {
            train: false,
            update_running: false,
            momentum: 0.1,
            capture: Some(&mut captured),
        };
        let y = batch_norm(&bound, "bn", &x, &mut running, &mut pass, 0.0);

        assert_eq!(running, before, "eval pass must not touch running stats");
        let yv = y.value();
        assert!((yv[[0, 0]] - (1.0 - 1.0) / 2.0).abs() < 1e-12);
        assert!((yv[[1, 0]] - (3.0 - 1.0) / 2.0).abs() < 1e-12);

        assert_eq!(captured.len(), 1);
        let (mu, var) = &captured[0];
        assert!((mu.value()[[0]] - 2.0).abs() < 1e-12);
        assert!((var.value()[[0]] - 1.0).abs() < 1e-12); // population var of {1,3}
    }

    #[test]
    fn batch_norm_gradient_matches_fd() {
        let mut rng = rng::stream(4, &["nn-test"]);
        let x = rng::normal_array(&mut rng, &[6, 2, 4, 4]);
        crate::tensor::tests::fd_check(
            &|_, v| {
                let bound = BoundParams::from_vars(vec![
                    ("bn.gamma".to_string(), v[1].clone()),
                    ("bn.beta".to_string(), v[2].clone()),
                ]);
                let mut running = BnRunning::new(2);
                let mut pass =
                    BnPass { train: true, update_running: false, momentum: 0.1, capture: None };
                batch_norm(&bound, "bn", &v[0], &mut running, &mut pass, 1e-5)
                    .square()
                    .sum_all()
            },
            &[
                x,
                ArrayD::from_elem(IxDyn(&[2]), 1.3),
                ArrayD::from_elem(IxDyn(&[2]), -0.2),
            ],
            1e-4,
        );
    }

    #[test]
    fn sgd_momentum_descends_quadratic() {
        let mut params = ParamMap::new();
        params.insert("w".into(), ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
        for _ in 0..400 {
            let g: BTreeMap<String, ArrayD<f64>> =
                [("w".to_string(), params["w"].clone() * 2.0)].into_iter().collect();
            opt.step(&mut params, &g);
        }
        assert!(params["w"].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut params = ParamMap::new();
        params.insert("w".into(), ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g: BTreeMap<String, ArrayD<f64>> =
                [("w".to_string(), params["w"].clone() * 2.0)].into_iter().collect();
            opt.step(&mut params, &g);
        }
        assert!(params["w"].iter().all(|v| v.abs() < 1e-3), "{:?}", params["w"]);
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let s = LrSchedule { milestones: vec![80, 120], gamma: 0.1 };
        assert_eq!(s.lr_at(0.1, 0), 0.1);
        assert_eq!(s.lr_at(0.1, 79), 0.1);
        assert!((s.lr_at(0.1, 80) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(0.1, 120) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn optimizer_steps_are_deterministic() {
        let run = || {
            let (mut params, mut rng) = tiny_params(9);
            let mut opt = SgdMomentum::new(0.05, 0.9, 1e-4);
            for _ in 0..5 {
                let x = rng::normal_array(&mut rng, &[8, 3]);
                let tape = Tape::new();
                let bound = BoundParams::bind(&tape, &params);
                let loss = linear(&bound, "fc", &tape.input(x)).square().sum_all();
                let grads = bound.grads(&backward(&loss));
                opt.step(&mut params, &grads);
            }
            params
        };
        assert_eq!(run(), run());
    }
}
