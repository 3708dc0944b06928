//! Reverse-mode automatic differentiation on f64 tensors.
//!
//! A [`Tape`] records an eager graph of [`ArrayD<f64>`] nodes; [`Var`] is a
//! cheap handle into it. Each training step builds a fresh tape, calls
//! [`backward`] on a scalar loss, and reads gradients per input node.
//!
//! Kernels are plain single-threaded ndarray loops, so results are
//! deterministic on CPU: the same tape built twice produces bit-identical
//! values and gradients.
//!
//! Subgradient conventions at non-differentiable points: `abs` uses 0 at the
//! origin and `sqrt` propagates 0 where the output is 0. Matched-input losses
//! built on these stay exactly 0 with zero (not NaN) gradients.

mod conv;

pub use conv::{AvgPool2Spec, UnfoldSpec};

use ndarray::{ArrayD, Axis, Dimension, Ix2, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Context handed to a node's backward closure.
pub struct BackCtx<'a> {
    /// Values of the node's parents, in parent order.
    pub parents: Vec<&'a ArrayD<f64>>,
    /// Value of the node itself.
    pub output: &'a ArrayD<f64>,
}

type BackFn = Box<dyn Fn(&ArrayD<f64>, &BackCtx) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Recording tape. Clone handles share the same graph.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, backward });
        Var { tape: self.clone(), id }
    }

    /// Record a leaf node whose gradient will be read after backward.
    pub fn input(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None)
    }

    /// Record a leaf node used as a constant (gradient never read).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.input(value)
    }

    /// Scalar constant as a 0-d node.
    pub fn scalar(&self, v: f64) -> Var {
        self.input(ndarray::arr0(v).into_dyn())
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients of one scalar output with respect to every node of its tape.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` did not influence the loss.
    pub fn wrt(&self, v: &Var) -> ArrayD<f64> {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.shape()),
        }
    }
}

/// Run reverse-mode accumulation from a scalar loss node.
///
/// Panics if `loss` is not a single-element node.
pub fn backward(loss: &Var) -> Gradients {
    let nodes = loss.tape.nodes.borrow();
    assert_eq!(
        nodes[loss.id].value.len(),
        1,
        "backward requires a scalar loss, got shape {:?}",
        nodes[loss.id].value.shape()
    );
    let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(loss.id + 1);
    grads.resize_with(loss.id + 1, || None);
    grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), 1.0));

    for id in (0..=loss.id).rev() {
        let Some(upstream) = grads[id].take() else { continue };
        if let Some(back) = &nodes[id].backward {
            let ctx = BackCtx {
                parents: nodes[id].parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &nodes[id].value,
            };
            let parent_grads = back(&upstream, &ctx);
            debug_assert_eq!(parent_grads.len(), nodes[id].parents.len());
            for (&pid, pg) in nodes[id].parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        grads[id] = Some(upstream);
    }
    Gradients { grads }
}

/// Broadcast shape of two operands, NumPy-style (right-aligned).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (ad, bd) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("incompatible broadcast: {a:?} vs {b:?}"),
        };
    }
    out
}

fn broadcast_to(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
            .to_owned()
    }
}

/// Reduce a broadcast gradient back to the original operand shape.
fn sum_to(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..target.len() {
        if g.shape()[i] != target[i] {
            debug_assert_eq!(target[i], 1, "sum_to: bad target {target:?}");
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

macro_rules! binary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self, other: &Var) -> Var {
            assert!(Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes), "vars from different tapes");
            let (av, bv) = (self.value(), other.value());
            let shape = broadcast_shape(av.shape(), bv.shape());
            let ab = broadcast_to(&av, &shape);
            let bb = broadcast_to(&bv, &shape);
            #[allow(clippy::redundant_closure_call)]
            let out: ArrayD<f64> = ($fwd)(&ab, &bb);
            let back: BackFn = Box::new(move |up, ctx| {
                let a = ctx.parents[0];
                let b = ctx.parents[1];
                let shape = broadcast_shape(a.shape(), b.shape());
                let ab = broadcast_to(a, &shape);
                let bb = broadcast_to(b, &shape);
                #[allow(clippy::redundant_closure_call)]
                let (da, db): (ArrayD<f64>, ArrayD<f64>) = ($bwd)(up, &ab, &bb);
                vec![sum_to(da, a.shape()), sum_to(db, b.shape())]
            });
            self.tape.push(out, vec![self.id, other.id], Some(back))
        }
    };
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Clone of the node's value.
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> IxDyn {
        self.tape.nodes.borrow()[self.id].value.raw_dim()
    }

    /// Value of a single-element node as f64.
    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "scalar_value on shape {:?}", v.shape());
        v.iter().next().copied().unwrap()
    }

    /// New leaf holding this node's value, cut off from the graph.
    pub fn detach(&self) -> Var {
        self.tape.input(self.value())
    }

    // ---- elementwise binary (broadcasting) ----

    binary_op!(add, |a: &ArrayD<f64>, b: &ArrayD<f64>| a + b, |up: &ArrayD<f64>,
                                                               _a: &ArrayD<f64>,
                                                               _b: &ArrayD<f64>| {
        (up.clone(), up.clone())
    });

    binary_op!(sub, |a: &ArrayD<f64>, b: &ArrayD<f64>| a - b, |up: &ArrayD<f64>,
                                                               _a: &ArrayD<f64>,
                                                               _b: &ArrayD<f64>| {
        (up.clone(), -up)
    });

    binary_op!(mul, |a: &ArrayD<f64>, b: &ArrayD<f64>| a * b, |up: &ArrayD<f64>,
                                                               a: &ArrayD<f64>,
                                                               b: &ArrayD<f64>| {
        (up * b, up * a)
    });

    binary_op!(div, |a: &ArrayD<f64>, b: &ArrayD<f64>| a / b, |up: &ArrayD<f64>,
                                                               a: &ArrayD<f64>,
                                                               b: &ArrayD<f64>| {
        (up / b, -(up * a) / (b * b))
    });

    // ---- elementwise unary ----

    fn unary(&self, out: ArrayD<f64>, back: BackFn) -> Var {
        self.tape.push(out, vec![self.id], Some(back))
    }

    pub fn neg(&self) -> Var {
        let out = -&self.value();
        self.unary(out, Box::new(|up, _| vec![-up]))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let out = &self.value() + c;
        self.unary(out, Box::new(|up, _| vec![up.clone()]))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let out = &self.value() * c;
        self.unary(out, Box::new(move |up, _| vec![up * c]))
    }

    pub fn exp(&self) -> Var {
        let out = self.value().mapv(f64::exp);
        self.unary(out, Box::new(|up, ctx| vec![up * ctx.output]))
    }

    pub fn ln(&self) -> Var {
        let out = self.value().mapv(f64::ln);
        self.unary(out, Box::new(|up, ctx| vec![up / ctx.parents[0]]))
    }

    /// Square root; propagates zero gradient where the output is zero.
    pub fn sqrt(&self) -> Var {
        let out = self.value().mapv(f64::sqrt);
        self.unary(
            out,
            Box::new(|up, ctx| {
                let mut g = up.clone();
                ndarray::Zip::from(&mut g).and(ctx.output).for_each(|gi, &o| {
                    *gi = if o == 0.0 { 0.0 } else { *gi * 0.5 / o };
                });
                vec![g]
            }),
        )
    }

    /// Absolute value; subgradient 0 at the origin.
    pub fn abs(&self) -> Var {
        let out = self.value().mapv(f64::abs);
        self.unary(
            out,
            Box::new(|up, ctx| {
                let sign = ctx.parents[0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![up * &sign]
            }),
        )
    }

    pub fn square(&self) -> Var {
        let out = self.value().mapv(|x| x * x);
        self.unary(out, Box::new(|up, ctx| vec![up * &(ctx.parents[0] * 2.0)]))
    }

    pub fn tanh(&self) -> Var {
        let out = self.value().mapv(f64::tanh);
        self.unary(
            out,
            Box::new(|up, ctx| {
                let d = ctx.output.mapv(|y| 1.0 - y * y);
                vec![up * &d]
            }),
        )
    }

    pub fn relu(&self) -> Var {
        let out = self.value().mapv(|x| x.max(0.0));
        self.unary(
            out,
            Box::new(|up, ctx| {
                let mask = ctx.parents[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![up * &mask]
            }),
        )
    }

    // ---- reductions and shape ----

    /// Sum of all elements as a 0-d node.
    pub fn sum_all(&self) -> Var {
        let out = ndarray::arr0(self.value().sum()).into_dyn();
        self.unary(
            out,
            Box::new(|up, ctx| {
                let s = up.iter().next().copied().unwrap();
                vec![ArrayD::from_elem(ctx.parents[0].raw_dim(), s)]
            }),
        )
    }

    /// Mean of all elements as a 0-d node.
    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let out = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.unary(
            out,
            Box::new(move |up, ctx| vec![broadcast_to(up, ctx.parents[0].shape())]),
        )
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let out = self.value().sum_axis(Axis(axis));
        self.unary(
            out,
            Box::new(move |up, ctx| {
                let expanded = up.clone().insert_axis(Axis(axis));
                vec![broadcast_to(&expanded, ctx.parents[0].shape())]
            }),
        )
    }

    /// Mean over one axis, keeping it with size 1.
    pub fn mean_axis_keep(&self, axis: usize) -> Var {
        let n = self.value().shape()[axis] as f64;
        self.sum_axis_keep(axis).mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let out = self
            .value()
            .into_shape_clone(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        self.unary(
            out,
            Box::new(|up, ctx| {
                vec![up
                    .clone()
                    .into_shape_clone(ctx.parents[0].raw_dim())
                    .expect("reshape backward")]
            }),
        )
    }

    /// Permute axes (generalized transpose).
    pub fn permute(&self, perm: &[usize]) -> Var {
        let perm_v = perm.to_vec();
        let out = self
            .value()
            .permuted_axes(IxDyn(&perm_v))
            .as_standard_layout()
            .to_owned();
        self.unary(
            out,
            Box::new(move |up, _| {
                let mut inv = vec![0usize; perm_v.len()];
                for (i, &p) in perm_v.iter().enumerate() {
                    inv[p] = i;
                }
                vec![up.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned()]
            }),
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        assert_eq!(self.shape().ndim(), 2, "t() needs a 2-D node");
        self.permute(&[1, 0])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value();
        assert!(start + len <= v.shape()[axis], "narrow out of range");
        let out = v
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.unary(
            out,
            Box::new(move |up, ctx| {
                let mut g = ArrayD::zeros(ctx.parents[0].raw_dim());
                g.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(up);
                vec![g]
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Var) -> Var {
        assert!(Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes), "vars from different tapes");
        let a = self.value().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.value().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
        let out = a.dot(&b).into_dyn();
        let back: BackFn = Box::new(|up, ctx| {
            let a = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let b = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
            let up2 = up.view().into_dimensionality::<Ix2>().unwrap();
            vec![up2.dot(&b.t()).into_dyn(), a.t().dot(&up2).into_dyn()]
        });
        self.tape.push(out, vec![self.id, other.id], Some(back))
    }

    // ---- softmax family ----

    /// Row-wise log-softmax of a 2-D node.
    ///
    /// The row max is subtracted as a detached constant; the gradient of
    /// log-sum-exp is unchanged by the shift.
    pub fn log_softmax_rows(&self) -> Var {
        let v = self.value().into_dimensionality::<Ix2>().expect("log_softmax needs 2-D");
        let rows = v.nrows();
        let mut maxes = ndarray::Array2::<f64>::zeros((rows, 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            maxes[(i, 0)] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let m = self.tape.constant(maxes.into_dyn());
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_axis_keep(1).ln();
        shifted.sub(&lse)
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(&self) -> Var {
        self.log_softmax_rows().exp()
    }
}

/// Row-wise argmax of a 2-D array (first max wins on ties).
pub fn argmax_rows(logits: &ndarray::Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}
