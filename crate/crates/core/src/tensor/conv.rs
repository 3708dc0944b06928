//! Spatial data-movement primitives: im2col unfold, 2x average pooling, and
//! 2x nearest-neighbour upsampling. Convolution itself is composed in `nn`
//! as `unfold → matmul → permute`.

use super::{BackFn, Var};
use ndarray::{ArrayD, Dimension, Ix4};

/// Geometry of an unfold (im2col) op.
#[derive(Debug, Clone, Copy)]
pub struct UnfoldSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
}

impl UnfoldSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        assert!(h + 2 * self.pad >= kh && w + 2 * self.pad >= kw, "kernel larger than padded input");
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }
}

/// Marker for the fixed 2x2/stride-2 average pooling used by the backbones.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2Spec;

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("spatial op needs a [B,C,H,W] node")
}

fn im2col(x: &ArrayD<f64>, spec: UnfoldSpec) -> ArrayD<f64> {
    let x = as4(x);
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.out_hw(h, w);
    let mut out = ndarray::Array2::<f64>::zeros((b * oh * ow, c * kh * kw));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let col = (ci * kh + ky) * kw + kx;
                            out[(row, col)] = x[(bi, ci, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn col2im(up: &ArrayD<f64>, input_shape: &[usize], spec: UnfoldSpec) -> ArrayD<f64> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.out_hw(h, w);
    let up = up.view().into_dimensionality::<ndarray::Ix2>().expect("col2im upstream");
    let mut g = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let col = (ci * kh + ky) * kw + kx;
                            g[(bi, ci, iy as usize, ix as usize)] += up[(row, col)];
                        }
                    }
                }
            }
        }
    }
    g.into_dyn()
}

impl Var {
    /// im2col: `[B,C,H,W]` → `[B*OH*OW, C*KH*KW]` patch matrix.
    pub fn unfold(&self, spec: UnfoldSpec) -> Var {
        let out = im2col(&self.value(), spec);
        let back: BackFn =
            Box::new(move |up, ctx| vec![col2im(up, ctx.parents[0].shape(), spec)]);
        self.tape().push(out, vec![self.id()], Some(back))
    }

    /// 2x2 stride-2 average pooling. Spatial dims must be even.
    pub fn avg_pool2(&self) -> Var {
        let x = self.value();
        let xv = as4(&x);
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let mut out = ndarray::Array4::<f64>::zeros((b, c, h / 2, w / 2));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xi in 0..w / 2 {
                        out[(bi, ci, y, xi)] = 0.25
                            * (xv[(bi, ci, 2 * y, 2 * xi)]
                                + xv[(bi, ci, 2 * y, 2 * xi + 1)]
                                + xv[(bi, ci, 2 * y + 1, 2 * xi)]
                                + xv[(bi, ci, 2 * y + 1, 2 * xi + 1)]);
                    }
                }
            }
        }
        let back: BackFn = Box::new(|up, ctx| {
            let upv = up.view().into_dimensionality::<Ix4>().unwrap();
            let shape = ctx.parents[0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut g = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..h {
                        for xi in 0..w {
                            g[(bi, ci, y, xi)] = 0.25 * upv[(bi, ci, y / 2, xi / 2)];
                        }
                    }
                }
            }
            vec![g.into_dyn()]
        });
        self.tape().push(out.into_dyn(), vec![self.id()], Some(back))
    }

    /// Global average over the spatial dims: `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&self) -> Var {
        let shape = self.shape();
        assert_eq!(shape.ndim(), 4, "global_avg_pool needs [B,C,H,W]");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        self.sum_axis(3).sum_axis(2).mul_scalar(1.0 / (h * w) as f64).reshape(&[b, c])
    }

    /// Nearest-neighbour 2x upsampling: `[B,C,H,W]` → `[B,C,2H,2W]`.
    pub fn upsample2x(&self) -> Var {
        let x = self.value();
        let xv = as4(&x);
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = ndarray::Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xi in 0..2 * w {
                        out[(bi, ci, y, xi)] = xv[(bi, ci, y / 2, xi / 2)];
                    }
                }
            }
        }
        let back: BackFn = Box::new(|up, ctx| {
            let upv = up.view().into_dimensionality::<Ix4>().unwrap();
            let shape = ctx.parents[0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let mut g = ndarray::Array4::<f64>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xi in 0..2 * w {
                            g[(bi, ci, y / 2, xi / 2)] += upv[(bi, ci, y, xi)];
                        }
                    }
                }
            }
            vec![g.into_dyn()]
        });
        self.tape().push(out.into_dyn(), vec![self.id()], Some(back))
    }
}
