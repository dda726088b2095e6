//! 2-D convolution as patch gather + GEMM.
//!
//! The input is unrolled into a `(N·H'·W') × (kH·kW·Cin)` patch matrix and
//! multiplied by the transposed `(F × kH·kW·Cin)` filter bank, which yields
//! the output directly in NHWC order. The backward pass reuses the same
//! matrix view: `dW = Gᵀ·cols`, `dcols = G·W`, then the patch gradients
//! are scattered back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 0,
    };

    pub fn same(kernel: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Filter bank and bias of a convolution. `weight` is `(F, kH, kW, Cin)`,
/// `bias` is `(1, 1, 1, F)`.
#[derive(Debug, Clone)]
pub struct Conv2dParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    input: Shape,
    out: Shape,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
}

impl Dims {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.input.c
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == ConvGeometry::POINTWISE
    }
}

fn im2col<T: Scalar>(x: &[T], d: &Dims) -> Vec<T> {
    let (s, o) = (d.input, d.out);
    let patch = d.patch();
    let mut cols = vec![T::zero(); o.sites() * patch];
    let pad = d.geom.padding as isize;
    for n in 0..o.n {
        for oh in 0..o.h {
            for ow in 0..o.w {
                let row = ((n * o.h + oh) * o.w + ow) * patch;
                for kh in 0..d.kh {
                    let ih = (oh * d.geom.stride + kh) as isize - pad;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let iw = (ow * d.geom.stride + kw) as isize - pad;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        let src = s.offset(n, ih as usize, iw as usize, 0);
                        let dst = row + (kh * d.kw + kw) * s.c;
                        cols[dst..dst + s.c].copy_from_slice(&x[src..src + s.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], d: &Dims, dx: &mut [T]) {
    let (s, o) = (d.input, d.out);
    let patch = d.patch();
    let pad = d.geom.padding as isize;
    for n in 0..o.n {
        for oh in 0..o.h {
            for ow in 0..o.w {
                let row = ((n * o.h + oh) * o.w + ow) * patch;
                for kh in 0..d.kh {
                    let ih = (oh * d.geom.stride + kh) as isize - pad;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let iw = (ow * d.geom.stride + kw) as isize - pad;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        let dst = s.offset(n, ih as usize, iw as usize, 0);
                        let src = row + (kh * d.kw + kw) * s.c;
                        for (a, &b) in dx[dst..dst + s.c].iter_mut().zip(&cols[src..src + s.c]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

struct ConvOp<T> {
    x: Var,
    w: Var,
    b: Option<Var>,
    dims: Dims,
    // empty for pointwise convolutions, which read the input directly
    cols: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for ConvOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let d = &self.dims;
        let (rows, patch, f) = (d.out.sites(), d.patch(), d.out.c);
        let cols: &[T] = if d.pointwise() {
            ctx.value(self.x).data()
        } else {
            &self.cols
        };
        if ctx.wants(self.w) {
            T::gemm(
                f,
                rows,
                patch,
                g,
                true,
                cols,
                false,
                ctx.grad_mut(self.w),
                true,
            );
        }
        if let Some(b) = self.b {
            if ctx.wants(b) {
                let db = ctx.grad_mut(b);
                for row in g.chunks_exact(f) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        if ctx.wants(self.x) {
            let w = ctx.value(self.w).data();
            if d.pointwise() {
                T::gemm(
                    rows,
                    f,
                    patch,
                    g,
                    false,
                    w,
                    false,
                    ctx.grad_mut(self.x),
                    true,
                );
            } else {
                let mut dcols = vec![T::zero(); rows * patch];
                T::gemm(rows, f, patch, g, false, w, false, &mut dcols, false);
                col2im(&dcols, d, ctx.grad_mut(self.x));
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x (N, H, W, Cin)` with `w (F, kH, kW, Cin)`
    /// plus an optional `(1, 1, 1, F)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {xs} has {} channels, filters {ws} expect {}",
                    xs.c, ws.c
                ),
            ));
        }
        let (Some(oh), Some(ow)) = (
            geom.output_extent(xs.h, ws.h),
            geom.output_extent(xs.w, ws.w),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit input {xs} with padding {} stride {}",
                    ws.h, ws.w, geom.padding, geom.stride
                ),
            ));
        };
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != Shape::new(1, 1, 1, ws.n) {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {bs} for {} filters", ws.n),
                ));
            }
        }
        let dims = Dims {
            input: xs,
            out: Shape::new(xs.n, oh, ow, ws.n),
            kh: ws.h,
            kw: ws.w,
            geom,
        };
        let (rows, patch, f) = (dims.out.sites(), dims.patch(), ws.n);
        let cols = if dims.pointwise() {
            Vec::new()
        } else {
            im2col(self.value(x).data(), &dims)
        };
        let mut out = vec![T::zero(); rows * f];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(f) {
                row.copy_from_slice(bias);
            }
        }
        let lhs = if dims.pointwise() {
            self.value(x).data()
        } else {
            &cols
        };
        T::gemm(
            rows,
            patch,
            f,
            lhs,
            false,
            self.value(w).data(),
            true,
            &mut out,
            b.is_some(),
        );
        let out = Tensor::new(dims.out, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(
            "conv2d",
            out,
            &inputs,
            ConvOp {
                x,
                w,
                b,
                dims,
                cols,
            },
        )
    }

    /// Pointwise projection, `out = W·in (+ b)` at every site, with
    /// `w` of shape `(Cout, 1, 1, Cin)`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("conv1x1", format!("weight {ws} is not 1x1")));
        }
        let xs = self.shape(x);
        if ws.c != xs.c {
            return Err(Error::shape(
                "conv1x1",
                format!(
                    "input {xs} has {} channels, weight {ws} expects {}",
                    xs.c, ws.c
                ),
            ));
        }
        self.conv2d(x, w, b, ConvGeometry::POINTWISE)
    }

    /// Dense layer on the flattened sample, `w` of shape `(F, 1, 1, H·W·C)`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let flat = if self.shape(x).h * self.shape(x).w == 1 {
            x
        } else {
            self.flatten(x)?
        };
        self.conv1x1(flat, w, b)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct nested-loop convolution used as the reference.
    pub(crate) fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        geom: ConvGeometry,
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * geom.padding - ws.h) / geom.stride + 1;
        let ow = (xs.w + 2 * geom.padding - ws.w) / geom.stride + 1;
        Tensor::from_fn([xs.n, oh, ow, ws.n], |[n, i, j, f]| {
            let mut acc = b[f];
            for ki in 0..ws.h {
                for kj in 0..ws.w {
                    for c in 0..xs.c {
                        let ih = (i * geom.stride + ki) as isize - geom.padding as isize;
                        let iw = (j * geom.stride + kj) as isize - geom.padding as isize;
                        if ih >= 0 && iw >= 0 && (ih as usize) < xs.h && (iw as usize) < xs.w {
                            acc += x.at(n, ih as usize, iw as usize, c) * w.at(f, ki, kj, c);
                        }
                    }
                }
            }
            acc
        })
    }

    fn run_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        geom: ConvGeometry,
    ) -> Tensor<f64> {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let bv = b.map(|b| g.constant(b.clone()));
        let out = g.conv2d(xv, wv, bv, geom).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn selector_filter_picks_channel() {
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new([1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            run_conv(&x, &w, None, ConvGeometry::POINTWISE).data(),
            &[1.0]
        );
    }

    #[test]
    fn summation_filter() {
        let x = Tensor::full([1, 3, 3, 1], 1.0);
        let w = Tensor::full([1, 3, 3, 1], 1.0);
        let geom = ConvGeometry {
            stride: 1,
            padding: 0,
        };
        assert_eq!(run_conv(&x, &w, None, geom).data(), &[9.0]);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::random_uniform([2, 5, 5, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform([4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform([1, 1, 1, 4], -1.0, 1.0, &mut rng);
        for geom in [
            ConvGeometry {
                stride: 1,
                padding: 0,
            },
            ConvGeometry {
                stride: 1,
                padding: 1,
            },
            ConvGeometry {
                stride: 2,
                padding: 1,
            },
        ] {
            let got = run_conv(&x, &w, Some(&b), geom);
            let want = naive_conv(&x, &w, b.data(), geom);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry {
            stride: 2,
            padding: 1,
        };
        assert_eq!(g.output_extent(7, 3), Some(4));
        assert_eq!(g.output_extent(1, 5), None);
    }

    #[test]
    fn identity_pointwise_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random_uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn([4, 1, 1, 4], |[o, _, _, i]| if o == i { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(eye));
        let out = g.conv1x1(xv, wv, None).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn pointwise_row_selectors() {
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new([2, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let out = g.conv1x1(xv, wv, None).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 4.0]);
    }

    #[test]
    fn pointwise_equals_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::random_uniform([2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform([3, 1, 1, 5], -1.0, 1.0, &mut rng);
        let got = run_conv(&x, &w, None, ConvGeometry::POINTWISE);
        let want = naive_conv(&x, &w, &[0.0; 3], ConvGeometry::POINTWISE);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 4, 4, 3]));
        let w = g.constant(Tensor::zeros([2, 3, 3, 2]));
        let err = g.conv2d(x, w, None, ConvGeometry::same(3)).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn fully_connected_identity() {
        let x = Tensor::new([2, 1, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let eye = Tensor::from_fn([3, 1, 1, 3], |[o, _, _, i]| if o == i { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(eye));
        let out = g.fully_connected(xv, wv, None).unwrap();
        assert_eq!(g.value(out), &x);
    }
}
