use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    /// Non-overlapping `k × k` pooling.
    pub fn halving() -> Self {
        PoolSpec {
            window: 2,
            stride: 2,
            padding: 0,
        }
    }

    /// 3×3 window, stride 1, padding 1: keeps the spatial size.
    pub fn dense() -> Self {
        PoolSpec {
            window: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0
            || self.window == 0
            || self.window > padded
            || self.padding >= self.window
        {
            return None;
        }
        Some((padded - self.window) / self.stride + 1)
    }
}

struct MaxPoolOp {
    x: Var,
    // flat input offset of the selected element for every output value
    argmax: Vec<usize>,
}

impl<T: Scalar> BackwardOp<T> for MaxPoolOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let dx = ctx.grad_mut(self.x);
        for (&src, &gv) in self.argmax.iter().zip(g) {
            dx[src] += gv;
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Channelwise max over each window; padded positions never win. Ties
    /// go to the first element in row-major window order.
    pub fn max_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let s = self.shape(x);
        let (Some(oh), Some(ow)) = (spec.output_extent(s.h), spec.output_extent(s.w)) else {
            return Err(Error::shape(
                "max_pool",
                format!(
                    "window {} stride {} padding {} does not fit input {s}",
                    spec.window, spec.stride, spec.padding
                ),
            ));
        };
        let o = Shape::new(s.n, oh, ow, s.c);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(o.numel());
        let mut argmax = Vec::with_capacity(o.numel());
        let pad = spec.padding as isize;
        for n in 0..s.n {
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..s.c {
                        let mut best: Option<(T, usize)> = None;
                        for ki in 0..spec.window {
                            let ih = (i * spec.stride + ki) as isize - pad;
                            if ih < 0 || ih >= s.h as isize {
                                continue;
                            }
                            for kj in 0..spec.window {
                                let iw = (j * spec.stride + kj) as isize - pad;
                                if iw < 0 || iw >= s.w as isize {
                                    continue;
                                }
                                let off = s.offset(n, ih as usize, iw as usize, c);
                                let v = data[off];
                                if best.map_or(true, |(b, _)| v > b) {
                                    best = Some((v, off));
                                }
                            }
                        }
                        let (v, off) = best.expect("every window overlaps the input");
                        out.push(v);
                        argmax.push(off);
                    }
                }
            }
        }
        let out = Tensor::new(o, out)?;
        self.record("max_pool", out, &[x], MaxPoolOp { x, argmax })
    }
}
