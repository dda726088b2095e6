use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps for one output coordinate: `(lo, hi, weight of hi)`.
fn taps(out: usize, input: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| match mode {
            ResizeMode::Bilinear => {
                // half-pixel centres, clamped at the low border
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                let w = if hi == lo { 0.0 } else { src - lo as f64 };
                (lo, hi, w)
            }
            ResizeMode::Nearest => {
                let src = (((d as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                (src, src, 0.0)
            }
        })
        .collect()
}

struct ResizeOp {
    x: Var,
    input: Shape,
    out: Shape,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl<T: Scalar> BackwardOp<T> for ResizeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let (s, o) = (self.input, self.out);
        let dx = ctx.grad_mut(self.x);
        for n in 0..o.n {
            for (i, &(r0, r1, wy)) in self.rows.iter().enumerate() {
                for (j, &(c0, c1, wx)) in self.cols.iter().enumerate() {
                    let base = o.offset(n, i, j, 0);
                    let corners = [
                        (r0, c0, (1.0 - wy) * (1.0 - wx)),
                        (r0, c1, (1.0 - wy) * wx),
                        (r1, c0, wy * (1.0 - wx)),
                        (r1, c1, wy * wx),
                    ];
                    for (r, c, w) in corners {
                        if w == 0.0 {
                            continue;
                        }
                        let w = T::from_f64_lossy(w);
                        let src = s.offset(n, r, c, 0);
                        for k in 0..s.c {
                            dx[src + k] += w * g[base + k];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Resamples the spatial grid to `out_h × out_w` (half-pixel
    /// alignment, corners not aligned).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x);
        if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::shape(
                "resize",
                format!("cannot resize {s} to {out_h}x{out_w}"),
            ));
        }
        let o = Shape::new(s.n, out_h, out_w, s.c);
        let rows = taps(out_h, s.h, mode);
        let cols = taps(out_w, s.w, mode);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); o.numel()];
        for n in 0..s.n {
            for (i, &(r0, r1, wy)) in rows.iter().enumerate() {
                for (j, &(c0, c1, wx)) in cols.iter().enumerate() {
                    let base = o.offset(n, i, j, 0);
                    let wy = T::from_f64_lossy(wy);
                    let wx = T::from_f64_lossy(wx);
                    let one = T::one();
                    for k in 0..s.c {
                        let a = data[s.offset(n, r0, c0, k)];
                        let b = data[s.offset(n, r0, c1, k)];
                        let c = data[s.offset(n, r1, c0, k)];
                        let d = data[s.offset(n, r1, c1, k)];
                        let top = a * (one - wx) + b * wx;
                        let bot = c * (one - wx) + d * wx;
                        out[base + k] = top * (one - wy) + bot * wy;
                    }
                }
            }
        }
        let out = Tensor::new(o, out)?;
        self.record(
            "resize",
            out,
            &[x],
            ResizeOp {
                x,
                input: s,
                out: o,
                rows,
                cols,
            },
        )
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.resize(x, out_h, out_w, ResizeMode::Bilinear)
    }
}
