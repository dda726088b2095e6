//! Channel-axis concatenation, slicing and grouped scalar mixing.

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Tensor, Var};

struct ConcatOp {
    parts: Vec<(Var, usize)>,
    total: usize,
}

impl<T: Scalar> BackwardOp<T> for ConcatOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let mut start = 0;
        for &(v, c) in &self.parts {
            if ctx.wants(v) {
                let d = ctx.grad_mut(v);
                for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(self.total)) {
                    for (a, &b) in dr.iter_mut().zip(&gr[start..start + c]) {
                        *a += b;
                    }
                }
            }
            start += c;
        }
    }
}

struct SliceOp {
    x: Var,
    start: usize,
    len: usize,
    total: usize,
}

impl<T: Scalar> BackwardOp<T> for SliceOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let d = ctx.grad_mut(self.x);
        for (dr, gr) in d.chunks_exact_mut(self.total).zip(g.chunks_exact(self.len)) {
            for (a, &b) in dr[self.start..self.start + self.len].iter_mut().zip(gr) {
                *a += b;
            }
        }
    }
}

struct GroupMixOp {
    x: Var,
    mix: Var,
    groups: usize,
    block: usize,
}

impl<T: Scalar> BackwardOp<T> for GroupMixOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let (gs, b) = (self.groups, self.block);
        let width = gs * b;
        let m = ctx.value(self.mix).data();
        let x = ctx.value(self.x).data();
        if ctx.wants(self.mix) {
            let dm = ctx.grad_mut(self.mix);
            for (gr, xr) in g.chunks_exact(width).zip(x.chunks_exact(width)) {
                for og in 0..gs {
                    for ig in 0..gs {
                        let mut acc = T::zero();
                        for c in 0..b {
                            acc += gr[og * b + c] * xr[ig * b + c];
                        }
                        dm[og * gs + ig] += acc;
                    }
                }
            }
        }
        if ctx.wants(self.x) {
            let dx = ctx.grad_mut(self.x);
            for (dr, gr) in dx.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                for og in 0..gs {
                    for ig in 0..gs {
                        let w = m[og * gs + ig];
                        for c in 0..b {
                            dr[ig * b + c] += w * gr[og * b + c];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along channels in argument order; part `j` occupies
    /// channels `[Σ_{i<j} Cᵢ, Σ_{i≤j} Cᵢ)`.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {s0}")));
            }
            dims.push((p, s.c));
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let sites = s0.sites();
        let mut out = Vec::with_capacity(sites * total);
        for site in 0..sites {
            for &(p, c) in &dims {
                out.extend_from_slice(&self.value(p).data()[site * c..(site + 1) * c]);
            }
        }
        let out = Tensor::new(s0.with_c(total), out)?;
        self.record(
            "concat_channels",
            out,
            parts,
            ConcatOp { parts: dims, total },
        )
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) of {s}", start + len),
            ));
        }
        if start == 0 && len == s.c {
            return Ok(x);
        }
        let mut out = Vec::with_capacity(s.sites() * len);
        for row in self.value(x).data().chunks_exact(s.c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(s.with_c(len), out)?;
        self.record(
            "slice_channels",
            out,
            &[x],
            SliceOp {
                x,
                start,
                len,
                total: s.c,
            },
        )
    }

    /// Splits the channels of `x` into `G` equal contiguous groups and
    /// mixes them with the `(1, 1, G, G)` scalar matrix `mix`: output group
    /// `g` is `Σ_h mix[g, h] · group h`.
    pub fn group_mix(&mut self, x: Var, mix: Var) -> Result<Var> {
        let (s, ms) = (self.shape(x), self.shape(mix));
        let gs = ms.c;
        if ms.n != 1 || ms.h != 1 || ms.w != gs || gs == 0 || s.c % gs != 0 {
            return Err(Error::shape(
                "group_mix",
                format!("input {s} with mixing matrix {ms}"),
            ));
        }
        let b = s.c / gs;
        let m = self.value(mix).data();
        let mut out = vec![T::zero(); s.numel()];
        for (orow, xrow) in out
            .chunks_exact_mut(s.c)
            .zip(self.value(x).data().chunks_exact(s.c))
        {
            for og in 0..gs {
                for ig in 0..gs {
                    let w = m[og * gs + ig];
                    for c in 0..b {
                        orow[og * b + c] += w * xrow[ig * b + c];
                    }
                }
            }
        }
        let out = Tensor::new(s, out)?;
        self.record(
            "group_mix",
            out,
            &[x, mix],
            GroupMixOp {
                x,
                mix,
                groups: gs,
                block: b,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.param(Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn concat_in_task_order() {
        let mut g = Graph::new();
        let a = site(&mut g, &[1.0, 2.0]);
        let b = site(&mut g, &[3.0, 4.0]);
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn single_part_is_identity() {
        let mut g = Graph::new();
        let a = site(&mut g, &[5.0, 6.0, 7.0]);
        assert_eq!(g.concat_channels(&[a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 2, 2, 3]));
        let b = g.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(g.concat_channels(&[a, b]).is_err());
        assert!(g.concat_channels(&[]).is_err());
    }

    #[test]
    fn slice_picks_channels() {
        let mut g = Graph::new();
        let a = site(&mut g, &[1.0, 2.0, 3.0, 4.0]);
        let s = g.slice_channels(a, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0]);
        assert!(g.slice_channels(a, 3, 2).is_err());
    }
}
