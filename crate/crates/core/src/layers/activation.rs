use crate::error::Result;
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Shape, Tensor, Var};

struct ReluOp {
    x: Var,
}

impl<T: Scalar> BackwardOp<T> for ReluOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let x = ctx.value(self.x).data();
        for ((d, &gv), &xv) in ctx.grad_mut(self.x).iter_mut().zip(g).zip(x) {
            if xv > T::zero() {
                *d += gv;
            }
        }
    }
}

struct SoftmaxOp<T> {
    x: Var,
    probs: Vec<T>,
    classes: usize,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let c = self.classes;
        let dx = ctx.grad_mut(self.x);
        for ((dr, gr), pr) in dx
            .chunks_exact_mut(c)
            .zip(g.chunks_exact(c))
            .zip(self.probs.chunks_exact(c))
        {
            let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for k in 0..c {
                dr[k] += pr[k] * (gr[k] - dot);
            }
        }
    }
}

struct GlobalAvgPoolOp {
    x: Var,
    input: Shape,
}

impl<T: Scalar> BackwardOp<T> for GlobalAvgPoolOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let s = self.input;
        let area = s.h * s.w;
        let inv = T::one() / T::from_usize(area).unwrap();
        let dx = ctx.grad_mut(self.x);
        for n in 0..s.n {
            for p in 0..area {
                let base = (n * area + p) * s.c;
                for k in 0..s.c {
                    dx[base + k] += g[n * s.c + k] * inv;
                }
            }
        }
    }
}

/// Numerically stable softmax of one site's logits.
pub fn softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", out, &[x], ReluOp { x })
    }

    /// Softmax over the channel axis at every site.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let mut probs = vec![T::zero(); s.numel()];
        for (o, l) in probs
            .chunks_exact_mut(s.c)
            .zip(self.value(x).data().chunks_exact(s.c))
        {
            softmax_row(l, o);
        }
        let out = Tensor::new(s, probs.clone())?;
        self.record(
            "softmax",
            out,
            &[x],
            SoftmaxOp {
                x,
                probs,
                classes: s.c,
            },
        )
    }

    /// Mean over the spatial grid, `(N, H, W, C) → (N, 1, 1, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let area = s.h * s.w;
        let inv = T::one() / T::from_usize(area).unwrap();
        let data = self.value(x).data();
        let mut out = vec![T::zero(); s.n * s.c];
        for n in 0..s.n {
            for p in 0..area {
                let base = (n * area + p) * s.c;
                for k in 0..s.c {
                    out[n * s.c + k] += data[base + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let out = Tensor::new([s.n, 1, 1, s.c], out)?;
        self.record(
            "global_avg_pool",
            out,
            &[x],
            GlobalAvgPoolOp { x, input: s },
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 1, 40], 3.7));
        let y = g.softmax(x).unwrap();
        assert!(g
            .value(y)
            .data()
            .iter()
            .all(|&p| (p - 1.0 / 40.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::random_uniform([3, 2, 2, 7], -30.0, 30.0, &mut rng));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks_exact(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn global_average() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 2, 1, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 15.0]);
    }
}
