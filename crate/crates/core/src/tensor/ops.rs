//! Elementwise arithmetic, reductions and matrix multiply.

use crate::error::{Error, Result};

use super::{BackwardCtx, BackwardOp, Graph, Scalar, Shape, Tensor, Var};

struct AddOp {
    a: Var,
    b: Var,
    sign_b: f64,
}

impl<T: Scalar> BackwardOp<T> for AddOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        ctx.accumulate(self.a, g);
        if ctx.wants(self.b) {
            let s = T::from_f64_lossy(self.sign_b);
            for (d, &v) in ctx.grad_mut(self.b).iter_mut().zip(g) {
                *d += s * v;
            }
        }
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl<T: Scalar> BackwardOp<T> for MulOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        if ctx.wants(self.a) {
            let b = ctx.value(self.b).data();
            for ((d, &gv), &bv) in ctx.grad_mut(self.a).iter_mut().zip(g).zip(b) {
                *d += gv * bv;
            }
        }
        if ctx.wants(self.b) {
            let a = ctx.value(self.a).data();
            for ((d, &gv), &av) in ctx.grad_mut(self.b).iter_mut().zip(g).zip(a) {
                *d += gv * av;
            }
        }
    }
}

struct ScaleOp<T> {
    x: Var,
    s: T,
}

impl<T: Scalar> BackwardOp<T> for ScaleOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let s = self.s;
        for (d, &v) in ctx.grad_mut(self.x).iter_mut().zip(g) {
            *d += s * v;
        }
    }
}

struct SumOp {
    x: Var,
    scale: f64,
}

impl<T: Scalar> BackwardOp<T> for SumOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let v = g[0] * T::from_f64_lossy(self.scale);
        for d in ctx.grad_mut(self.x) {
            *d += v;
        }
    }
}

struct MatMulOp {
    a: Var,
    b: Var,
    rows: usize,
    k: usize,
    m: usize,
}

impl<T: Scalar> BackwardOp<T> for MatMulOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let (rows, k, m) = (self.rows, self.k, self.m);
        if ctx.wants(self.a) {
            // dA = G · Bᵀ
            let b = ctx.value(self.b).data();
            T::gemm(rows, m, k, g, false, b, true, ctx.grad_mut(self.a), true);
        }
        if ctx.wants(self.b) {
            // dB = Aᵀ · G
            let a = ctx.value(self.a).data();
            T::gemm(k, rows, m, a, true, g, false, ctx.grad_mut(self.b), true);
        }
    }
}

struct ReshapeOp {
    x: Var,
}

impl<T: Scalar> BackwardOp<T> for ReshapeOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        ctx.accumulate(self.x, g);
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = Tensor::new(shape, self.zip_with(a, b, |x, y| x + y))?;
        self.record("add", out, &[a, b], AddOp { a, b, sign_b: 1.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = Tensor::new(shape, self.zip_with(a, b, |x, y| x - y))?;
        self.record("sub", out, &[a, b], AddOp { a, b, sign_b: -1.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = Tensor::new(shape, self.zip_with(a, b, |x, y| x * y))?;
        self.record("mul", out, &[a, b], MulOp { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.record("scale", out, &[x], ScaleOp { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(total), &[x], SumOp { x, scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let total: T = self.value(x).data().iter().copied().sum();
        let out = Tensor::scalar(total / T::from_usize(n).unwrap());
        let scale = 1.0 / n as f64;
        self.record("mean", out, &[x], SumOp { x, scale })
    }

    /// Weighted sum of scalar terms, `Σ wᵢ·xᵢ`.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {}", self.shape(v)),
                ));
            }
            let scaled = self.scale(v, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Invalid("weighted_sum of zero terms".into()))
    }

    /// `a` viewed as `(N·H·W) × K` times `b` of shape `(1, 1, K, M)`,
    /// giving `(N, H, W, M)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.n != 1 || sb.h != 1 || sb.w != sa.c {
            return Err(Error::shape(
                "matmul",
                format!("lhs {sa} needs rhs (1, 1, {}, M), got {sb}", sa.c),
            ));
        }
        let (rows, k, m) = (sa.sites(), sa.c, sb.c);
        let mut out = vec![T::zero(); rows * m];
        T::gemm(
            rows,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let out = Tensor::new(sa.with_c(m), out)?;
        self.record("matmul", out, &[a, b], MatMulOp { a, b, rows, k, m })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.record("reshape", out, &[x], ReshapeOp { x })
    }

    /// Flattens each sample to `(N, 1, 1, H·W·C)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.reshape(x, [s.n, 1, 1, s.h * s.w * s.c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec4(g: &mut Graph<f64>, v: &[f64], grad: bool) -> Var {
        g.leaf(Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap(), grad)
    }

    #[test]
    fn add_is_elementwise() {
        let mut g = Graph::new();
        let a = vec4(&mut g, &[1.0, 2.0], false);
        let b = vec4(&mut g, &[3.0, 4.0], false);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zeros_annihilates() {
        let mut g = Graph::new();
        let a = vec4(&mut g, &[1.5, -2.0, 7.0], false);
        let z = vec4(&mut g, &[0.0; 3], false);
        let c = g.mul(a, z).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let a = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]).unwrap();
        let (i, av) = (g.constant(eye), g.constant(a.clone()));
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::<f64>::new();
        let a = vec4(&mut g, &[1.0, 2.0], false);
        let b = vec4(&mut g, &[1.0, 2.0, 3.0], false);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("(1, 1, 1, 2)"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = vec4(&mut g, &[0.3, -1.0, 2.0, 5.0], true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn square_gradient_doubles() {
        let mut g = Graph::new();
        let x = vec4(&mut g, &[1.0, 2.0, 3.0], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = vec4(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn finite_check_flags_nan() {
        let mut g = Graph::new().with_finite_check(true);
        let a = vec4(&mut g, &[f64::INFINITY], false);
        let z = vec4(&mut g, &[0.0], false);
        assert!(matches!(g.mul(a, z), Err(Error::NonFinite { op: "mul" })));
    }
}
