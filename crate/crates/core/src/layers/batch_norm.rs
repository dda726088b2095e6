use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnOptions {
    pub eps: f64,
    /// Weight of the previous running statistic in each update.
    pub momentum: f64,
    pub mode: BnMode,
}

impl BnOptions {
    pub fn train() -> Self {
        BnOptions {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            mode: BnMode::Train,
        }
    }

    pub fn eval() -> Self {
        BnOptions {
            mode: BnMode::Eval,
            ..Self::train()
        }
    }
}

/// Standalone batch-norm state: affine parameters plus running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub options: BnOptions,
    pub affine: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            options: BnOptions::train(),
            affine: true,
        }
    }

    /// Eval-mode state that maps every input to itself exactly: γ = 1,
    /// β = 0, running mean 0 and running variance `1 − eps`, so the
    /// normalizing denominator `sqrt(var + eps)` is exactly one.
    pub fn identity(channels: usize) -> Self {
        let mut s = Self::new(channels);
        s.running_var = vec![identity_running_var::<T>(s.options.eps); channels];
        s.options.mode = BnMode::Eval;
        s
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Records batch norm of `x` on `g`, placing γ and β as differentiable
    /// leaves. Returns `(output, gamma, beta)`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var) -> Result<(Var, Option<Var>, Option<Var>)> {
        let c = self.channels();
        let (gamma, beta) = if self.affine {
            let gv = g.param(Tensor::new([1, 1, 1, c], self.gamma.clone())?);
            let bv = g.param(Tensor::new([1, 1, 1, c], self.beta.clone())?);
            (Some(gv), Some(bv))
        } else {
            (None, None)
        };
        let out = g.batch_norm(
            x,
            gamma,
            beta,
            &mut self.running_mean,
            &mut self.running_var,
            self.options,
        )?;
        Ok((out, gamma, beta))
    }
}

/// Running variance whose sum with `eps` rounds to exactly one.
pub fn identity_running_var<T: Scalar>(eps: f64) -> T {
    let eps = T::from_f64_lossy(eps);
    let mut v = T::one() - eps;
    // nudge by ulps until (v + eps) == 1 in T's arithmetic
    for _ in 0..4 {
        let s = v + eps;
        if s == T::one() {
            break;
        }
        v = if s > T::one() {
            v - T::epsilon() * T::from_f64_lossy(0.5)
        } else {
            v + T::epsilon() * T::from_f64_lossy(0.5)
        };
    }
    v
}

struct BatchNormOp<T> {
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BackwardOp<T> for BatchNormOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let c = self.inv_std.len();
        let m = g.len() / c;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (gr, xr) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
            for k in 0..c {
                sum_g[k] += gr[k];
                sum_gx[k] += gr[k] * xr[k];
            }
        }
        if let Some(b) = self.beta {
            ctx.accumulate(b, &sum_g);
        }
        if let Some(gm) = self.gamma {
            ctx.accumulate(gm, &sum_gx);
        }
        if !ctx.wants(self.x) {
            return;
        }
        let gamma: Vec<T> = match self.gamma {
            Some(v) => ctx.value(v).data().to_vec(),
            None => vec![T::one(); c],
        };
        let dx = ctx.grad_mut(self.x);
        if self.train {
            let mt = T::from_usize(m).unwrap();
            for ((dr, gr), xr) in dx
                .chunks_exact_mut(c)
                .zip(g.chunks_exact(c))
                .zip(self.xhat.chunks_exact(c))
            {
                for k in 0..c {
                    let scale = gamma[k] * self.inv_std[k] / mt;
                    dr[k] += scale * (mt * gr[k] - sum_g[k] - xr[k] * sum_gx[k]);
                }
            }
        } else {
            for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                for k in 0..c {
                    dr[k] += gr[k] * gamma[k] * self.inv_std[k];
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization over `(N, H, W)`. In train mode the batch
    /// statistics are used and the running statistics are updated in
    /// place; in eval mode the running statistics are used unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: &mut [T],
        running_var: &mut [T],
        opts: BnOptions,
    ) -> Result<Var> {
        let s = self.shape(x);
        let c = s.c;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("input {s} vs state with {} channels", running_mean.len()),
            ));
        }
        for v in [gamma, beta].into_iter().flatten() {
            if self.shape(v).numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine parameter {} for {c} channels", self.shape(v)),
                ));
            }
        }
        let m = s.sites();
        let train = opts.mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("train mode needs at least 2 values per channel, input {s}"),
            ));
        }
        let eps = T::from_f64_lossy(opts.eps);
        let data = self.value(x).data();

        let (mean, var) = if train {
            let mt = T::from_usize(m).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                for k in 0..c {
                    mean[k] += row[k];
                }
            }
            mean.iter_mut().for_each(|v| *v = *v / mt);
            let mut var = vec![T::zero(); c];
            for row in data.chunks_exact(c) {
                for k in 0..c {
                    let d = row[k] - mean[k];
                    var[k] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mt);

            let mom = T::from_f64_lossy(opts.momentum);
            let unbias = mt / (mt - T::one());
            for k in 0..c {
                running_mean[k] = mom * running_mean[k] + (T::one() - mom) * mean[k];
                running_var[k] = mom * running_var[k] + (T::one() - mom) * var[k] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(data.len());
        for row in data.chunks_exact(c) {
            for k in 0..c {
                xhat.push((row[k] - mean[k]) * inv_std[k]);
            }
        }
        let gamma_v = gamma.map(|v| self.value(v).data().to_vec());
        let beta_v = beta.map(|v| self.value(v).data().to_vec());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(c) {
            for k in 0..c {
                if let Some(gm) = &gamma_v {
                    row[k] = row[k] * gm[k];
                }
                if let Some(b) = &beta_v {
                    row[k] += b[k];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        self.record(
            "batch_norm",
            out,
            &inputs,
            BatchNormOp {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut st = BatchNormState::<f64>::new(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 2, 2, 2], |[_, _, _, c]| 3.0 + c as f64));
        let (y, _, _) = st.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn balanced_unit_input_is_preserved() {
        let mut st = BatchNormState::<f64>::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([4, 1, 1, 1], vec![-1.0, 1.0, 1.0, -1.0]).unwrap());
        let (y, _, _) = st.forward(&mut g, x).unwrap();
        for (a, b) in g.value(y).data().iter().zip([-1.0, 1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = BatchNormState::<f64>::new(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::random_uniform([4, 3, 3, 3], -3.0, 5.0, &mut rng));
        let (y, _, _) = st.forward(&mut g, x).unwrap();
        let y = g.value(y).data();
        for k in 0..3 {
            let vals: Vec<f64> = y.iter().skip(k).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn running_stats_are_convex_updates() {
        let mut st = BatchNormState::<f64>::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 1, 1, 1], vec![2.0, 4.0]).unwrap());
        st.forward(&mut g, x).unwrap();
        // mean 3, unbiased var 2
        assert!((st.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn identity_state_is_exact_in_both_precisions() {
        assert_eq!(identity_running_var::<f32>(DEFAULT_EPS) + 1e-5f32, 1.0);
        assert_eq!(identity_running_var::<f64>(DEFAULT_EPS) + 1e-5f64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor::<f32>::random_uniform([2, 3, 3, 4], -10.0, 10.0, &mut rng);
        let mut st = BatchNormState::<f32>::identity(4);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let (y, _, _) = st.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn eval_mode_is_affine_per_channel() {
        let mut st = BatchNormState::<f64>::new(1);
        st.options.mode = BnMode::Eval;
        st.running_mean = vec![1.0];
        st.running_var = vec![4.0 - 1e-5];
        st.gamma = vec![3.0];
        st.beta = vec![0.5];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 1, 1, 1], vec![1.0, 3.0, -1.0]).unwrap());
        let (y, _, _) = st.forward(&mut g, x).unwrap();
        let y = g.value(y).data();
        for (got, want) in y.iter().zip([0.5, 3.5, -2.5]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn degenerate_batch_rejected_in_train_mode() {
        let mut st = BatchNormState::<f64>::new(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 1, 2]));
        assert!(st.forward(&mut g, x).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([4, 1, 1, 3]));
        assert!(st.forward(&mut g, x).is_err());
    }
}
