use crate::error::{Error, Result};
use crate::net::ParamRegistry;
use crate::tensor::Scalar;

use super::TrainConfig;

/// SGD with momentum, ℓ2 decay folded into the gradient and a per-group
/// learning-rate multiplier.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Sgd {
            velocity: Vec::new(),
        }
    }

    /// One update of every parameter in `reg` at base rate `lr`:
    /// `v ← μ·v + g + 2λ·w` (decay only where flagged) and
    /// `w ← w − lr·s·v` with `s` the fusion scale for fusion parameters.
    /// `grads[i]` is `None` for parameters that received no gradient.
    /// Nothing is updated if any gradient is non-finite.
    pub fn step(
        &mut self,
        reg: &mut ParamRegistry<T>,
        grads: &[Option<&[T]>],
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<()> {
        let params = reg.params_mut();
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect();
        }
        let mu = T::from_f64_lossy(cfg.momentum);
        let two_lambda = T::from_f64_lossy(2.0 * cfg.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let scale = if p.group.lr_scaled() {
                cfg.nddr_lr_scale
            } else {
                1.0
            };
            let rate = T::from_f64_lossy(lr * scale);
            let decay = p.decay && cfg.weight_decay != 0.0;
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let mut d = g.map_or(T::zero(), |g| g[k]);
                if decay {
                    d += two_lambda * w[k];
                }
                v[k] = mu * v[k] + d;
                w[k] = w[k] - rate * v[k];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ParamGroup;
    use crate::tensor::Tensor;

    fn reg(groups: &[(ParamGroup, bool, f64)]) -> ParamRegistry<f64> {
        let mut r = ParamRegistry::new();
        for (i, &(g, decay, w)) in groups.iter().enumerate() {
            r.add_param(format!("p{i}"), Tensor::full([1, 1, 1, 1], w), g, decay);
        }
        r
    }

    fn cfg(momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            momentum,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut r = reg(&[(ParamGroup::Backbone, true, 1.0)]);
        Sgd::new()
            .step(&mut r, &[Some(&[0.5])], &cfg(0.0, 0.0), 0.1)
            .unwrap();
        assert_eq!(r.params()[0].value.item(), 0.95);
    }

    #[test]
    fn pure_decay_shrinks_geometrically() {
        let (lambda, lr) = (0.01, 0.1);
        let mut r = reg(&[
            (ParamGroup::Backbone, true, 2.0),
            (ParamGroup::Backbone, false, 2.0),
        ]);
        let mut opt = Sgd::new();
        for _ in 0..5 {
            opt.step(&mut r, &[Some(&[0.0]), Some(&[0.0])], &cfg(0.0, lambda), lr)
                .unwrap();
        }
        let want = 2.0 * (1.0 - 2.0 * lambda * lr).powi(5);
        assert!((r.params()[0].value.item() - want).abs() < 1e-15);
        assert_eq!(r.params()[1].value.item(), 2.0);
    }

    #[test]
    fn fusion_update_is_scaled() {
        for scale in [1.0, 10.0, 100.0, 1000.0] {
            let mut r = reg(&[
                (ParamGroup::Backbone, true, 0.3),
                (ParamGroup::Fusion, true, 0.3),
            ]);
            let c = TrainConfig {
                nddr_lr_scale: scale,
                ..cfg(0.9, 5e-4)
            };
            Sgd::new()
                .step(&mut r, &[Some(&[0.7]), Some(&[0.7])], &c, 1e-3)
                .unwrap();
            let db = 0.3 - r.params()[0].value.item();
            let df = 0.3 - r.params()[1].value.item();
            assert!(
                (df / db - scale).abs() <= 1e-12 * scale,
                "{scale}: {}",
                df / db
            );
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut r = reg(&[(ParamGroup::Head, false, 0.0)]);
        let mut opt = Sgd::new();
        for _ in 0..2 {
            opt.step(&mut r, &[Some(&[1.0])], &cfg(0.5, 0.0), 1.0)
                .unwrap();
        }
        // v1 = 1, v2 = 1.5
        assert_eq!(r.params()[0].value.item(), -2.5);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut r = reg(&[
            (ParamGroup::Backbone, true, 1.0),
            (ParamGroup::Fusion, true, 1.0),
        ]);
        let before = r.clone();
        let err = Sgd::new()
            .step(
                &mut r,
                &[Some(&[0.1]), Some(&[f64::NAN])],
                &cfg(0.9, 0.0),
                0.1,
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(r, before);
    }
}
