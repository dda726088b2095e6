use crate::error::{Error, Result};
use crate::layers::softmax_row;
use crate::tensor::{BackwardCtx, BackwardOp, Graph, Scalar, Tensor, Var};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: usize = 255;

/// Guard on the predicted-normal norm.
pub const NORMAL_EPS: f64 = 1e-8;

struct CrossEntropyOp<T> {
    logits: Vec<Var>,
    // (p − onehot)/count at valid sites, zero at ignored sites
    dlogits: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let s = g[0];
        for d in &self.logits {
            for (a, &b) in ctx.grad_mut(*d).iter_mut().zip(&self.dlogits) {
                *a += s * b;
            }
        }
    }
}

struct NormalLossOp<T> {
    pred: Var,
    dpred: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for NormalLossOp<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let s = g[0];
        for (a, &b) in ctx.grad_mut(self.pred).iter_mut().zip(&self.dpred) {
            *a += s * b;
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Mean negative log-likelihood of `labels` (one per site of `logits`)
    /// over sites whose label is not `ignore`. All-ignored input gives a
    /// zero loss with zero gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore: usize,
    ) -> Result<Var> {
        let s = self.shape(logits);
        let classes = s.c;
        if labels.len() != s.sites() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {s}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        let mut dlogits = vec![T::zero(); s.numel()];
        let mut total = T::zero();
        if count > 0 {
            let inv = T::one() / T::from_usize(count).unwrap();
            let data = self.value(logits).data();
            for ((row, d), &label) in data
                .chunks_exact(classes)
                .zip(dlogits.chunks_exact_mut(classes))
                .zip(labels)
            {
                if label == ignore {
                    continue;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - row[label];
                softmax_row(row, d);
                d[label] = d[label] - T::one();
                d.iter_mut().for_each(|v| *v = *v * inv);
            }
            total = total * inv;
        }
        self.record(
            "softmax_cross_entropy",
            Tensor::scalar(total),
            &[logits],
            CrossEntropyOp {
                logits: vec![logits],
                dlogits,
            },
        )
    }

    /// Mean over masked sites of `‖p̂ − g‖²`, where `p̂ = p / max(‖p‖, ε)`
    /// and `g` is a unit 3-vector field. Equals `2 − 2·cos(p, g)` per site.
    pub fn normal_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let s = self.shape(pred);
        if s.c != 3 || target.shape() != s || mask.len() != s.sites() {
            return Err(Error::shape(
                "normal_loss",
                format!(
                    "pred {s}, target {}, {} mask entries",
                    target.shape(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut dpred = vec![T::zero(); s.numel()];
        let mut total = T::zero();
        if count > 0 {
            let inv = T::one() / T::from_usize(count).unwrap();
            let eps = T::from_f64_lossy(NORMAL_EPS);
            let two = T::from_f64_lossy(2.0);
            let data = self.value(pred).data();
            for (((p, gt), d), &m) in data
                .chunks_exact(3)
                .zip(target.data().chunks_exact(3))
                .zip(dpred.chunks_exact_mut(3))
                .zip(mask)
            {
                if !m {
                    continue;
                }
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let n = norm.max(eps);
                let ph = [p[0] / n, p[1] / n, p[2] / n];
                let diff = [ph[0] - gt[0], ph[1] - gt[1], ph[2] - gt[2]];
                total += diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
                // d/dp ‖p/n − g‖² = (2/n)(I − p̂p̂ᵀ)(p̂ − g) when n = ‖p‖
                let proj = if norm > eps {
                    ph[0] * diff[0] + ph[1] * diff[1] + ph[2] * diff[2]
                } else {
                    T::zero()
                };
                for k in 0..3 {
                    d[k] = two / n * (diff[k] - ph[k] * proj) * inv;
                }
            }
            total = total * inv;
        }
        self.record(
            "normal_loss",
            Tensor::scalar(total),
            &[pred],
            NormalLossOp { pred, dpred },
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_field(rng: &mut ChaCha8Rng, sites: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(sites * 3);
        for _ in 0..sites {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.2..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            data.extend(v.iter().map(|x| x / n));
        }
        Tensor::new([1, 1, sites, 3], data).unwrap()
    }

    fn ce(logits: Tensor<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.param(logits);
        let l = g.softmax_cross_entropy(x, labels, IGNORE_LABEL).unwrap();
        let v = g.value(l).item();
        g.backward(l).unwrap();
        (v, g.grad(x).unwrap().to_vec())
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2, 3, 40, 100] {
            let (v, _) = ce(Tensor::full([2, 2, 1, classes], 0.3), &[0, 1, 1, 0]);
            assert!((v - (classes as f64).ln()).abs() < 1e-12);
        }
        let (v, _) = ce(Tensor::full([1, 1, 1, 40], 0.0), &[7]);
        assert!((v - 3.6888794541139363).abs() < 1e-12);
    }

    #[test]
    fn confident_margin_drives_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let (v, _) = ce(
                Tensor::new([1, 1, 1, 3], vec![0.0, margin, 0.0]).unwrap(),
                &[1],
            );
            assert!(v < last && v >= 0.0);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn fully_ignored_batch_is_zero() {
        let (v, g) = ce(Tensor::full([1, 2, 2, 4], 1.0), &[IGNORE_LABEL; 4]);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(x, &[0, 3], IGNORE_LABEL),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn normal_loss_cosine_cases() {
        let gt = Tensor::new([1, 1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        for (p, want) in [
            ([0.0, 0.0, 5.0], 0.0f64),
            ([2.0, 0.0, 0.0], 2.0),
            ([0.0, 0.0, -0.1], 4.0),
        ] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([1, 1, 1, 3], p.to_vec()).unwrap());
            let l = g.normal_loss(x, &gt, &[true]).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_loss_is_two_minus_two_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = unit_field(&mut rng, 20);
        let pred = Tensor::random_uniform([1, 1, 20, 3], -2.0, 2.0, &mut rng);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let mut g = Graph::new();
        let x = g.constant(pred.clone());
        let l = g.normal_loss(x, &gt, &mask).unwrap();
        let mut cos_sum = 0.0;
        let mut n = 0.0;
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let p = &pred.data()[3 * i..3 * i + 3];
            let q = &gt.data()[3 * i..3 * i + 3];
            let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            let norm = p.iter().map(|a| a * a).sum::<f64>().sqrt();
            cos_sum += dot / norm;
            n += 1.0;
        }
        assert!((g.value(l).item() - 2.0 * (1.0 - cos_sum / n)).abs() <= 1e-12);
    }

    #[test]
    fn empty_mask_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 2, 3], 1.0));
        let gt = Tensor::full([1, 1, 2, 3], 0.0);
        let l = g.normal_loss(x, &gt, &[false, false]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&d| d == 0.0));
    }
}
