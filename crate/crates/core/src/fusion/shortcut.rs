use crate::error::{Error, Result};
use crate::layers::ResizeMode;
use crate::tensor::{Graph, Scalar, Var};

/// Resizes every level's fusion output of one task to `target`,
/// concatenates them in level order and reduces the channels with the
/// `(Cr, 1, 1, ΣC)` projection `reduce_w`.
pub fn shortcut_aggregate<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[Var],
    target: (usize, usize),
    reduce_w: Var,
    reduce_b: Option<Var>,
    mode: ResizeMode,
) -> Result<Var> {
    let last = *levels
        .last()
        .ok_or_else(|| Error::shape("shortcut_aggregate", "no levels"))?;
    let ls = g.shape(last);
    if (ls.h, ls.w) != target {
        return Err(Error::shape(
            "shortcut_aggregate",
            format!(
                "target {}x{} differs from last level {ls}",
                target.0, target.1
            ),
        ));
    }
    let mut resized = Vec::with_capacity(levels.len());
    for &v in levels {
        let s = g.shape(v);
        resized.push(if (s.h, s.w) == target {
            v
        } else {
            g.resize(v, target.0, target.1, mode)?
        });
    }
    let cat = g.concat_channels(&resized)?;
    g.conv1x1(cat, reduce_w, reduce_b)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_level_identity_reduce_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random_uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng);
        let eye = Tensor::from_fn([4, 1, 1, 4], |[o, _, _, i]| if o == i { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let (xv, w) = (g.constant(x.clone()), g.constant(eye));
        let out = shortcut_aggregate(&mut g, &[xv], (3, 3), w, None, ResizeMode::Bilinear).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn concatenated_width_is_sum_of_levels() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 8, 8, 8]));
        let b = g.constant(Tensor::zeros([1, 4, 4, 16]));
        // a reduction expecting 24 inputs is accepted, 23 is not
        let w24 = g.constant(Tensor::zeros([5, 1, 1, 24]));
        let out =
            shortcut_aggregate(&mut g, &[a, b], (4, 4), w24, None, ResizeMode::Bilinear).unwrap();
        assert_eq!(g.shape(out).dims(), [1, 4, 4, 5]);
        let w23 = g.constant(Tensor::zeros([5, 1, 1, 23]));
        assert!(
            shortcut_aggregate(&mut g, &[a, b], (4, 4), w23, None, ResizeMode::Bilinear).is_err()
        );
    }

    #[test]
    fn empty_or_mismatched_target_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(shortcut_aggregate(&mut g, &[], (1, 1), w, None, ResizeMode::Bilinear).is_err());
        let a = g.constant(Tensor::zeros([1, 2, 2, 1]));
        assert!(shortcut_aggregate(&mut g, &[a], (1, 1), w, None, ResizeMode::Bilinear).is_err());
    }
}
