//! Network primitives: convolutions, batch normalization, pooling,
//! resizing and activations. Each primitive is a method on
//! [`Graph`](crate::tensor::Graph) that records its own reverse rule.

mod activation;
mod batch_norm;
mod conv;
mod pool;
mod resize;

pub use activation::softmax_row;
pub use batch_norm::{
    identity_running_var, BatchNormState, BnMode, BnOptions, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
pub use conv::{Conv2dParams, ConvGeometry};
pub use pool::PoolSpec;
pub use resize::ResizeMode;

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Var};

impl<T: Scalar> Conv2dParams<T> {
    /// Places the parameters on `g` as differentiable leaves and applies
    /// the convolution. Returns `(output, weight, bias)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var, Option<Var>)> {
        let w = g.param(self.weight.clone());
        let b = self.bias.as_ref().map(|b| g.param(b.clone()));
        let out = g.conv2d(x, w, b, self.geometry)?;
        Ok((out, w, b))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{Graph, Tensor};

    #[test]
    fn pointwise_conv_is_spatially_local() {
        // permuting sites of the input permutes output sites identically
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let x = Tensor::<f64>::random_uniform([1, 2, 3, 4], -2.0, 2.0, &mut rng);
        let w = Tensor::<f64>::random_uniform([3, 1, 1, 4], -2.0, 2.0, &mut rng);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let permute = |t: &Tensor<f64>| {
            let c = t.shape().c;
            let mut out = Vec::new();
            for &p in &perm {
                out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let apply = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(input), g.constant(w.clone()));
            let o = g.conv1x1(a, b, None).unwrap();
            g.value(o).clone()
        };
        assert_eq!(apply(permute(&x)), permute(&apply(x)));
    }
}
