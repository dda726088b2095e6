//! Cross-stitch and sluice fusion: scalar mixing of whole tasks, or of
//! contiguous channel subspaces within tasks. Both are NDDR layers whose
//! projections are constrained to scalar multiples of identity blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::nddr::{check_features, InitPolicy, NddrConfig, NddrLayer, NormPlacement};

/// Sluice layer with `S` subspaces per task and a `(K·S) × (K·S)` mixing
/// matrix. Subspace `s` of task `i` is group `i·S + s`. A cross-stitch
/// layer is the `S = 1` case.
#[derive(Debug, Clone)]
pub struct SluiceLayer<T> {
    pub tasks: usize,
    pub channels: usize,
    pub subspaces: usize,
    /// `(1, 1, K·S, K·S)`.
    pub mix: Tensor<T>,
}

pub type CrossStitchLayer<T> = SluiceLayer<T>;

pub const DEFAULT_SUBSPACES: usize = 2;

impl<T: Scalar> SluiceLayer<T> {
    pub fn new(
        tasks: usize,
        channels: usize,
        subspaces: usize,
        init: InitPolicy,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if subspaces == 0 || channels % subspaces != 0 {
            return Err(Error::Invalid(format!(
                "{channels} channels cannot be split into {subspaces} equal subspaces"
            )));
        }
        let g = tasks * subspaces;
        let mix = match init {
            InitPolicy::Diagonal { alpha, beta } => Tensor::from_fn([1, 1, g, g], |[_, _, o, i]| {
                let (ti, si) = (o / subspaces, o % subspaces);
                let (tj, sj) = (i / subspaces, i % subspaces);
                if si != sj {
                    T::zero()
                } else if ti == tj {
                    T::from_f64_lossy(alpha)
                } else {
                    T::from_f64_lossy(beta)
                }
            }),
            InitPolicy::Xavier => {
                let limit = (6.0 / (g + subspaces) as f64).sqrt();
                Tensor::random_uniform([1, 1, g, g], -limit, limit, rng)
            }
        };
        Ok(SluiceLayer {
            tasks,
            channels,
            subspaces,
            mix,
        })
    }

    /// Cross-stitch layer from a `K × K` matrix.
    pub fn cross_stitch(channels: usize, matrix: Tensor<T>) -> Result<Self> {
        Self::from_mix(channels, 1, matrix)
    }

    pub fn from_mix(channels: usize, subspaces: usize, mix: Tensor<T>) -> Result<Self> {
        let s = mix.shape();
        if s.n != 1 || s.h != 1 || s.w != s.c || subspaces == 0 || s.c % subspaces != 0 {
            return Err(Error::shape("sluice", format!("mixing matrix {s}")));
        }
        if channels % subspaces != 0 {
            return Err(Error::Invalid(format!(
                "{channels} channels cannot be split into {subspaces} equal subspaces"
            )));
        }
        Ok(SluiceLayer {
            tasks: s.c / subspaces,
            channels,
            subspaces,
            mix,
        })
    }

    /// The equivalent NDDR layer (no normalization, zero bias): task `i`'s
    /// projection maps input channel `(j·S + t)·b + c` to output channel
    /// `s·b + c` with weight `mix[i·S + s, j·S + t]`, `b = C/S`.
    pub fn to_nddr(&self) -> NddrLayer<T> {
        let (k, c, s) = (self.tasks, self.channels, self.subspaces);
        let b = c / s;
        let gs = k * s;
        let m = self.mix.data();
        let weights = (0..k)
            .map(|i| {
                Tensor::from_fn([c, 1, 1, k * c], |[o, _, _, input]| {
                    let (sub_o, co) = (o / b, o % b);
                    let (grp_in, ci) = (input / b, input % b);
                    if co != ci {
                        T::zero()
                    } else {
                        m[(i * s + sub_o) * gs + grp_in]
                    }
                })
            })
            .collect();
        NddrLayer {
            tasks: k,
            channels: c,
            weights,
            biases: (0..k).map(|_| Tensor::zeros([1, 1, 1, c])).collect(),
            norms: Vec::new(),
            config: NddrConfig {
                norm: NormPlacement::None,
                affine: false,
            },
        }
    }

    /// Places the mixing matrix on `g` and fuses `features`. Returns the
    /// per-task outputs and the mixing-matrix handle.
    pub fn forward(&self, g: &mut Graph<T>, features: &[Var]) -> Result<(Vec<Var>, Var)> {
        let mix = g.param(self.mix.clone());
        let outs = mix_features(g, features, mix, self.tasks, self.channels)?;
        Ok((outs, mix))
    }
}

/// Fuses per-task features with an already placed `(1, 1, K·S, K·S)`
/// mixing matrix.
pub fn mix_features<T: Scalar>(
    g: &mut Graph<T>,
    features: &[Var],
    mix: Var,
    tasks: usize,
    channels: usize,
) -> Result<Vec<Var>> {
    check_features(g, features, tasks, channels)?;
    let cat = g.concat_channels(features)?;
    let mixed = g.group_mix(cat, mix)?;
    (0..tasks)
        .map(|i| g.slice_channels(mixed, i * channels, channels))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn feats(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Vec<Tensor<f64>> {
        (0..k)
            .map(|_| Tensor::random_uniform([2, 2, 3, c], -1.0, 1.0, rng))
            .collect()
    }

    fn run(layer: &SluiceLayer<f64>, input: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = input.iter().map(|f| g.constant(f.clone())).collect();
        let (outs, _) = layer.forward(&mut g, &vars).unwrap();
        outs.iter().map(|&v| g.value(v).clone()).collect()
    }

    #[test]
    fn identity_mix_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feats(&mut rng, 2, 4);
        for s in [1, 2, 4] {
            let layer = SluiceLayer::new(2, 4, s, InitPolicy::IDENTITY, &mut rng).unwrap();
            assert_eq!(run(&layer, &f), f);
        }
    }

    #[test]
    fn swap_matrix_exchanges_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = feats(&mut rng, 2, 3);
        let swap = Tensor::matrix(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let layer = SluiceLayer::cross_stitch(3, swap).unwrap();
        let out = run(&layer, &f);
        assert_eq!(out[0], f[1]);
        assert_eq!(out[1], f[0]);
    }

    #[test]
    fn cross_stitch_matches_diagonal_nddr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = feats(&mut rng, 2, 3);
        let a = Tensor::matrix(&[&[0.9, 0.1], &[0.1, 0.9]]).unwrap();
        let layer = SluiceLayer::cross_stitch(3, a).unwrap();
        let cfg = NddrConfig {
            norm: NormPlacement::None,
            affine: false,
        };
        let mut nddr = NddrLayer::new(2, 3, InitPolicy::RECOMMENDED, cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let want = nddr.forward(&mut g, &vars).unwrap().outputs;
        for (got, want) in run(&layer, &f).iter().zip(want) {
            assert!(got.max_abs_diff(g.value(want)) <= 1e-12);
        }
    }

    #[test]
    fn indivisible_subspaces_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(SluiceLayer::<f64>::new(2, 5, 2, InitPolicy::IDENTITY, &mut rng).is_err());
    }
}
