//! Central finite-difference checks of every differentiable operation, in
//! f64, on five small random shapes each. Scalar objectives are formed by
//! projecting outputs onto fixed random tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{
    mix_features, shortcut_aggregate, InitPolicy, NddrConfig, NddrLayer, NormPlacement,
};
use crate::layers::{BnOptions, ConvGeometry, PoolSpec, ResizeMode};
use crate::metrics::IGNORE_LABEL;
use crate::tensor::{grad_check_inputs, Graph, Shape, Tensor, Var};

/// Largest acceptable relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

pub const OPS: [&str; 15] = [
    "conv2d",
    "conv1x1",
    "batch_norm",
    "max_pool",
    "bilinear_resize",
    "fully_connected",
    "relu",
    "softmax",
    "global_avg_pool",
    "softmax_cross_entropy",
    "normal_loss",
    "nddr_forward",
    "cross_stitch",
    "sluice",
    "shortcut_aggregate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    /// Worst relative error over all cases and inputs.
    pub max_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOL
    }
}

fn rnd(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_uniform(shape, -2.0, 2.0, rng)
}

/// Values in [-2, 2] at least `margin` away from zero, keeping ReLU kinks
/// out of the difference stencil.
fn away_from_zero(shape: impl Into<Shape>, margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(margin..2.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn projected(g: &mut Graph<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p)?;
    g.sum(prod)
}

fn sum_projected(g: &mut Graph<f64>, outs: &[Var], projs: &[Tensor<f64>]) -> Result<Var> {
    let terms = outs
        .iter()
        .zip(projs)
        .map(|(&o, p)| Ok((projected(g, o, p)?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

fn unit_field(sites: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(sites * 3);
    for _ in 0..sites {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.2..1.0),
        ];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

struct Acc {
    op: &'static str,
    cases: usize,
    max_error: f64,
}

impl Acc {
    fn new(op: &'static str) -> Self {
        Acc {
            op,
            cases: 0,
            max_error: 0.0,
        }
    }

    fn add(&mut self, errs: Vec<f64>) {
        self.cases += 1;
        for e in errs {
            self.max_error = if e.is_nan() {
                f64::INFINITY
            } else {
                self.max_error.max(e)
            };
        }
    }

    fn done(self) -> OpCheck {
        OpCheck {
            op: self.op,
            cases: self.cases,
            max_error: self.max_error,
        }
    }
}

fn conv2d(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("conv2d");
    for (xs, ws, geom) in [
        (
            [2, 5, 5, 3],
            [4, 3, 3, 3],
            ConvGeometry {
                stride: 1,
                padding: 1,
            },
        ),
        (
            [1, 4, 6, 2],
            [3, 3, 3, 2],
            ConvGeometry {
                stride: 2,
                padding: 1,
            },
        ),
        (
            [2, 3, 3, 2],
            [2, 2, 2, 2],
            ConvGeometry {
                stride: 1,
                padding: 0,
            },
        ),
        ([1, 4, 4, 3], [2, 1, 1, 3], ConvGeometry::POINTWISE),
        (
            [3, 2, 2, 1],
            [2, 3, 3, 1],
            ConvGeometry {
                stride: 1,
                padding: 1,
            },
        ),
    ] {
        let x = rnd(xs, rng);
        let w = rnd(ws, rng);
        let b = rnd([1, 1, 1, ws[0]], rng);
        let out_shape = {
            let mut g = Graph::new();
            let (a, bw, bb) = (
                g.constant(x.clone()),
                g.constant(w.clone()),
                g.constant(b.clone()),
            );
            let o = g.conv2d(a, bw, Some(bb), geom)?;
            g.shape(o)
        };
        let proj = rnd(out_shape, rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
                projected(g, o, &proj)
            },
            &[x, w, b],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn conv1x1(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("conv1x1");
    for (n, h, w, cin, cout) in [
        (2, 3, 3, 4, 2),
        (1, 2, 5, 3, 3),
        (3, 1, 1, 6, 2),
        (2, 2, 2, 2, 4),
        (1, 4, 4, 5, 5),
    ] {
        let x = rnd([n, h, w, cin], rng);
        let wt = rnd([cout, 1, 1, cin], rng);
        let b = rnd([1, 1, 1, cout], rng);
        let proj = rnd([n, h, w, cout], rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = g.conv1x1(v[0], v[1], Some(v[2]))?;
                projected(g, o, &proj)
            },
            &[x, wt, b],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn batch_norm(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("batch_norm");
    for shape in [
        [4, 3, 3, 2],
        [2, 2, 2, 3],
        [3, 1, 2, 1],
        [5, 1, 1, 4],
        [2, 3, 2, 2],
    ] {
        let x = rnd(shape, rng);
        let c = shape[3];
        let gamma = rnd([1, 1, 1, c], rng);
        let beta = rnd([1, 1, 1, c], rng);
        let proj = rnd(shape, rng);
        for opts in [BnOptions::train(), BnOptions::eval()] {
            acc.add(grad_check_inputs(
                |g, v| {
                    let mut rm = vec![0.1; c];
                    let mut rv = vec![1.3; c];
                    let o = g.batch_norm(v[0], Some(v[1]), Some(v[2]), &mut rm, &mut rv, opts)?;
                    projected(g, o, &proj)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                GRAD_STEP,
            )?);
        }
    }
    Ok(acc.done())
}

fn max_pool(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("max_pool");
    for (shape, spec) in [
        ([1, 4, 4, 2], PoolSpec::halving()),
        ([2, 6, 4, 1], PoolSpec::halving()),
        ([1, 3, 3, 2], PoolSpec::dense()),
        (
            [2, 4, 4, 3],
            PoolSpec {
                window: 3,
                stride: 2,
                padding: 1,
            },
        ),
        (
            [1, 5, 5, 1],
            PoolSpec {
                window: 2,
                stride: 1,
                padding: 0,
            },
        ),
    ] {
        // distinct, well-separated values keep every window's max unique
        let n = Shape::from(shape).numel();
        let mut vals: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(shape, vals)?;
        let out_shape = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let o = g.max_pool(v, spec)?;
            g.shape(o)
        };
        let proj = rnd(out_shape, rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = g.max_pool(v[0], spec)?;
                projected(g, o, &proj)
            },
            &[x],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn bilinear_resize(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("bilinear_resize");
    for (shape, oh, ow) in [
        ([1, 2, 2, 1], 5, 3),
        ([2, 4, 4, 2], 2, 2),
        ([1, 3, 5, 2], 7, 4),
        ([1, 1, 1, 3], 4, 4),
        ([2, 4, 2, 1], 4, 8),
    ] {
        let x = rnd(shape, rng);
        let proj = rnd([shape[0], oh, ow, shape[3]], rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = g.bilinear_resize(v[0], oh, ow)?;
                projected(g, o, &proj)
            },
            &[x],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

const DENSE_SHAPES: [(usize, usize, usize, usize, usize); 5] = [
    (2, 2, 2, 3, 4),
    (1, 1, 1, 5, 2),
    (3, 2, 1, 2, 3),
    (2, 3, 3, 1, 2),
    (1, 2, 2, 2, 6),
];

fn fully_connected(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("fully_connected");
    for (n, h, w, c, f) in DENSE_SHAPES {
        let x = rnd([n, h, w, c], rng);
        let wt = rnd([f, 1, 1, h * w * c], rng);
        let b = rnd([1, 1, 1, f], rng);
        let proj = rnd([n, 1, 1, f], rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = g.fully_connected(v[0], v[1], Some(v[2]))?;
                projected(g, o, &proj)
            },
            &[x, wt, b],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn unary(op: &'static str, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new(op);
    for (n, h, w, c, _) in DENSE_SHAPES {
        let x = away_from_zero([n, h, w, c], 1e-3, rng);
        let out_c = if op == "global_avg_pool" {
            [n, 1, 1, c]
        } else {
            [n, h, w, c]
        };
        let proj = rnd(out_c, rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = match op {
                    "relu" => g.relu(v[0])?,
                    "softmax" => g.softmax(v[0])?,
                    _ => g.global_avg_pool(v[0])?,
                };
                projected(g, o, &proj)
            },
            &[x],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

const LOSS_SHAPES: [(usize, usize, usize, usize); 5] = [
    (2, 2, 2, 3),
    (1, 3, 3, 5),
    (4, 1, 1, 2),
    (1, 2, 4, 7),
    (2, 1, 3, 4),
];

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("softmax_cross_entropy");
    for (n, h, w, c) in LOSS_SHAPES {
        let logits = rnd([n, h, w, c], rng);
        // every fourth site is ignored
        let labels: Vec<usize> = (0..n * h * w)
            .map(|i| {
                if i % 4 == 3 {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..c)
                }
            })
            .collect();
        acc.add(grad_check_inputs(
            |g, v| g.softmax_cross_entropy(v[0], &labels, IGNORE_LABEL),
            &[logits],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn normal_loss(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("normal_loss");
    for (n, h, w, _) in LOSS_SHAPES {
        let sites = n * h * w;
        let pred = rnd([n, h, w, 3], rng);
        let gt = Tensor::new([n, h, w, 3], unit_field(sites, rng))?;
        let mask: Vec<bool> = (0..sites).map(|i| i % 5 != 1).collect();
        acc.add(grad_check_inputs(
            |g, v| g.normal_loss(v[0], &gt, &mask),
            &[pred],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn nddr_forward(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("nddr_forward");
    for (k, c, [n, h, w], norm) in [
        (2, 3, [2, 2, 2], NormPlacement::Shared),
        (2, 2, [3, 1, 2], NormPlacement::PerTask),
        (3, 2, [2, 2, 1], NormPlacement::Shared),
        (2, 4, [1, 2, 3], NormPlacement::None),
        (1, 3, [4, 1, 1], NormPlacement::Shared),
    ] {
        let config = NddrConfig { norm, affine: true };
        let layer = NddrLayer::<f64>::new(k, c, InitPolicy::Xavier, config, rng)?;
        let mut inputs: Vec<Tensor<f64>> = (0..k).map(|_| rnd([n, h, w, c], rng)).collect();
        inputs.extend((0..k).map(|_| rnd([c, 1, 1, k * c], rng)));
        inputs.extend((0..k).map(|_| rnd([1, 1, 1, c], rng)));
        let projs: Vec<Tensor<f64>> = (0..k).map(|_| rnd([n, h, w, c], rng)).collect();
        acc.add(grad_check_inputs(
            |g, v| {
                // a fresh copy per evaluation: train-mode statistics are
                // updated on every call
                let mut layer = layer.clone();
                let (outs, _, _) = layer.forward_with(g, &v[..k], &v[k..2 * k], &v[2 * k..])?;
                sum_projected(g, &outs, &projs)
            },
            &inputs,
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn mixing(op: &'static str, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new(op);
    let cases: [(usize, usize, usize); 5] = if op == "cross_stitch" {
        [(2, 3, 1), (3, 2, 1), (2, 1, 1), (4, 2, 1), (2, 5, 1)]
    } else {
        [(2, 4, 2), (2, 4, 4), (3, 2, 2), (2, 6, 3), (2, 3, 1)]
    };
    for (k, c, s) in cases {
        let feats: Vec<Tensor<f64>> = (0..k).map(|_| rnd([2, 2, 2, c], rng)).collect();
        let mut inputs = feats;
        inputs.push(rnd([1, 1, k * s, k * s], rng));
        let projs: Vec<Tensor<f64>> = (0..k).map(|_| rnd([2, 2, 2, c], rng)).collect();
        acc.add(grad_check_inputs(
            |g, v| {
                let outs = mix_features(g, &v[..k], v[k], k, c)?;
                sum_projected(g, &outs, &projs)
            },
            &inputs,
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

fn shortcut(rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mut acc = Acc::new("shortcut_aggregate");
    for (shapes, cr) in [
        ([[2, 4, 4, 3], [2, 2, 2, 2]], 3),
        ([[1, 6, 6, 2], [1, 3, 3, 4]], 2),
        ([[1, 2, 2, 1], [1, 2, 2, 2]], 4),
        ([[2, 5, 3, 2], [2, 2, 1, 1]], 2),
        ([[1, 8, 8, 1], [1, 4, 4, 2]], 1),
    ] {
        let [s0, s1] = shapes;
        let lo = rnd(s0, rng);
        let hi = rnd(s1, rng);
        let w = rnd([cr, 1, 1, s0[3] + s1[3]], rng);
        let b = rnd([1, 1, 1, cr], rng);
        let proj = rnd([s1[0], s1[1], s1[2], cr], rng);
        acc.add(grad_check_inputs(
            |g, v| {
                let o = shortcut_aggregate(
                    g,
                    &[v[0], v[1]],
                    (s1[1], s1[2]),
                    v[2],
                    Some(v[3]),
                    ResizeMode::Bilinear,
                )?;
                projected(g, o, &proj)
            },
            &[lo, hi, w, b],
            GRAD_STEP,
        )?);
    }
    Ok(acc.done())
}

/// Checks one operation from [`OPS`].
pub fn check_op(op: &str, seed: u64) -> Result<OpCheck> {
    let idx = OPS.iter().position(|&o| o == op).ok_or_else(|| {
        Error::Invalid(format!(
            "unknown operation `{op}`; known: {}",
            OPS.join(", ")
        ))
    })?;
    let op = OPS[idx];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64));
    match op {
        "conv2d" => conv2d(&mut rng),
        "conv1x1" => conv1x1(&mut rng),
        "batch_norm" => batch_norm(&mut rng),
        "max_pool" => max_pool(&mut rng),
        "bilinear_resize" => bilinear_resize(&mut rng),
        "fully_connected" => fully_connected(&mut rng),
        "softmax_cross_entropy" => softmax_cross_entropy(&mut rng),
        "normal_loss" => normal_loss(&mut rng),
        "nddr_forward" => nddr_forward(&mut rng),
        "shortcut_aggregate" => shortcut(&mut rng),
        "cross_stitch" | "sluice" => mixing(op, &mut rng),
        _ => unary(op, &mut rng),
    }
}

/// Checks every operation in [`OPS`].
pub fn check_all(seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        for r in check_all(0).unwrap() {
            assert!(r.cases >= 5, "{r:?}");
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_operation_is_rejected() {
        assert!(matches!(check_op("conv3d", 0), Err(Error::Invalid(_))));
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // |x| has a kink at 0 that the stencil straddles
        let x = Tensor::new([1, 1, 1, 1], vec![0.0]).unwrap();
        let errs = grad_check_inputs(
            |g, v| {
                let r = g.relu(v[0])?;
                g.sum(r)
            },
            &[x],
            GRAD_STEP,
        )
        .unwrap();
        assert!(errs[0] > GRAD_TOL);
    }
}
