use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Sample, Split, TaskKind};

/// Image extents must be multiples of this (four halving stages).
pub const POOL_FACTOR: usize = 16;

/// Pixels within this Chebyshev distance of a different class carry a
/// direction label.
pub const BAND_RADIUS: usize = 1;

/// z-component of a direction label before renormalization.
pub const NORMAL_Z: f64 = 1.0;

// sub-samples per pixel side for coverage
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Disk,
    /// Regular polygon with this many sides.
    Polygon(usize),
}

impl ShapeKind {
    /// Shape drawn for foreground class `class ≥ 1`.
    pub fn for_class(class: usize) -> Self {
        [
            ShapeKind::Disk,
            ShapeKind::Polygon(4),
            ShapeKind::Polygon(3),
            ShapeKind::Polygon(6),
        ][(class - 1) % 4]
    }
}

/// One shape in pixel coordinates: `x` runs along the width, `y` down the
/// height, and pixel `(row i, col j)` has its center at `(j + ½, i + ½)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    /// Radius of the disk, or circumradius of the polygon.
    pub r: f64,
    pub angle: f64,
    pub color: [f32; 3],
}

impl SceneShape {
    /// Signed distance (negative inside) and its outward unit gradient.
    pub fn sdf(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disk => {
                let d = (dx * dx + dy * dy).sqrt();
                let g = if d > 0.0 {
                    [dx / d, dy / d]
                } else {
                    [1.0, 0.0]
                };
                (d - self.r, g)
            }
            ShapeKind::Polygon(n) => {
                let verts: Vec<[f64; 2]> = (0..n)
                    .map(|k| {
                        let a = self.angle + 2.0 * PI * k as f64 / n as f64;
                        [self.r * a.cos(), self.r * a.sin()]
                    })
                    .collect();
                let mut inside = true;
                let mut best = (f64::INFINITY, [0.0, 0.0], [0.0, 0.0]);
                for k in 0..n {
                    let (a, b) = (verts[k], verts[(k + 1) % n]);
                    let e = [b[0] - a[0], b[1] - a[1]];
                    let rel = [dx - a[0], dy - a[1]];
                    // vertices run counter-clockwise in (x, y), so interior is left of every edge
                    if e[0] * rel[1] - e[1] * rel[0] < 0.0 {
                        inside = false;
                    }
                    let t = ((rel[0] * e[0] + rel[1] * e[1]) / (e[0] * e[0] + e[1] * e[1]))
                        .clamp(0.0, 1.0);
                    let q = [a[0] + t * e[0], a[1] + t * e[1]];
                    let d = ((dx - q[0]).powi(2) + (dy - q[1]).powi(2)).sqrt();
                    if d < best.0 {
                        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
                        best = (d, q, [e[1] / len, -e[0] / len]);
                    }
                }
                let (d, q, edge_normal) = best;
                let g = if d > 1e-9 {
                    let s = if inside { -1.0 } else { 1.0 };
                    [s * (dx - q[0]) / d, s * (dy - q[1]) / d]
                } else {
                    edge_normal
                };
                (if inside { -d } else { d }, g)
            }
        }
    }

    pub fn coverage(&self, i: usize, j: usize) -> f64 {
        let mut hits = 0;
        for a in 0..SUPERSAMPLE {
            for b in 0..SUPERSAMPLE {
                let y = i as f64 + (a as f64 + 0.5) / SUPERSAMPLE as f64;
                let x = j as f64 + (b as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.sdf(x, y).0 < 0.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// A rasterized scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// `(1, hw, hw, 3)` colors in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Class per pixel, row-major.
    pub classes: Vec<usize>,
    /// Unit direction per pixel; zero outside the boundary band.
    pub normals: Vec<[f32; 3]>,
    pub band: Vec<bool>,
}

/// Rasterizes non-overlapping shapes over a flat background. A pixel takes
/// the class of the shape covering at least half of it; band pixels get
/// the outward normal `(∂x, ∂y, z)` of the signed distance of the nearest
/// shape, renormalized.
pub fn render_scene(hw: usize, shapes: &[SceneShape], background: [f32; 3]) -> RenderedScene {
    let sites = hw * hw;
    let mut image = vec![0f32; sites * 3];
    let mut classes = vec![0usize; sites];
    for i in 0..hw {
        for j in 0..hw {
            let p = i * hw + j;
            let mut color = background;
            for s in shapes {
                let cov = s.coverage(i, j);
                if cov > 0.0 {
                    for k in 0..3 {
                        color[k] = (1.0 - cov as f32) * color[k] + cov as f32 * s.color[k];
                    }
                }
                if cov >= 0.5 {
                    classes[p] = s.class;
                }
            }
            image[p * 3..p * 3 + 3].copy_from_slice(&color);
        }
    }
    let band = boundary_band(&classes, hw);
    let normals = (0..sites)
        .map(|p| {
            if !band[p] || shapes.is_empty() {
                return [0.0; 3];
            }
            let (x, y) = ((p % hw) as f64 + 0.5, (p / hw) as f64 + 0.5);
            let (_, g) = shapes
                .iter()
                .map(|s| s.sdf(x, y))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            let n = (g[0] * g[0] + g[1] * g[1] + NORMAL_Z * NORMAL_Z).sqrt();
            [(g[0] / n) as f32, (g[1] / n) as f32, (NORMAL_Z / n) as f32]
        })
        .collect();
    RenderedScene {
        image: Tensor::new([1, hw, hw, 3], image).expect("sized above"),
        classes,
        normals,
        band,
    }
}

/// Pixels with a differently labelled pixel within [`BAND_RADIUS`].
fn boundary_band(classes: &[usize], hw: usize) -> Vec<bool> {
    let r = BAND_RADIUS as isize;
    (0..hw * hw)
        .map(|p| {
            let (i, j) = ((p / hw) as isize, (p % hw) as isize);
            (-r..=r).any(|di| {
                (-r..=r).any(|dj| {
                    let (a, b) = (i + di, j + dj);
                    a >= 0
                        && b >= 0
                        && (a as usize) < hw
                        && (b as usize) < hw
                        && classes[a as usize * hw + b as usize] != classes[p]
                })
            })
        })
        .collect()
}

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
];

fn class_color(class: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let base = PALETTE[(class - 1) % PALETTE.len()];
    // beyond the palette, darken so classes stay distinguishable
    let shade = 1.0 - 0.3 * ((class - 1) / PALETTE.len()) as f32;
    base.map(|c| (c * shade + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0))
}

fn check_hw(hw: usize) -> Result<()> {
    if hw == 0 || hw % POOL_FACTOR != 0 {
        return Err(Error::Invalid(format!(
            "image size {hw} is not a multiple of {POOL_FACTOR}"
        )));
    }
    Ok(())
}

pub(super) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Sample `index` of the shapes generator: one to three non-overlapping
/// shapes whose kind and color follow their class.
pub fn shapes_sample(index: usize, hw: usize, classes: usize, seed: u64) -> Result<Sample> {
    check_hw(hw)?;
    if classes < 2 {
        return Err(Error::Invalid("shapes need at least 2 classes".into()));
    }
    let mut rng = sample_rng(seed, index);
    let gray = rng.gen_range(0.05..0.3);
    let background =
        [gray, gray, gray].map(|g: f32| (g + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
    let count = rng.gen_range(1..=3);
    let (rmin, rmax) = (hw as f64 / 8.0, hw as f64 / 4.0);
    let gap = (2 * BAND_RADIUS + 2) as f64;
    let mut shapes: Vec<SceneShape> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let r = rng.gen_range(rmin..rmax);
            let cx = rng.gen_range(r + 1.0..hw as f64 - r - 1.0);
            let cy = rng.gen_range(r + 1.0..hw as f64 - r - 1.0);
            let class = rng.gen_range(1..classes);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let color = class_color(class, &mut rng);
            let clear = shapes
                .iter()
                .all(|s| ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt() >= s.r + r + gap);
            if clear {
                shapes.push(SceneShape {
                    kind: ShapeKind::for_class(class),
                    class,
                    cx,
                    cy,
                    r,
                    angle,
                    color,
                });
                break;
            }
        }
    }
    let scene = render_scene(hw, &shapes, background);
    let class_map: Vec<f32> = scene.classes.iter().map(|&c| c as f32).collect();
    let normals: Vec<f32> = scene.normals.iter().flatten().copied().collect();
    let band: Vec<f32> = scene
        .band
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    Ok(Sample {
        input: scene.image,
        labels: vec![
            Tensor::new([1, hw, hw, 1], class_map)?,
            Tensor::new([1, hw, hw, 3], normals)?,
        ],
        masks: vec![
            Tensor::full([1, hw, hw, 1], 1.0),
            Tensor::new([1, hw, hw, 1], band)?,
        ],
    })
}

/// `n` samples pairing per-pixel shape classes (task 0) with per-pixel
/// boundary directions (task 1, masked to the boundary band).
pub fn gen_shapes_tasks(n: usize, hw: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| shapes_sample(i, hw, classes, seed))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        generator: "shapes".into(),
        seed,
        split: Split::Train,
        tasks: vec![TaskKind::PixelClass { classes }, TaskKind::PixelDirection],
        samples,
    })
}
