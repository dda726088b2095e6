use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::shapes::sample_rng;
use super::{Dataset, Sample, Split, TaskKind};

pub const AGE_BINS: usize = 100;

// blob size range as fractions of the image size
const R_MIN: f64 = 0.1;
const R_MAX: f64 = 0.3;
// semi-axes are r·ELONGATION and r/ELONGATION
const ELONGATION: f64 = 1.4;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// `floor(100·(r − rmin)/(rmax − rmin))`, clamped to `[0, 99]`.
pub fn age_bin(r: f64, rmin: f64, rmax: f64) -> usize {
    let b = (AGE_BINS as f64 * (r - rmin) / (rmax - rmin)).floor();
    b.clamp(0.0, (AGE_BINS - 1) as f64) as usize
}

/// Sample `index` of the attribute generator: one elliptical blob whose
/// mean radius encodes a 100-bin class (task 0) and whose major axis is
/// horizontal (class 0) or vertical (class 1) (task 1).
pub fn attr_sample(index: usize, hw: usize, seed: u64) -> Result<Sample> {
    let mut rng = sample_rng(seed, index);
    let (rmin, rmax) = (R_MIN * hw as f64, R_MAX * hw as f64);
    // sizes follow a seeded golden-ratio sequence: a pure function of the
    // index whose histogram is uniform at every prefix length
    let offset: f64 = sample_rng(seed, usize::MAX).gen();
    let r = rmin + (rmax - rmin) * (offset + index as f64 * GOLDEN).fract();
    let gender = rng.gen_range(0..2usize);
    let angle = gender as f64 * PI / 2.0 + rng.gen_range(-PI / 12.0..PI / 12.0);
    let (a, b) = (r * ELONGATION, r / ELONGATION);
    // keep the blob inside the frame; tiny images just centre it
    let half = hw as f64 / 2.0;
    let slack = (half - a - 1.0).max(0.0) + 1e-9;
    let cx = half + rng.gen_range(-slack..slack);
    let cy = half + rng.gen_range(-slack..slack);
    let bg: f32 = rng.gen_range(0.05..0.3);
    let fg: f32 = rng.gen_range(0.7..0.95);
    let (cos, sin) = (angle.cos(), angle.sin());
    let image = Tensor::from_fn([1, hw, hw, 3], |[_, i, j, _]| {
        // 4×4 supersampled coverage of the rotated ellipse
        let mut hits = 0;
        for s in 0..4 {
            for t in 0..4 {
                let x = j as f64 + (t as f64 + 0.5) / 4.0 - cx;
                let y = i as f64 + (s as f64 + 0.5) / 4.0 - cy;
                let (u, v) = (x * cos + y * sin, -x * sin + y * cos);
                if (u / a).powi(2) + (v / b).powi(2) < 1.0 {
                    hits += 1;
                }
            }
        }
        let cov = hits as f32 / 16.0;
        bg * (1.0 - cov) + fg * cov
    });
    let one = || Tensor::full([1, 1, 1, 1], 1.0f32);
    Ok(Sample {
        input: image,
        labels: vec![
            Tensor::full([1, 1, 1, 1], age_bin(r, rmin, rmax) as f32),
            Tensor::full([1, 1, 1, 1], gender as f32),
        ],
        masks: vec![one(), one()],
    })
}

/// `n` blob images labelled with a 100-bin size class and a 2-class
/// orientation.
pub fn gen_attr_tasks(n: usize, hw: usize, seed: u64) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| attr_sample(i, hw, seed))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        generator: "attrs".into(),
        seed,
        split: Split::Train,
        tasks: vec![
            TaskKind::ImageClass {
                classes: AGE_BINS,
                ordinal: true,
            },
            TaskKind::ImageClass {
                classes: 2,
                ordinal: false,
            },
        ],
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_boundaries() {
        assert_eq!(age_bin(3.2, 3.2, 9.6), 0);
        assert_eq!(age_bin(9.6, 3.2, 9.6), 99);
        assert_eq!(age_bin(100.0, 3.2, 9.6), 99);
        assert_eq!(age_bin(0.0, 3.2, 9.6), 0);
        assert_eq!(age_bin(0.5, 0.0, 1.0), 50);
        assert_eq!(age_bin(0.499, 0.0, 1.0), 49);
    }

    #[test]
    fn deterministic_and_valid() {
        let a = gen_attr_tasks(20, 32, 5).unwrap();
        assert_eq!(a, gen_attr_tasks(20, 32, 5).unwrap());
        a.validate().unwrap();
        assert_eq!(attr_sample(13, 32, 5).unwrap(), a.samples[13]);
    }

    #[test]
    fn orientation_visible_in_second_moments() {
        let d = gen_attr_tasks(30, 32, 9).unwrap();
        for s in &d.samples {
            let img = &s.input;
            let (mut sx, mut sy, mut w, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let bgv = img.at(0, 0, 0, 0) as f64;
            for i in 0..32 {
                for j in 0..32 {
                    let v = img.at(0, i, j, 0) as f64 - bgv;
                    w += v;
                    mx += v * j as f64;
                    my += v * i as f64;
                }
            }
            let (mx, my) = (mx / w, my / w);
            for i in 0..32 {
                for j in 0..32 {
                    let v = img.at(0, i, j, 0) as f64 - bgv;
                    sx += v * (j as f64 - mx).powi(2);
                    sy += v * (i as f64 - my).powi(2);
                }
            }
            let vertical = s.labels[1].item() == 1.0;
            assert_eq!(sy > sx, vertical);
        }
    }

    #[test]
    fn age_histogram_is_uniform() {
        let d = gen_attr_tasks(10_000, 16, 21).unwrap();
        let mut groups = [0usize; 10];
        for s in &d.samples {
            groups[s.labels[0].item() as usize / 10] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = groups
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of χ² with 9 degrees of freedom
        assert!(chi2 < 27.88, "{groups:?} χ² = {chi2}");
        assert!(
            groups
                .iter()
                .all(|&o| (o as f64 - expected).abs() <= 0.05 * expected),
            "{groups:?}"
        );
    }
}
