use crate::error::{Error, Result};

/// Angle thresholds (degrees) reported for surface normals.
pub const NORMAL_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

/// Row-sum tolerance for [`age_expectation`].
pub const PROB_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub pacc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    /// `(threshold°, fraction of pixels within it)`, in threshold order.
    pub within: Vec<(f64, f64)>,
}

/// `classes × classes` confusion counts indexed `[gt][pred]`, skipping
/// sites whose ground truth is `ignore`.
pub fn confusion_matrix(
    pred: &[usize],
    gt: &[usize],
    classes: usize,
    ignore: usize,
) -> Result<Vec<u64>> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(gt) {
        if t == ignore {
            continue;
        }
        if t >= classes || p >= classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes,
            });
        }
        m[t * classes + p] += 1;
    }
    Ok(m)
}

/// Mean IoU over classes present in ground truth or prediction, and pixel
/// accuracy over non-ignored sites. Both are 0 when no site is scored.
pub fn seg_metrics(
    pred: &[usize],
    gt: &[usize],
    classes: usize,
    ignore: usize,
) -> Result<SegMetrics> {
    let m = confusion_matrix(pred, gt, classes, ignore)?;
    let total: u64 = m.iter().sum();
    if total == 0 {
        return Ok(SegMetrics {
            miou: 0.0,
            pacc: 0.0,
        });
    }
    let correct: u64 = (0..classes).map(|k| m[k * classes + k]).sum();
    let (mut iou_sum, mut present) = (0.0, 0usize);
    for k in 0..classes {
        let tp = m[k * classes + k];
        let gt_k: u64 = m[k * classes..(k + 1) * classes].iter().sum();
        let pred_k: u64 = (0..classes).map(|t| m[t * classes + k]).sum();
        let union = gt_k + pred_k - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    Ok(SegMetrics {
        miou: iou_sum / present as f64,
        pacc: correct as f64 / total as f64,
    })
}

/// Per-pixel angle in degrees between `pred` (normalized here) and unit `gt`
/// at masked sites. Both fields are flat `[x, y, z]` triples.
pub fn normal_angles(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.len() != 3 * mask.len() {
        return Err(Error::Invalid(format!(
            "normal fields of {} and {} values with {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(pred
        .chunks_exact(3)
        .zip(gt.chunks_exact(3))
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, g), _)| {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
                .sqrt()
                .max(super::NORMAL_EPS);
            let cos = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / norm;
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect())
}

pub fn normal_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    thresholds: &[f64],
) -> Result<NormalMetrics> {
    let angles = normal_angles(pred, gt, mask)?;
    if angles.is_empty() {
        return Err(Error::Invalid("no masked pixels to score".into()));
    }
    let n = angles.len() as f64;
    Ok(NormalMetrics {
        mean: angles.iter().sum::<f64>() / n,
        median: lower_median(&angles),
        within: thresholds
            .iter()
            .map(|&t| (t, angles.iter().filter(|&&a| a <= t).count() as f64 / n))
            .collect(),
    })
}

/// Expected age per row of a `rows × classes` probability table, with
/// ages `0, 1, …, classes − 1`.
pub fn age_expectation(probs: &[f64], classes: usize) -> Result<Vec<f64>> {
    if classes == 0 || probs.len() % classes != 0 {
        return Err(Error::Invalid(format!(
            "{} probabilities for {classes} classes",
            probs.len()
        )));
    }
    probs
        .chunks_exact(classes)
        .enumerate()
        .map(|(i, row)| {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Invalid(format!("row {i} sums to {sum}")));
            }
            Ok(row.iter().enumerate().map(|(k, &p)| p * k as f64).sum())
        })
        .collect()
}

/// `(mean, median)` of `|pred − gt|`.
pub fn abs_error_stats(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let errs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    Ok((
        errs.iter().sum::<f64>() / errs.len() as f64,
        lower_median(&errs),
    ))
}

pub fn classification_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Median taking the lower of the two middle elements for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Index of the largest entry in each `classes`-wide row; ties go to the
/// lowest index.
pub fn argmax_rows<T: PartialOrd + Copy>(data: &[T], classes: usize) -> Vec<usize> {
    data.chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
