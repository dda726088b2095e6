//! Training: SGD with per-group learning rates and decay, periodic
//! evaluation into metric logs, and checkpointing.

mod sgd;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Target, TaskKind};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::metrics::{
    abs_error_stats, age_expectation, argmax_rows, classification_accuracy, normal_metrics,
    seg_metrics, MetricsLog, MetricsReport, IGNORE_LABEL, NORMAL_THRESHOLDS,
};
use crate::net::{HeadSpec, Mode, Network};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use sgd::Sgd;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning-rate multiplier of fusion parameters.
    pub nddr_lr_scale: f64,
    /// λ of the `λ‖W‖²` penalty.
    pub weight_decay: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds batch order.
    pub seed: u64,
    /// Per-task loss multipliers; empty means all ones.
    pub loss_weights: Vec<f64>,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// `lr·(1 − step/steps)^power` when set; constant otherwise.
    pub poly_power: Option<f64>,
    /// Run fusion normalization on its running statistics during training
    /// (γ and β still learn) instead of on batch statistics.
    pub freeze_fusion_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.02,
            nddr_lr_scale: 100.0,
            weight_decay: 5e-4,
            momentum: 0.9,
            steps: 3000,
            batch_size: 8,
            seed: 0,
            loss_weights: Vec::new(),
            eval_every: 0,
            poly_power: Some(0.9),
            freeze_fusion_norm: false,
        }
    }
}

impl TrainConfig {
    /// Settings for fine-tuning a network warm-started from converged
    /// single-task networks: a lower base rate over fewer steps.
    pub fn fine_tune() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            steps: 2000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.base_lr > 0.0) {
            bad.push(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(self.nddr_lr_scale >= 1.0) {
            bad.push(format!(
                "nddr_lr_scale must be ≥ 1, got {}",
                self.nddr_lr_scale
            ));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be ≥ 1".into());
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            bad.push("loss weights must be finite and ≥ 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(bad.join("; ")))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.poly_power {
            Some(p) if self.steps > 0 => {
                self.base_lr * (1.0 - step as f64 / self.steps as f64).powf(p)
            }
            _ => self.base_lr,
        }
    }
}

/// Head for each dataset task.
pub fn heads_for(tasks: &[TaskKind]) -> Vec<HeadSpec> {
    tasks
        .iter()
        .map(|&t| match t {
            TaskKind::ImageClass { classes, .. } => HeadSpec::Vector { classes },
            _ => HeadSpec::Pixel {
                out_channels: t.outputs(),
            },
        })
        .collect()
}

/// Name of a task in metric reports.
pub fn task_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::PixelClass { .. } => "seg",
        TaskKind::PixelDirection => "normal",
        TaskKind::ImageClass { ordinal: true, .. } => "age",
        TaskKind::ImageClass { ordinal: false, .. } => "class",
    }
}

/// Dataset task index for each network output, checking that heads and
/// task kinds agree.
pub fn task_map<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<Vec<usize>> {
    if data.tasks.len() != net.spec.heads.len() {
        return Err(Error::Invalid(format!(
            "network has {} heads, dataset {} tasks",
            net.spec.heads.len(),
            data.tasks.len()
        )));
    }
    let map: Vec<usize> = if net.config.mode == Mode::Single {
        vec![net.config.task]
    } else {
        (0..data.tasks.len()).collect()
    };
    let want = heads_for(&data.tasks);
    for &t in &map {
        if net.spec.heads[t] != want[t] {
            return Err(Error::Invalid(format!(
                "head {t} is {:?} but task {t} needs {:?}",
                net.spec.heads[t], want[t]
            )));
        }
    }
    if let Some((h, w, c)) = data.input_dims() {
        let f = net.spec.downsample_factor();
        if c != net.spec.in_channels || h % f != 0 || w % f != 0 {
            return Err(Error::Invalid(format!(
                "{h}×{w}×{c} inputs do not fit a network with {} input channels and stride {f}",
                net.spec.in_channels
            )));
        }
    }
    Ok(map)
}

fn task_loss<T: Scalar>(g: &mut Graph<T>, out: Var, target: &Target) -> Result<Var> {
    match target {
        Target::Classes(labels) => g.softmax_cross_entropy(out, labels, IGNORE_LABEL),
        Target::Directions { field, mask } => g.normal_loss(out, &field.cast(), mask),
    }
}

fn loss_weights(cfg: &TrainConfig, tasks: usize) -> Result<Vec<f64>> {
    match cfg.loss_weights.len() {
        0 => Ok(vec![1.0; tasks]),
        n if n == tasks => Ok(cfg.loss_weights.clone()),
        n => Err(Error::Invalid(format!(
            "{n} loss weights for {tasks} tasks"
        ))),
    }
}

fn report_for<T: Scalar>(
    net: &Network<T>,
    cfg: &TrainConfig,
    step: usize,
    split: &str,
) -> MetricsReport {
    let init = if net.config.mode.is_fusion() {
        net.config.init.to_string()
    } else {
        "none".to_string()
    };
    MetricsReport::new(
        step,
        cfg.seed,
        &net.config.mode.to_string(),
        &init,
        cfg.nddr_lr_scale,
        split,
    )
}

#[derive(Default)]
struct TaskAccum {
    loss_sum: f64,
    count: usize,
    pred: Vec<usize>,
    gt: Vec<usize>,
    pred_dirs: Vec<f64>,
    gt_dirs: Vec<f64>,
    mask: Vec<bool>,
    expected: Vec<f64>,
}

/// Dataset-level metrics of every task under eval-mode normalization.
/// Losses are means over all scored sites of the whole dataset.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    step: usize,
    split: &str,
) -> Result<MetricsReport> {
    let map = task_map(net, data)?;
    let weights = loss_weights(cfg, map.len())?;
    let saved = net.norm.mode;
    net.set_norm_mode(BnMode::Eval);
    let mut acc: Vec<TaskAccum> = map.iter().map(|_| TaskAccum::default()).collect();
    let indices: Vec<usize> = (0..data.len()).collect();
    let result = (|| {
        for chunk in indices.chunks(EVAL_BATCH) {
            let batch = data.batch(chunk)?;
            let outs = net.predict(&batch.input.cast())?;
            for ((a, out), &t) in acc.iter_mut().zip(&outs).zip(&map) {
                let target = &batch.targets[t];
                let mut g = Graph::new();
                let o = g.constant(out.clone());
                let l = task_loss(&mut g, o, target)?;
                let classes = out.shape().c;
                match target {
                    Target::Classes(labels) => {
                        let n = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
                        a.loss_sum += g.value(l).item().as_f64() * n as f64;
                        a.count += n;
                        a.pred.extend(argmax_rows(out.data(), classes));
                        a.gt.extend(labels);
                        if let TaskKind::ImageClass { ordinal: true, .. } = data.tasks[t] {
                            let mut probs = vec![0.0; out.numel()];
                            let logits: Vec<f64> = out.data().iter().map(|v| v.as_f64()).collect();
                            for (row, p) in logits
                                .chunks_exact(classes)
                                .zip(probs.chunks_exact_mut(classes))
                            {
                                crate::layers::softmax_row(row, p);
                            }
                            a.expected.extend(age_expectation(&probs, classes)?);
                        }
                    }
                    Target::Directions { field, mask } => {
                        let n = mask.iter().filter(|&&m| m).count();
                        a.loss_sum += g.value(l).item().as_f64() * n as f64;
                        a.count += n;
                        a.pred_dirs.extend(out.data().iter().map(|v| v.as_f64()));
                        a.gt_dirs.extend(field.data().iter().map(|&v| v as f64));
                        a.mask.extend(mask);
                    }
                }
            }
        }
        Ok::<_, Error>(())
    })();
    net.set_norm_mode(saved);
    result?;

    let mut report = report_for(net, cfg, step, split);
    let mut total = 0.0;
    for ((a, &t), w) in acc.iter().zip(&map).zip(&weights) {
        let kind = data.tasks[t];
        let name = task_name(kind);
        let loss = if a.count > 0 {
            a.loss_sum / a.count as f64
        } else {
            0.0
        };
        total += w * loss;
        report.insert(name, "loss", loss);
        match kind {
            TaskKind::PixelClass { classes } => {
                let m = seg_metrics(&a.pred, &a.gt, classes, IGNORE_LABEL)?;
                report.insert(name, "miou", m.miou);
                report.insert(name, "pacc", m.pacc);
            }
            TaskKind::PixelDirection => {
                if a.mask.iter().any(|&m| m) {
                    let m = normal_metrics(&a.pred_dirs, &a.gt_dirs, &a.mask, &NORMAL_THRESHOLDS)?;
                    report.insert(name, "mean_angle", m.mean);
                    report.insert(name, "median_angle", m.median);
                    for (th, frac) in m.within {
                        report.insert(name, &format!("within_{th}"), frac);
                    }
                }
            }
            TaskKind::ImageClass { ordinal, .. } => {
                let valid: Vec<usize> = (0..a.gt.len())
                    .filter(|&i| a.gt[i] != IGNORE_LABEL)
                    .collect();
                if !valid.is_empty() {
                    let pred: Vec<usize> = valid.iter().map(|&i| a.pred[i]).collect();
                    let gt: Vec<usize> = valid.iter().map(|&i| a.gt[i]).collect();
                    report.insert(name, "acc", classification_accuracy(&pred, &gt)?);
                    if ordinal {
                        let exp: Vec<f64> = valid.iter().map(|&i| a.expected[i]).collect();
                        let gtf: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
                        let (mean, median) = abs_error_stats(&exp, &gtf)?;
                        report.insert(name, "mean_ae", mean);
                        report.insert(name, "median_ae", median);
                    }
                }
            }
        }
    }
    report.insert("total", "loss", total);
    Ok(report)
}

/// Mean of segmentation pixel accuracy and the 30° normal hit rate.
pub fn combined_score(report: &MetricsReport) -> Option<f64> {
    Some((report.get("seg", "pacc")? + report.get("normal", "within_30")?) / 2.0)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Periodic and final evaluation reports, in order.
    pub reports: Vec<MetricsReport>,
    /// Weighted task loss of the last minibatch (`NaN` when no step ran).
    pub last_batch_loss: f64,
}

/// Minibatch SGD on the weighted sum of task losses. Batches are drawn
/// from seeded reshuffles of the training set. Evaluation runs every
/// `eval_every` steps and once at the end, on `eval` when given and on
/// `data` otherwise. When `out` is set, reports go to `metrics.jsonl`,
/// the final report to `summary.csv` and the final state to `final.ckpt`.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let map = task_map(net, data)?;
    if let Some(e) = eval {
        task_map(net, e)?;
    }
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let weights = loss_weights(cfg, map.len())?;
    let mut log = out.map(MetricsLog::create).transpose()?;
    let (eval_set, eval_split) = match eval {
        Some(e) => (e, "eval"),
        None => (data, "train"),
    };
    let mut reports = Vec::new();
    let mut emit = |net: &mut Network<T>,
                    step: usize,
                    log: &mut Option<MetricsLog>|
     -> Result<MetricsReport> {
        let r = evaluate(net, eval_set, cfg, step, eval_split)?;
        if let Some(l) = log.as_mut() {
            l.log(&r)?;
        }
        reports.push(r.clone());
        Ok(r)
    };

    let train_mode = if cfg.freeze_fusion_norm {
        BnMode::Eval
    } else {
        BnMode::Train
    };
    let batch_size = cfg.batch_size.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Sgd::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        if cursor + batch_size > order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.batch(&order[cursor..cursor + batch_size])?;
        cursor += batch_size;

        net.set_norm_mode(train_mode);
        let mut g = Graph::new().with_finite_check(false);
        let x = g.constant(batch.input.cast());
        let pass = net.forward(&mut g, x, true)?;
        let mut terms = Vec::with_capacity(map.len());
        for ((&o, &t), &w) in pass.outputs.iter().zip(&map).zip(&weights) {
            terms.push((
                task_loss(&mut g, o, &batch.targets[t])?,
                T::from_f64_lossy(w),
            ));
        }
        let total = g.weighted_sum(&terms)?;
        last = g.value(total).item().as_f64();
        if !last.is_finite() {
            return Err(Error::Diverged { step, loss: last });
        }
        g.backward(total)?;
        let grads: Vec<Option<&[T]>> = pass.params.iter().map(|&p| g.grad(p)).collect();
        opt.step(&mut net.registry, &grads, cfg, cfg.lr_at(step))?;

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            emit(net, done, &mut log)?;
        }
    }
    let final_report = emit(net, cfg.steps, &mut log)?;
    if let (Some(dir), Some(l)) = (out, log.as_mut()) {
        l.summarize(&final_report)?;
        save_checkpoint(net, cfg.steps as u64, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        reports,
        last_batch_loss: last,
    })
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, step: u64, path: &Path) -> Result<()> {
    let mut ck = net.to_checkpoint();
    ck.set_step(step);
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Mean weighted task loss over `data` under eval-mode normalization.
pub fn dataset_loss<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let r = evaluate(net, data, cfg, 0, "train")?;
    Ok(r.get("total", "loss").unwrap_or(f64::NAN))
}

/// Stacks `(1, H, W, C)` tensors of a dataset for direct network calls.
pub fn inputs_of(data: &Dataset, indices: &[usize]) -> Result<Tensor<f32>> {
    Ok(data.batch(indices)?.input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes_tasks;
    use crate::net::{BackboneSpec, NetConfig};

    fn setup(mode: Mode) -> (Network<f32>, Dataset) {
        let data = gen_shapes_tasks(6, 16, 3, 4).unwrap();
        let spec = BackboneSpec::toy_vgg(3, heads_for(&data.tasks));
        let cfg = if mode == Mode::Single {
            NetConfig::single(0)
        } else {
            NetConfig::with_mode(mode)
        };
        (Network::build(spec, cfg, 3).unwrap(), data)
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            eval_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig {
                base_lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                nddr_lr_scale: 0.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Invalid(_))), "{bad:?}");
        }
    }

    #[test]
    fn poly_schedule() {
        let c = TrainConfig {
            base_lr: 0.1,
            steps: 10,
            poly_power: Some(1.0),
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(5) - 0.05).abs() < 1e-15);
        let flat = TrainConfig {
            poly_power: None,
            ..c
        };
        assert_eq!(flat.lr_at(9), 0.1);
    }

    #[test]
    fn zero_steps_changes_nothing_and_reports_once() {
        let (mut net, data) = setup(Mode::Nddr);
        let before = net.to_checkpoint();
        let out = train(&mut net, &data, None, &quick(0), None).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.reports[0].step, 0);
        assert_eq!(net.to_checkpoint(), before);
        assert!(out.last_batch_loss.is_nan());
    }

    #[test]
    fn reports_follow_eval_schedule() {
        let (mut net, data) = setup(Mode::Shared);
        let out = train(&mut net, &data, None, &quick(5), None).unwrap();
        let steps: Vec<usize> = out.reports.iter().map(|r| r.step).collect();
        assert_eq!(steps, [2, 4, 5]);
        let r = out.reports.last().unwrap();
        for (task, metric) in [
            ("seg", "pacc"),
            ("seg", "miou"),
            ("normal", "within_30"),
            ("total", "loss"),
        ] {
            assert!(r.get(task, metric).unwrap().is_finite(), "{task}.{metric}");
        }
        let total = r.get("seg", "loss").unwrap() + r.get("normal", "loss").unwrap();
        assert!((r.get("total", "loss").unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_write_identical_logs() {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let (mut net, data) = setup(Mode::Nddr);
            train(&mut net, &data, None, &quick(3), Some(d.path())).unwrap();
        }
        for f in ["metrics.jsonl", "summary.csv", "final.ckpt"] {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap();
            assert!(!a.is_empty(), "{f}");
            assert_eq!(a, std::fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
        }
        let ck = load_checkpoint(&dirs[0].path().join("final.ckpt")).unwrap();
        assert_eq!(ck.step(), Some(3));
    }

    #[test]
    fn training_reduces_single_task_loss() {
        let (mut net, data) = setup(Mode::Single);
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let before = dataset_loss(&mut net, &data, &cfg).unwrap();
        train(&mut net, &data, None, &cfg, None).unwrap();
        let after = dataset_loss(&mut net, &data, &cfg).unwrap();
        assert!(after < 0.7 * before, "{before} → {after}");
    }

    #[test]
    fn divergence_is_reported() {
        let (mut net, data) = setup(Mode::Single);
        let cfg = TrainConfig {
            base_lr: 1e6,
            steps: 20,
            poly_power: None,
            ..TrainConfig::default()
        };
        match train(&mut net, &data, None, &cfg, None) {
            Err(Error::Diverged { .. }) | Err(Error::NonFiniteGradient(_)) => {}
            other => panic!("{:?}", other.map(|o| o.last_batch_loss)),
        }
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let (mut net, _) = setup(Mode::Nddr);
        let other = crate::data::gen_attr_tasks(4, 16, 1).unwrap();
        assert!(matches!(
            train(&mut net, &other, None, &quick(1), None),
            Err(Error::Invalid(_))
        ));
        let wrong_size = gen_shapes_tasks(2, 16, 3, 1).unwrap();
        let mut odd = wrong_size.clone();
        for s in &mut odd.samples {
            s.input = Tensor::zeros([1, 15, 15, 3]);
        }
        assert!(train(&mut net, &odd, None, &quick(1), None).is_err());
    }

    #[test]
    fn image_tasks_report_accuracy_and_age_error() {
        let data = crate::data::gen_attr_tasks(5, 16, 2).unwrap();
        let spec = BackboneSpec::toy_vgg(3, heads_for(&data.tasks));
        let mut net: Network<f32> =
            Network::build(spec, NetConfig::with_mode(Mode::Nddr), 1).unwrap();
        let r = evaluate(&mut net, &data, &TrainConfig::default(), 0, "train").unwrap();
        for (task, metric) in [
            ("age", "acc"),
            ("age", "mean_ae"),
            ("age", "median_ae"),
            ("class", "acc"),
        ] {
            assert!(r.get(task, metric).unwrap().is_finite(), "{task}.{metric}");
        }
        assert!(r.get("class", "mean_ae").is_none());
    }
}
