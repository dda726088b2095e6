//! Grid runs over fusion initialization or fusion learning-rate scale,
//! merged into one table of per-point means and standard deviations.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nddr::fusion::InitPolicy;
use nddr::metrics::MetricsReport;

use crate::run::{load_data, train_with, write_echo, RunEcho, TrainRun};
use crate::{RunFlags, UsageError};

pub const TABLE_FILE: &str = "ablation.csv";

#[derive(Args)]
pub struct AblateArgs {
    /// `init` or `lr-scale`.
    #[arg(long)]
    axis: String,
    /// Grid points: `;`-separated policies for init (`diag:1,0;xavier`),
    /// `,`-separated scales for lr-scale.
    #[arg(long)]
    grid: Option<String>,
    /// Seeds per grid point (seed, seed+1, …).
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Init,
    LrScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub axis: Axis,
    pub grid: Vec<String>,
    pub repeats: usize,
    pub jobs: usize,
    /// Configuration shared by every run; the axis value and seed vary.
    pub base: TrainRun,
    pub out: PathBuf,
}

pub fn default_grid(axis: Axis) -> Vec<String> {
    match axis {
        Axis::Init => [
            "diag:1,0",
            "diag:0.9,0.1",
            "diag:0.5,0.5",
            "diag:0.1,0.9",
            "diag:0,1",
            "xavier",
        ]
        .map(String::from)
        .to_vec(),
        Axis::LrScale => ["1", "10", "100", "1000"].map(String::from).to_vec(),
    }
}

fn apply(axis: Axis, point: &str, run: &mut TrainRun) -> Result<()> {
    match axis {
        Axis::Init => {
            run.net.init = point
                .parse::<InitPolicy>()
                .map_err(|e| UsageError(format!("grid point `{point}`: {e}")))?
        }
        Axis::LrScale => {
            run.train.nddr_lr_scale = point
                .parse::<f64>()
                .map_err(|e| UsageError(format!("grid point `{point}`: {e}")))?
        }
    }
    run.train
        .validate()
        .map_err(|e| UsageError(format!("grid point `{point}`: {e}")))?;
    Ok(())
}

/// Directory-safe name of a grid point.
fn slug(point: &str) -> String {
    point
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axis = match a.axis.as_str() {
        "init" => Axis::Init,
        "lr-scale" => Axis::LrScale,
        other => bail!(UsageError(format!(
            "unknown axis `{other}` (init | lr-scale)"
        ))),
    };
    let grid = match &a.grid {
        None => default_grid(axis),
        Some(g) => {
            let sep = if axis == Axis::Init { ';' } else { ',' };
            g.split(sep)
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect()
        }
    };
    if grid.is_empty() || a.repeats == 0 {
        bail!(UsageError(
            "the grid and --repeats must be non-empty".into()
        ));
    }
    let base = TrainRun::resolve(&a.flags, a.out.clone())?;
    if !base.net.mode.is_fusion() {
        bail!(UsageError(format!(
            "ablation needs a fusion mode, not {}",
            base.net.mode
        )));
    }
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let run = AblateRun {
        axis,
        grid,
        repeats: a.repeats,
        jobs,
        base,
        out: a.out,
    };
    for p in &run.grid {
        apply(run.axis, p, &mut run.base.clone())?;
    }
    run_ablation(&run)
}

struct Outcome {
    point: usize,
    last: MetricsReport,
    train_loss: f64,
}

/// Column order: surface-normal metrics, then segmentation, then the
/// image-level tasks, then losses.
fn task_rank(task: &str) -> usize {
    match task {
        "normal" => 0,
        "seg" => 1,
        "age" => 2,
        "class" => 3,
        "total" => 5,
        _ => 4,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn run_ablation(r: &AblateRun) -> Result<()> {
    let (data, eval) = load_data(&r.base)?;
    fs::create_dir_all(&r.out)?;
    write_echo(&r.out, &RunEcho::Ablate(r.clone()))?;
    let mut runs = Vec::new();
    for (pi, p) in r.grid.iter().enumerate() {
        for k in 0..r.repeats {
            let mut t = r.base.clone();
            apply(r.axis, p, &mut t)?;
            t.train.seed = r.base.train.seed + k as u64;
            t.out = r.out.join(slug(p)).join(format!("seed{}", t.train.seed));
            runs.push((pi, t));
        }
    }
    if r.base.pretrain.is_empty() && r.base.net.mode.is_fusion() {
        eprintln!(
            "note: fusion layers trained from scratch; fused networks do best when \
             warm-started from converged single-task networks (--pretrain)"
        );
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(r.jobs)
        .build()
        .context("starting worker pool")?;
    let results: Vec<Result<Outcome>> = pool.install(|| {
        runs.par_iter()
            .map(|(pi, t)| {
                let res = train_with(t, &data, eval.as_ref(), true)
                    .with_context(|| format!("run {}", t.out.display()))?;
                eprintln!("done {}", t.out.display());
                Ok(Outcome {
                    point: *pi,
                    last: res.last,
                    train_loss: res.train_loss,
                })
            })
            .collect()
    });
    let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

    // (task, metric) columns in table order
    let mut keys: Vec<(String, String)> = Vec::new();
    for o in &outcomes {
        for t in &o.last.tasks {
            for m in t.metrics.keys() {
                let key = (t.task.clone(), m.clone());
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
    }
    keys.sort_by(|a, b| task_rank(&a.0).cmp(&task_rank(&b.0)).then(a.cmp(b)));

    let axis_col = if r.axis == Axis::Init {
        "init"
    } else {
        "lr_scale"
    };
    let mut header = vec![axis_col.to_string(), "runs".into()];
    for (t, m) in &keys {
        header.push(format!("{t}.{m}_mean"));
        header.push(format!("{t}.{m}_std"));
    }
    header.push("train_loss_mean".into());
    header.push("train_loss_std".into());
    let mut lines = vec![header.join(",")];
    for (pi, p) in r.grid.iter().enumerate() {
        let mine: Vec<&Outcome> = outcomes.iter().filter(|o| o.point == pi).collect();
        let mut row = vec![format!("\"{p}\""), mine.len().to_string()];
        let mut cols: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for o in &mine {
            for (ci, (t, m)) in keys.iter().enumerate() {
                cols.entry(ci)
                    .or_default()
                    .push(o.last.get(t, m).unwrap_or(f64::NAN));
            }
        }
        for ci in 0..keys.len() {
            let (mean, std) = mean_std(&cols[&ci]);
            row.push(format!("{mean}"));
            row.push(format!("{std}"));
        }
        let (mean, std) = mean_std(&mine.iter().map(|o| o.train_loss).collect::<Vec<_>>());
        row.push(format!("{mean}"));
        row.push(format!("{std}"));
        lines.push(row.join(","));
    }
    let table = lines.join("\n") + "\n";
    fs::write(r.out.join(TABLE_FILE), &table)?;
    print!("{table}");
    Ok(())
}
