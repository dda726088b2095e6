use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,task,metric,value";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
}

/// One evaluation snapshot: per-task metric maps plus the run metadata
/// needed to place it in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub seed: u64,
    pub mode: String,
    pub init: String,
    pub lr_scale: f64,
    /// `"train"` or `"eval"`.
    pub split: String,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsReport {
    pub fn new(step: usize, seed: u64, mode: &str, init: &str, lr_scale: f64, split: &str) -> Self {
        MetricsReport {
            step,
            seed,
            mode: mode.into(),
            init: init.into(),
            lr_scale,
            split: split.into(),
            tasks: Vec::new(),
        }
    }

    pub fn insert(&mut self, task: &str, metric: &str, value: f64) {
        let entry = match self.tasks.iter_mut().position(|t| t.task == task) {
            Some(i) => &mut self.tasks[i],
            None => {
                self.tasks.push(TaskMetrics {
                    task: task.into(),
                    metrics: BTreeMap::new(),
                });
                self.tasks.last_mut().unwrap()
            }
        };
        entry.metrics.insert(metric.into(), value);
    }

    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .and_then(|t| t.metrics.get(metric).copied())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report is always serializable")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Malformed(format!("metrics line: {e}")))
    }

    /// CSV rows `step,task,metric,value` in task order, metrics sorted.
    pub fn csv_rows(&self) -> Vec<String> {
        self.tasks
            .iter()
            .flat_map(|t| {
                t.metrics
                    .iter()
                    .map(move |(m, v)| format!("{},{},{},{}", self.step, t.task, m, v))
            })
            .collect()
    }
}

/// Append-only `metrics.jsonl` plus a `summary.csv` that receives the rows
/// of whichever reports are marked as summaries.
pub struct MetricsLog {
    jsonl: File,
    csv: File,
    pub jsonl_path: PathBuf,
    pub csv_path: PathBuf,
}

impl MetricsLog {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("summary.csv");
        let jsonl = File::create(&jsonl_path)?;
        let mut csv = File::create(&csv_path)?;
        writeln!(csv, "{CSV_HEADER}")?;
        Ok(MetricsLog {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    /// Reopens an existing log for appending.
    pub fn append(dir: &Path) -> Result<Self> {
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("summary.csv");
        let open = |p: &Path| OpenOptions::new().append(true).create(true).open(p);
        let fresh_csv = !csv_path.exists();
        let jsonl = open(&jsonl_path)?;
        let mut csv = open(&csv_path)?;
        if fresh_csv {
            writeln!(csv, "{CSV_HEADER}")?;
        }
        Ok(MetricsLog {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    pub fn log(&mut self, report: &MetricsReport) -> Result<()> {
        writeln!(self.jsonl, "{}", report.to_json_line())?;
        Ok(())
    }

    pub fn summarize(&mut self, report: &MetricsReport) -> Result<()> {
        for row in report.csv_rows() {
            writeln!(self.csv, "{row}")?;
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(MetricsReport::from_json_line(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        let mut r = MetricsReport::new(40, 3, "nddr", "diag:0.9,0.1", 100.0, "eval");
        r.insert("seg", "pacc", 0.75);
        r.insert("seg", "miou", 7.0 / 12.0);
        r.insert("normal", "mean", 17.5);
        r
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = sample();
        let back = MetricsReport::from_json_line(&r.to_json_line()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get("seg", "miou"), Some(7.0 / 12.0));
    }

    #[test]
    fn csv_rows_follow_task_order() {
        let rows = sample().csv_rows();
        assert_eq!(rows[0], "40,seg,miou,0.5833333333333334");
        assert_eq!(rows[1], "40,seg,pacc,0.75");
        assert_eq!(rows[2], "40,normal,mean,17.5");
    }

    #[test]
    fn log_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::create(dir.path()).unwrap();
        log.log(&sample()).unwrap();
        log.summarize(&sample()).unwrap();
        drop(log);
        let mut log = MetricsLog::append(dir.path()).unwrap();
        log.log(&sample()).unwrap();
        drop(log);
        assert_eq!(
            read_jsonl(&dir.path().join("metrics.jsonl")).unwrap().len(),
            2
        );
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }
}
