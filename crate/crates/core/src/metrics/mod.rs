//! Task losses, evaluation metrics and metric logs.

mod eval;
mod loss;
mod report;

pub use eval::{
    abs_error_stats, age_expectation, argmax_rows, classification_accuracy, confusion_matrix,
    lower_median, normal_angles, normal_metrics, seg_metrics, NormalMetrics, SegMetrics,
    NORMAL_THRESHOLDS, PROB_TOLERANCE,
};
pub use loss::{IGNORE_LABEL, NORMAL_EPS};
pub use report::{read_jsonl, MetricsLog, MetricsReport, TaskMetrics, CSV_HEADER};
