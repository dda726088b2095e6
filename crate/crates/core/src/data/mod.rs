//! Deterministic synthetic multi-task datasets and their on-disk format.
//!
//! Two generators stand in for real benchmarks: [`gen_shapes_tasks`]
//! pairs per-pixel shape classes with per-pixel boundary normals, and
//! [`gen_attr_tasks`] pairs a 100-bin size class with a 2-class
//! orientation. Every sample is a pure function of `(seed, index)`, so any
//! index range can be generated independently.

mod attrs;
mod io;
mod shapes;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::tensor::Tensor;

pub use attrs::{age_bin, attr_sample, gen_attr_tasks, AGE_BINS};
pub use io::{load_dataset, save_dataset, Manifest, MANIFEST_FILE};
pub use shapes::{
    gen_shapes_tasks, render_scene, shapes_sample, RenderedScene, SceneShape, ShapeKind,
    BAND_RADIUS, NORMAL_Z, POOL_FACTOR,
};

/// What one task predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskKind {
    /// Per-pixel class in `[0, classes)`.
    PixelClass { classes: usize },
    /// Per-pixel unit 3-vector.
    PixelDirection,
    /// One class per image; `ordinal` classes also get absolute-error
    /// statistics of the expected class index.
    ImageClass { classes: usize, ordinal: bool },
}

impl TaskKind {
    /// Channels of the network output for this task.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::PixelClass { classes } | TaskKind::ImageClass { classes, .. } => classes,
            TaskKind::PixelDirection => 3,
        }
    }

    pub fn is_pixel(self) -> bool {
        !matches!(self, TaskKind::ImageClass { .. })
    }

    /// Channels of the stored label tensor.
    pub fn label_channels(self) -> usize {
        match self {
            TaskKind::PixelDirection => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Invalid(format!(
                "split `{s}`: expected train or eval"
            ))),
        }
    }
}

/// One image with a label tensor and a 0/1 mask per task. Pixel tasks
/// store `(1, H, W, label_channels)` labels and `(1, H, W, 1)` masks;
/// image tasks store `(1, 1, 1, 1)` for both. Class labels are stored as
/// their integer value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub labels: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub generator: String,
    pub seed: u64,
    pub split: Split,
    pub tasks: Vec<TaskKind>,
    pub samples: Vec<Sample>,
}

/// Labels of one task for a batch, ready for the loss functions.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One label per site (pixel tasks) or per image, masked sites set to
    /// [`IGNORE_LABEL`].
    Classes(Vec<usize>),
    Directions {
        field: Tensor<f32>,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// `(H, W, C)` of the inputs.
    pub fn input_dims(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| {
            let sh = s.input.shape();
            (sh.h, sh.w, sh.c)
        })
    }

    /// Stacks the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let inputs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].input).collect();
        let input = Tensor::stack(&inputs)?;
        let targets = self
            .tasks
            .iter()
            .enumerate()
            .map(|(t, kind)| {
                let masks = indices
                    .iter()
                    .flat_map(|&i| self.samples[i].masks[t].data().iter().map(|&m| m > 0.5));
                match kind {
                    TaskKind::PixelDirection => {
                        let parts: Vec<&Tensor<f32>> = indices
                            .iter()
                            .map(|&i| &self.samples[i].labels[t])
                            .collect();
                        Ok(Target::Directions {
                            field: Tensor::stack(&parts)?,
                            mask: masks.collect(),
                        })
                    }
                    _ => {
                        let labels = indices
                            .iter()
                            .flat_map(|&i| self.samples[i].labels[t].data().iter());
                        Ok(Target::Classes(
                            labels
                                .zip(masks)
                                .map(|(&l, m)| if m { l as usize } else { IGNORE_LABEL })
                                .collect(),
                        ))
                    }
                }
            })
            .collect::<Result<_>>()?;
        Ok(Batch { input, targets })
    }

    /// Checks label ranges, direction norms and tensor shapes of every
    /// sample; returns every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let dims = self.input_dims();
        for (i, s) in self.samples.iter().enumerate() {
            let sh = s.input.shape();
            if Some((sh.h, sh.w, sh.c)) != dims || sh.n != 1 {
                problems.push(format!("sample {i}: input {sh}"));
            }
            if s.labels.len() != self.tasks.len() || s.masks.len() != self.tasks.len() {
                problems.push(format!(
                    "sample {i}: {} label and {} mask tensors",
                    s.labels.len(),
                    s.masks.len()
                ));
                continue;
            }
            for (t, kind) in self.tasks.iter().enumerate() {
                let (h, w) = if kind.is_pixel() {
                    (sh.h, sh.w)
                } else {
                    (1, 1)
                };
                let (l, m) = (s.labels[t].shape(), s.masks[t].shape());
                if l.dims() != [1, h, w, kind.label_channels()] || m.dims() != [1, h, w, 1] {
                    problems.push(format!("sample {i} task {t}: label {l}, mask {m}"));
                    continue;
                }
                let mask = s.masks[t].data();
                match kind {
                    TaskKind::PixelDirection => {
                        for (p, v) in s.labels[t].data().chunks_exact(3).enumerate() {
                            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                            if mask[p] > 0.5 && (n - 1.0).abs() > 1e-6 {
                                problems.push(format!(
                                    "sample {i} task {t}: direction norm {n} at site {p}"
                                ));
                                break;
                            }
                        }
                    }
                    TaskKind::PixelClass { classes } | TaskKind::ImageClass { classes, .. } => {
                        if let Some(l) = s.labels[t].data().iter().zip(mask).find(|(&l, &m)| {
                            m > 0.5 && (l < 0.0 || l as usize >= *classes || l.fract() != 0.0)
                        }) {
                            problems.push(format!(
                                "sample {i} task {t}: label {} outside [0, {classes})",
                                l.0
                            ));
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(problems))
        }
    }
}
