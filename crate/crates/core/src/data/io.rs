use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Sample, Split, TaskKind};

pub const MANIFEST_FILE: &str = "manifest";
const FORMAT: u32 = 1;

/// TOML description of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub generator: String,
    pub seed: u64,
    pub split: Split,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tasks: Vec<TaskKind>,
}

impl Manifest {
    pub fn of(d: &Dataset) -> Self {
        let (height, width, channels) = d.input_dims().unwrap_or((0, 0, 0));
        Manifest {
            format: FORMAT,
            generator: d.generator.clone(),
            seed: d.seed,
            split: d.split,
            count: d.len(),
            height,
            width,
            channels,
            tasks: d.tasks.clone(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let m: Manifest = toml::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Error::UnsupportedVersion(m.format));
        }
        Ok(m)
    }
}

fn input_file(i: usize) -> String {
    format!("input_{i:05}")
}

fn label_file(t: usize, i: usize) -> String {
    format!("task{t}_label_{i:05}")
}

fn mask_file(t: usize, i: usize) -> String {
    format!("task{t}_mask_{i:05}")
}

/// Files this module owns inside a dataset directory.
fn is_dataset_file(name: &str) -> bool {
    name == MANIFEST_FILE
        || name.starts_with("input_")
        || (name.starts_with("task") && (name.contains("_label_") || name.contains("_mask_")))
}

fn write_tensor(path: &Path, name: &str, t: &Tensor<f32>) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.push_tensor(name, t)?;
    ck.save(path)
}

/// Writes `d` to `dir`, replacing any dataset files already there.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(dir)?;
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() && is_dataset_file(&entry.file_name().to_string_lossy()) {
            fs::remove_file(entry.path())?;
        }
    }
    let manifest =
        toml::to_string(&Manifest::of(d)).map_err(|e| Error::Malformed(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    for (i, s) in d.samples.iter().enumerate() {
        write_tensor(&dir.join(input_file(i)), "input", &s.input)?;
        for t in 0..d.tasks.len() {
            write_tensor(&dir.join(label_file(t, i)), "label", &s.labels[t])?;
            write_tensor(&dir.join(mask_file(t, i)), "mask", &s.masks[t])?;
        }
    }
    Ok(())
}

/// Reads a dataset directory. Every missing file, unexpected file and
/// shape disagreement with the manifest is reported together.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = Manifest::read(dir)?;
    let mut problems = Vec::new();
    let mut expected = vec![MANIFEST_FILE.to_string()];
    let mut samples = Vec::with_capacity(m.count);
    let mut read = |file: String, record: &str, dims: [usize; 4], problems: &mut Vec<String>| {
        let path = dir.join(&file);
        expected.push(file.clone());
        if !path.exists() {
            problems.push(format!("missing file {file}"));
            return None;
        }
        let loaded = Checkpoint::load(&path).and_then(|ck| ck.tensor::<f32>(record));
        match loaded {
            Err(e) => {
                problems.push(format!("{file}: {e}"));
                None
            }
            Ok(t) if t.shape().dims() != dims => {
                problems.push(format!(
                    "{file}: shape {} but manifest implies {:?}",
                    t.shape(),
                    dims
                ));
                None
            }
            Ok(t) => Some(t),
        }
    };
    for i in 0..m.count {
        let input = read(
            input_file(i),
            "input",
            [1, m.height, m.width, m.channels],
            &mut problems,
        );
        let mut labels = Vec::new();
        let mut masks = Vec::new();
        for (t, kind) in m.tasks.iter().enumerate() {
            let (h, w) = if kind.is_pixel() {
                (m.height, m.width)
            } else {
                (1, 1)
            };
            labels.push(read(
                label_file(t, i),
                "label",
                [1, h, w, kind.label_channels()],
                &mut problems,
            ));
            masks.push(read(mask_file(t, i), "mask", [1, h, w, 1], &mut problems));
        }
        if let (Some(input), Some(labels), Some(masks)) = (
            input,
            labels.into_iter().collect::<Option<Vec<_>>>(),
            masks.into_iter().collect::<Option<Vec<_>>>(),
        ) {
            samples.push(Sample {
                input,
                labels,
                masks,
            });
        }
    }
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if is_dataset_file(&name) && !expected.contains(&name) {
            problems.push(format!(
                "unexpected file {name} (manifest: {} samples, {} tasks)",
                m.count,
                m.tasks.len()
            ));
        }
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::Dataset(problems));
    }
    let d = Dataset {
        generator: m.generator,
        seed: m.seed,
        split: m.split,
        tasks: m.tasks,
        samples,
    };
    d.validate()?;
    Ok(d)
}
