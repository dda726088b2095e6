//! Named-tensor container with a fixed little-endian byte layout:
//!
//! ```text
//! "NDDR" | version u32 | record count u64 |
//!   per record: name length u32, UTF-8 name, dtype tag u8 (1 = f32, 2 = f64),
//!               ndim u8, dims u64 × ndim, values
//! ```
//!
//! Used for model checkpoints and for the tensor files of saved datasets.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"NDDR";
pub const VERSION: u32 = 1;

/// Name of the record holding the training step.
pub const STEP_RECORD: &str = "meta.step";

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Record {
            name: name.into(),
            dims: t.shape().dims().to_vec(),
            data,
        }
    }

    /// The record as a 4-D tensor, left-padding lower-rank dims with ones.
    /// Values are converted when the stored dtype differs from `T`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dims.len() > 4 {
            return Err(Error::Malformed(format!(
                "record `{}` has {} dims",
                self.name,
                self.dims.len()
            )));
        }
        let mut shape = [1usize; 4];
        shape[4 - self.dims.len()..].copy_from_slice(&self.dims);
        let data: Vec<T> = match &self.data {
            RecordData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            RecordData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        Tensor::new(shape, data)
    }

    /// Dims with leading ones removed, for shape comparisons across ranks.
    pub fn shape4(&self) -> [usize; 4] {
        let mut shape = [1usize; 4];
        if self.dims.len() <= 4 {
            shape[4 - self.dims.len()..].copy_from_slice(&self.dims);
        }
        shape
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if self.get(&record.name).is_some() {
            return Err(Error::Malformed(format!(
                "duplicate record `{}`",
                record.name
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.push(Record::from_tensor(name, t))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Malformed(format!("no record `{name}`")))?
            .to_tensor()
    }

    pub fn set_step(&mut self, step: u64) {
        self.records.retain(|r| r.name != STEP_RECORD);
        self.records.push(Record {
            name: STEP_RECORD.into(),
            dims: vec![1],
            data: RecordData::F64(vec![step as f64]),
        });
    }

    pub fn step(&self) -> Option<u64> {
        match &self.get(STEP_RECORD)?.data {
            RecordData::F64(v) => v.first().map(|&s| s as u64),
            RecordData::F32(v) => v.first().map(|&s| s as u64),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.data.dtype().tag());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = rd.u64("record count")?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for i in 0..count {
            let len = rd.u32("name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "name")?)
                .map_err(|_| Error::Malformed(format!("record {i}: name is not UTF-8")))?
                .to_string();
            let tag = rd.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Malformed(format!("record `{name}`: dtype tag {tag}")))?;
            let ndim = rd.take(1, "ndim")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(rd.u64("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()).map(|_| n))
                .ok_or_else(|| Error::Malformed(format!("record `{name}`: dims overflow")))?;
            let raw = rd.take(numel * dtype.size(), &name)?;
            let data = match dtype {
                DType::F32 => RecordData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => RecordData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            if !seen.insert(name.clone()) {
                return Err(Error::Malformed(format!("duplicate record `{name}`")));
            }
            records.push(Record { name, dims, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - rd.pos
            )));
        }
        Ok(Checkpoint { records })
    }

    /// Writes to a sibling temporary file first so a failed save never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Checkpoint::new();
        c.push_tensor(
            "a",
            &Tensor::<f32>::random_uniform([2, 1, 3, 4], -1.0, 1.0, &mut rng),
        )
        .unwrap();
        c.push_tensor(
            "b.weight",
            &Tensor::<f64>::random_uniform([1, 1, 1, 5], -1.0, 1.0, &mut rng),
        )
        .unwrap();
        c.set_step(17);
        c
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::new().to_bytes();
        assert_eq!(
            bytes,
            [b'N', b'D', b'D', b'R', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        );
        let mut c = Checkpoint::new();
        c.push_tensor("x", &Tensor::<f32>::scalar(1.5)).unwrap();
        let bytes = c.to_bytes();
        // count, name length, name, tag, ndim, 4 dims, one value
        assert_eq!(bytes.len(), 16 + 4 + 1 + 1 + 1 + 32 + 4);
        assert_eq!(&bytes[16..21], &[1, 0, 0, 0, b'x']);
        assert_eq!(bytes[21], 1);
        assert_eq!(&bytes[bytes.len() - 4..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step(), Some(17));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_give_structured_errors() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..2]),
            Err(Error::Truncated(_))
        ));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&trailing),
            Err(Error::Malformed(_))
        ));
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert!(c.push_tensor("a", &Tensor::<f32>::scalar(0.0)).is_err());
    }

    #[test]
    fn lower_rank_records_pad_to_four_dims() {
        let r = Record {
            name: "v".into(),
            dims: vec![2, 3],
            data: RecordData::F64(vec![0.0; 6]),
        };
        assert_eq!(r.to_tensor::<f64>().unwrap().shape().dims(), [1, 1, 2, 3]);
    }
}
