//! Labeled sample files (`BQTD`) and calibration subsets.
//!
//! `BQTD` layout (little-endian): magic, u32 sample count, u32 rank of one
//! sample, rank × u32 extents, count × f32 payload, count × u32 labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 4] = b"BQTD";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample extents]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self { inputs: self.inputs.select_rows(rows)?, labels: rows.iter().map(|&r| self.labels[r]).collect() })
    }
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let sample = d.sample_shape();
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&(d.len() as u32).to_le_bytes());
    out.extend_from_slice(&(sample.len() as u32).to_le_bytes());
    for &e in sample {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in d.inputs.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &d.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DATA_MAGIC {
        return Err("bad magic, expected BQTD".into());
    }
    let n = r.u32()? as usize;
    let rank = r.u32()? as usize;
    if n == 0 || rank == 0 || rank > 7 {
        return Err(format!("unsupported header: {n} samples of rank {rank}"));
    }
    let mut shape = vec![n];
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("extent product overflows")?;
    let data = r.f32s(numel)?;
    let labels = (0..n).map(|_| r.u32().map(|l| l as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let inputs = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Dataset::new(inputs, labels).map_err(|e| e.to_string())
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    decode_dataset(&bytes).map_err(|m| Error::load(path, m))
}

/// A seeded subsample used for calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub data: Dataset,
    pub source: PathBuf,
    pub seed: u64,
    /// Row of the source file behind each sample.
    pub indices: Vec<usize>,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Consecutive batches of at most `batch` samples.
    pub fn batches(&self, batch: usize) -> Result<Vec<Dataset>> {
        if batch == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        (0..self.len())
            .step_by(batch)
            .map(|s| {
                let rows: Vec<usize> = (s..(s + batch).min(self.len())).collect();
                self.data.subset(&rows)
            })
            .collect()
    }
}

/// Uniform sample of `n` rows without replacement, in a seed-determined order.
pub fn sample_indices(available: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > available {
        return Err(Error::Data(format!("requested {n} samples from a set of {available}")));
    }
    // Forward Fisher-Yates stopped after n swaps.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..available).collect();
    for i in 0..n {
        let j = rng.random_range(i..available);
        idx.swap(i, j);
    }
    idx.truncate(n);
    Ok(idx)
}

pub fn subsample(data: &Dataset, source: &Path, n: usize, seed: u64) -> Result<CalibrationSet> {
    let indices = sample_indices(data.len(), n, seed)?;
    Ok(CalibrationSet { data: data.subset(&indices)?, source: source.to_path_buf(), seed, indices })
}

pub fn load_calibration(path: &Path, n: usize, seed: u64) -> Result<CalibrationSet> {
    let data = read_dataset(path)?;
    subsample(&data, path, n, seed)
}
