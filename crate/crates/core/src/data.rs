//! Datasets: synthetic generators, table parsers and stratified splits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("line {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("label {label} out of range on line {line}")]
    LabelOutOfRange { line: usize, label: i64 },
    #[error("idx: {0}")]
    Idx(String),
    #[error("class {class} has {count} samples, fewer than the {splits} requested splits")]
    ClassTooSmall { class: usize, count: usize, splits: usize },
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
}

/// Index lists into the dataset rows; disjoint by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// `[N, ...input_shape]`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub splits: Option<Splits>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(name: &str, inputs: Tensor<f32>, labels: Vec<usize>, seed: u64) -> Result<Self, DataError> {
        if inputs.rows() != labels.len() {
            return Err(DataError::InvalidSize(format!("{} input rows for {} labels", inputs.rows(), labels.len())));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let class_names = (0..classes).map(|c| c.to_string()).collect();
        Ok(Dataset { name: name.to_string(), inputs, labels, class_names, splits: None, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Reinterprets every sample with a new per-sample shape of equal size.
    pub fn with_input_shape(mut self, shape: &[usize]) -> Result<Self, DataError> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.inputs = self.inputs.reshape(&full).map_err(|e| DataError::InvalidSize(e.to_string()))?;
        Ok(self)
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.inputs.gather_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Gaussian clusters around `classes` random centers.
///
/// Centers are drawn from `N(0, center_spread^2)` per coordinate, points
/// from `N(center, noise_sigma^2)`. Rows are grouped by class.
pub fn gen_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    center_spread: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || per_class < 2 || dim < 2 {
        return Err(DataError::InvalidSize("blobs need classes >= 2, per_class >= 2, dim >= 2".into()));
    }
    if !(noise_sigma > 0.0) || !(center_spread >= 0.0) {
        return Err(DataError::InvalidSize("noise_sigma must be > 0 and center_spread >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| center_spread * unit.sample(&mut rng)).collect()).collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| (m + noise_sigma * unit.sample(&mut rng)) as f32));
            labels.push(c);
        }
    }
    let inputs = Tensor::new(vec![classes * per_class, dim], data).expect("blob shape");
    Dataset::new("blobs", inputs, labels, seed)
}

/// Concentric rings in the plane: class `c` sits on radius `c + 1`, point
/// `j` at angle `2*pi*j / per_class`, plus isotropic noise.
pub fn gen_rings(classes: usize, per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 || per_class < 2 {
        return Err(DataError::InvalidSize("rings need classes >= 2 and per_class >= 2".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(DataError::InvalidSize("noise_sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let radius = (c + 1) as f64;
        for j in 0..per_class {
            let theta = 2.0 * PI * j as f64 / per_class as f64;
            let (s, co) = libm::sincos(theta);
            let nx = if noise_sigma > 0.0 { noise_sigma * unit.sample(&mut rng) } else { 0.0 };
            let ny = if noise_sigma > 0.0 { noise_sigma * unit.sample(&mut rng) } else { 0.0 };
            data.push((radius * co + nx) as f32);
            data.push((radius * s + ny) as f32);
            labels.push(c);
        }
    }
    let inputs = Tensor::new(vec![classes * per_class, 2], data).expect("ring shape");
    Dataset::new("rings", inputs, labels, seed)
}

/// Benchmark preset: five overlapping 16-dimensional blobs.
pub const BLOBS_HARD: BlobsPreset =
    BlobsPreset { classes: 5, per_class: 120, dim: 16, center_spread: 0.45, noise_sigma: 1.0 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobsPreset {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_spread: f64,
    pub noise_sigma: f64,
}

impl BlobsPreset {
    pub fn generate(&self, seed: u64) -> Result<Dataset, DataError> {
        let mut d = gen_blobs(self.classes, self.per_class, self.dim, self.center_spread, self.noise_sigma, seed)?;
        d.name = "blobs-hard".to_string();
        Ok(d)
    }
}

/// Stratified split. `fractions` lists train, val and optionally test
/// shares; each class is shuffled independently with `seed` and cut into
/// `floor(fraction * class_count)` sized pieces.
pub fn split(mut dataset: Dataset, fractions: &[f64], seed: u64) -> Result<Dataset, DataError> {
    if fractions.is_empty() || fractions.len() > 3 {
        return Err(DataError::BadFractions("expected 1 to 3 fractions".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(DataError::BadFractions(format!("{fractions:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < fractions.len() {
            return Err(DataError::ClassTooSmall { class, count: members.len(), splits: fractions.len() });
        }
        members.shuffle(&mut rng);
        let mut start = 0;
        for (k, &f) in fractions.iter().enumerate() {
            let take = libm::floor(f * members.len() as f64 + 1e-9) as usize;
            let end = (start + take).min(members.len());
            parts[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    dataset.splits = Some(Splits { train, val, test });
    Ok(dataset)
}

/// Parses label-first comma-separated rows. Blank lines and lines starting
/// with `#` are skipped; line numbers in errors are 1-based.
pub fn parse_csv(text: &str, name: &str) -> Result<Dataset, DataError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let mut cells = row.split(',').map(str::trim);
        let label_cell = cells.next().unwrap_or("");
        let label: i64 = label_cell
            .parse()
            .map_err(|_| DataError::MalformedRow { line, detail: format!("label `{label_cell}` is not an integer") })?;
        if label < 0 {
            return Err(DataError::LabelOutOfRange { line, label });
        }
        let mut n = 0;
        for (col, cell) in cells.enumerate() {
            let v: f32 = cell.parse().map_err(|_| DataError::MalformedRow {
                line,
                detail: format!("column {}: `{cell}` is not numeric", col + 2),
            })?;
            data.push(v);
            n += 1;
        }
        if n == 0 {
            return Err(DataError::MalformedRow { line, detail: "no feature columns".into() });
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => {
                return Err(DataError::MalformedRow { line, detail: format!("{n} features, expected {w}") })
            }
            _ => {}
        }
        labels.push(label as usize);
    }
    let Some(width) = width else {
        return Err(DataError::InvalidSize("csv has no rows".into()));
    };
    let inputs = Tensor::new(vec![labels.len(), width], data).map_err(|e| DataError::InvalidSize(e.to_string()))?;
    Dataset::new(name, inputs, labels, 0)
}

/// Decodes an IDX array (big-endian magic `00 00 type ndims`, then `ndims`
/// big-endian u32 dimensions, then the payload).
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>), DataError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::Idx("magic mismatch".into()));
    }
    let (ty, ndims) = (bytes[2], bytes[3] as usize);
    let width = match ty {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(DataError::Idx(format!("magic mismatch: unknown type code {other:#04x}"))),
    };
    if ndims == 0 {
        return Err(DataError::Idx("zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Idx("truncated header".into()));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(DataError::Idx(format!("payload holds {} bytes, dims need {}", payload.len(), count * width)));
    }
    let values = payload
        .chunks_exact(width)
        .map(|c| match ty {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            0x0D => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]),
        })
        .collect();
    Ok((dims, values))
}

/// Builds a dataset from an IDX sample array and a one-dimensional IDX label array.
pub fn dataset_from_idx(samples: &[u8], labels: &[u8], name: &str) -> Result<Dataset, DataError> {
    let (dims, values) = parse_idx(samples)?;
    let (ldims, lvalues) = parse_idx(labels)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(DataError::Idx(format!("label dims {ldims:?} do not match sample dims {dims:?}")));
    }
    let mut out = Vec::with_capacity(lvalues.len());
    for (i, &l) in lvalues.iter().enumerate() {
        if l < 0.0 || libm::trunc(l) != l {
            return Err(DataError::LabelOutOfRange { line: i + 1, label: l as i64 });
        }
        out.push(l as usize);
    }
    let dims = if dims.len() == 1 { vec![dims[0], 1] } else { dims };
    let inputs =
        Tensor::new(dims, values.into_iter().map(|v| v as f32).collect()).map_err(|e| DataError::Idx(e.to_string()))?;
    Dataset::new(name, inputs, out, 0)
}
