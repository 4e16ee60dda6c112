//! Datasets: IDX (MNIST) and CSV loaders plus seeded synthetic blobs.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs `[n, features]` in `[0, 1]` with labels in `[0, classes)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::Shape { op: "dataset", lhs: inputs.shape().to_vec(), rhs: vec![labels.len()] });
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("input value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `indices` as an input batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (inputs, labels) = self.batch(indices)?;
        Ok(Dataset { inputs, labels, classes: self.classes })
    }

    /// The first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::contract(format!("split point {n} must leave both parts non-empty")));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// A seeded random permutation of the rows, split into `n` and the rest.
    pub fn shuffled_split(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&order)?.split_at(n)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse { offset: 0, message: format!("{}: bad gzip stream: {e}", path.display()) })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse { offset: bytes.len() as u64, message: format!("truncated header: missing {what} at byte {offset}") })
}

fn idx_body(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &[u8])> {
    if bytes.is_empty() {
        return Err(Error::Parse { offset: 0, message: "truncated: empty file".into() });
    }
    let found = be_u32(bytes, 0, "magic number")?;
    if found != magic {
        return Err(Error::Parse { offset: 0, message: format!("bad magic {found:#010x}, expected {magic:#010x}") });
    }
    let sizes = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i, "dimension size").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * dims;
    let needed = sizes.iter().product::<usize>();
    let body = &bytes[start..];
    if body.len() < needed {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated data: expected {needed} bytes after offset {start}, found {}", body.len()),
        });
    }
    if body.len() > needed {
        return Err(Error::Parse { offset: (start + needed) as u64, message: "trailing bytes after data".into() });
    }
    Ok((sizes, body))
}

/// Parses an IDX image file (magic 0x803): returns `(count, pixels per
/// image, pixels scaled by 1/255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let (sizes, body) = idx_body(bytes, IDX_IMAGES_MAGIC, 3)?;
    Ok((sizes[0], sizes[1] * sizes[2], body.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Parses an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, body) = idx_body(bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (plain or gzip-compressed).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (count, pixels, data) = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if labels.len() != count {
        return Err(Error::Parse { offset: 4, message: format!("{count} images but {} labels", labels.len()) });
    }
    if count == 0 || pixels == 0 {
        return Err(Error::Parse { offset: 4, message: "no samples".into() });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(data, &[count, pixels])?, labels, classes)
}

/// Loads a CSV file with a header row. The column named `label` holds the
/// class; every other column is a feature in `[0, 1]`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let label_col = headers.iter().position(|h| h.trim() == "label").ok_or_else(|| Error::Parse { offset: 0, message: "no column named \"label\"".into() })?;
    let features = headers.len() - 1;
    if features == 0 {
        return Err(Error::Parse { offset: 0, message: "no feature columns".into() });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |message: String| Error::Parse { offset, message };
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i == label_col {
                labels.push(field.parse::<usize>().map_err(|_| bad(format!("bad label {field:?}")))?);
            } else {
                let v: f64 = field.parse().map_err(|_| bad(format!("bad feature {field:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("feature {v} outside [0, 1]")));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse { offset: 0, message: "no data rows".into() });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(data, &[labels.len(), features])?, labels, classes)
}

/// Unit-variance Gaussian clusters, one per class, min-max scaled to
/// `[0, 1]` per feature.
///
/// Centers sit on a regular polygon in the first two coordinates with
/// neighbouring centers `separation` apart (on a line when `dimension` is 1).
pub fn synthetic_blobs(per_class: usize, classes: usize, dimension: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if per_class == 0 || classes == 0 || dimension == 0 || !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::contract("blob sizes and separation must be positive"));
    }
    let center = |c: usize| -> Vec<f64> {
        let mut point = vec![0.0; dimension];
        if dimension == 1 || classes == 2 {
            point[0] = c as f64 * separation;
        } else if classes > 2 {
            let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
            let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            point[0] = radius * angle.cos();
            point[1] = radius * angle.sin();
        }
        point
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * dimension);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let mu = center(c);
        for _ in 0..per_class {
            data.extend(mu.iter().map(|m| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                m + noise
            }));
            labels.push(c);
        }
    }
    for f in 0..dimension {
        let column = data.iter().skip(f).step_by(dimension);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in data.iter_mut().skip(f).step_by(dimension) {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Dataset::new(Tensor::new(data, &[n, dimension])?, labels, classes)
}
