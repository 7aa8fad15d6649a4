//! Datasets, IDX/CSV loaders and the minibatch sampler.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mlp::DataBatch;

const IDX_UBYTE_MAGIC: u32 = 0x0000_0803;

/// Samples as rows of `inputs`; for autoencoders `targets == inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix, name: impl Into<String>) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Format(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            name: name.into(),
        })
    }

    pub fn autoencoder(inputs: Matrix, name: impl Into<String>) -> Self {
        Self {
            targets: inputs.clone(),
            inputs,
            name: name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> DataBatch {
        DataBatch {
            inputs: gather_rows(&self.inputs, indices),
            targets: gather_rows(&self.targets, indices),
        }
    }

    /// Contiguous slice `[start, end)` as a batch.
    pub fn slice(&self, start: usize, end: usize) -> DataBatch {
        let idx: Vec<usize> = (start..end).collect();
        self.batch(&idx)
    }

    /// First `n` samples (or all if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let b = self.slice(0, n);
        Self {
            inputs: b.inputs,
            targets: b.targets,
            name: self.name.clone(),
        }
    }
}

fn gather_rows(m: &Matrix, indices: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(indices.len() * m.cols());
    for &i in indices {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(indices.len(), m.cols(), data).expect("row lengths agree")
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

/// Reads an unsigned-byte IDX image file (optionally gzipped) and scales
/// pixels to `[0, 1]`, one flattened image per row.
pub fn load_idx(path: &Path, as_autoencoder: bool) -> Result<Dataset> {
    let mut bytes = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let inputs = parse_idx(&bytes)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if as_autoencoder {
        Ok(Dataset::autoencoder(inputs, name))
    } else {
        let targets = Matrix::zeros(inputs.rows(), 0);
        Dataset::new(inputs, targets, name)
    }
}

fn parse_idx(bytes: &[u8]) -> Result<Matrix> {
    let be = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format("truncated IDX header".into()))
    };
    let magic = be(0)?;
    if magic != IDX_UBYTE_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX magic {magic:#010x}, expected {IDX_UBYTE_MAGIC:#010x}"
        )));
    }
    let (n, rows, cols) = (be(1)? as usize, be(2)? as usize, be(3)? as usize);
    let dim = rows * cols;
    if n == 0 || dim == 0 {
        return Err(Error::Format("IDX file holds no samples".into()));
    }
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(Error::Format(format!(
            "IDX payload truncated: {} bytes for {n} x {dim}",
            body.len()
        )));
    }
    let data = body[..n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    Matrix::from_vec(n, dim, data)
}

/// Writes `images` (values in `[0, 1]`) as an IDX image file; gzipped when
/// the path ends in `.gz`.
pub fn write_idx(path: &Path, images: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != images.cols() {
        return Err(Error::Format(format!(
            "{rows}x{cols} images but {} columns",
            images.cols()
        )));
    }
    let mut buf = Vec::with_capacity(16 + images.as_slice().len());
    for v in [
        IDX_UBYTE_MAGIC,
        images.rows() as u32,
        rows as u32,
        cols as u32,
    ] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend(
        images
            .as_slice()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&buf)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(&buf)?;
    }
    Ok(())
}

/// Headerless numeric CSV, one sample per line.
pub fn load_csv(path: &Path, as_autoencoder: bool) -> Result<Dataset> {
    let reader = BufReader::new(open_maybe_gz(path)?);
    let mut data = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {}: cannot parse {field:?}", lineno + 1))
            })?;
            data.push(v);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::Format(format!(
                    "line {}: {w} fields, expected {expected}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        n += 1;
    }
    let width = width.ok_or_else(|| Error::Format("CSV file holds no samples".into()))?;
    let inputs = Matrix::from_vec(n, width, data)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    if as_autoencoder {
        Ok(Dataset::autoencoder(inputs, name))
    } else {
        Dataset::new(inputs, Matrix::zeros(n, 0), name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Low-rank Bernoulli patterns in `{0, 1}`.
    Binary,
    /// Low-rank Gaussian features rescaled to `[0, 1]`.
    Continuous,
}

/// Synthetic autoencoder data driven by a rank-8 Gaussian latent.
pub fn synthetic_autoencoder(seed: u64, n: usize, dim: usize, kind: SyntheticKind) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = 8;
    let w: Vec<f64> = (0..rank * dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let scale = 1.0 / (rank as f64).sqrt();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let z: Vec<f64> = (0..rank)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..dim {
            let v: f64 = z
                .iter()
                .enumerate()
                .map(|(r, zr)| zr * w[r * dim + j])
                .sum();
            data.push(v * scale);
        }
    }
    match kind {
        SyntheticKind::Binary => {
            for v in data.iter_mut() {
                let p = 1.0 / (1.0 + (-3.0 * *v).exp());
                *v = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
        }
        SyntheticKind::Continuous => {
            let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for v in data.iter_mut() {
                *v = ((*v - lo) / span).clamp(0.0, 1.0);
            }
        }
    }
    let inputs = Matrix::from_vec(n, dim, data).expect("sizes agree");
    Dataset::autoencoder(inputs, format!("synthetic-{dim}"))
}

/// Epoch-wise shuffled minibatches of a fixed size. The incomplete tail of
/// each permutation is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Config(format!(
                "batch size {batch_size} does not fit a dataset of {n} samples"
            )));
        }
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch_size,
            order: (0..n).collect(),
            cursor: 0,
            epoch: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Number of permutations started so far, minus one.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        idx
    }

    pub fn next_batch(&mut self, data: &Dataset) -> DataBatch {
        let idx = self.next_indices();
        data.batch(&idx)
    }

    /// Index sets for one full epoch.
    pub fn epoch_indices(&mut self) -> Vec<Vec<usize>> {
        (0..self.batches_per_epoch())
            .map(|_| self.next_indices())
            .collect()
    }
}
