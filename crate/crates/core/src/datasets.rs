//! Samples with missing-value masks, loaders for CSV and MNIST IDX files,
//! seeded splits and batch streams.
//!
//! A missing entry is stored as `NaN` in `x`, `0` in `m`, and the placeholder
//! in `x_filled`. Observed entries carry the same value in `x` and `x_filled`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{GilError, Result};
use crate::linalg::Vector;
use crate::seeded_rng;

/// Default placeholder substituted for missing entries.
pub const DEFAULT_PLACEHOLDER: f64 = 0.0;

pub const DEFAULT_MISSING_TOKENS: [&str; 3] = ["", "NaN", "NA"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Raw values; `NaN` marks a missing entry.
    pub x: Vector,
    /// 1 = observed, 0 = missing.
    pub m: Vector,
    pub x_filled: Vector,
    pub y: usize,
}

impl Sample {
    /// Build a sample from raw values where `NaN` means missing.
    pub fn from_raw(x: Vec<f64>, y: usize, placeholder: f64) -> Self {
        let m = x.iter().map(|v| if v.is_nan() { 0.0 } else { 1.0 }).collect();
        let x_filled = x.iter().map(|&v| if v.is_nan() { placeholder } else { v }).collect();
        Sample { x: Vector(x), m: Vector(m), x_filled: Vector(x_filled), y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Mark the entries where `observed[j]` is false as missing.
    pub fn masked(&self, observed: impl Fn(usize) -> bool, placeholder: f64) -> Sample {
        let x = self
            .x
            .iter()
            .enumerate()
            .map(|(j, &v)| if observed(j) { v } else { f64::NAN })
            .collect();
        Sample::from_raw(x, self.y, placeholder)
    }

    pub fn missing_count(&self) -> usize {
        self.m.iter().filter(|&&v| v == 0.0).count()
    }
}

/// One time step of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub x: Vector,
    pub m: Vector,
    pub x_filled: Vector,
}

impl Step {
    pub fn from_raw(x: Vec<f64>, placeholder: f64) -> Self {
        let s = Sample::from_raw(x, 0, placeholder);
        Step { x: s.x, m: s.m, x_filled: s.x_filled }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub steps: Vec<Step>,
    pub y: usize,
}

impl SequenceSample {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Tabular dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub d: usize,
    pub num_classes: usize,
    /// Mean over observed entries; 0 for a column with no observations.
    pub column_means: Vector,
    pub placeholder: f64,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, placeholder: f64) -> Self {
        let d = samples.first().map_or(0, |s| s.dim());
        assert!(samples.iter().all(|s| s.dim() == d), "samples disagree on dimension");
        let column_means = observed_means(samples.iter().map(|s| (&s.x, &s.m)), d);
        Dataset { samples, d, num_classes, column_means, placeholder }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.num_classes, self.placeholder)
    }

    /// Rebuild `x_filled` with a different placeholder.
    pub fn with_placeholder(&self, placeholder: f64) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample::from_raw(s.x.0.clone(), s.y, placeholder))
            .collect();
        Dataset { samples, placeholder, ..self.clone() }
    }
}

/// Sequence dataset; every step of every sequence has dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub samples: Vec<SequenceSample>,
    pub d: usize,
    pub num_classes: usize,
    pub column_means: Vector,
    pub placeholder: f64,
}

impl SequenceDataset {
    pub fn new(samples: Vec<SequenceSample>, num_classes: usize, placeholder: f64) -> Self {
        let d = samples.first().and_then(|s| s.steps.first()).map_or(0, |s| s.x.len());
        assert!(
            samples.iter().all(|s| !s.steps.is_empty() && s.steps.iter().all(|t| t.x.len() == d)),
            "sequences must be non-empty and share a step dimension"
        );
        let column_means =
            observed_means(samples.iter().flat_map(|s| s.steps.iter().map(|t| (&t.x, &t.m))), d);
        SequenceDataset { samples, d, num_classes, column_means, placeholder }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> SequenceDataset {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        SequenceDataset::new(samples, self.num_classes, self.placeholder)
    }
}

fn observed_means<'a>(rows: impl Iterator<Item = (&'a Vector, &'a Vector)>, d: usize) -> Vector {
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    for (x, m) in rows {
        for j in 0..d {
            if m[j] != 0.0 {
                sum[j] += x[j];
                count[j] += 1;
            }
        }
    }
    Vector(sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
}

#[derive(Clone, Debug)]
pub struct CsvOptions<'a> {
    pub label_column: &'a str,
    pub missing_tokens: &'a [&'a str],
    pub placeholder: f64,
}

impl<'a> CsvOptions<'a> {
    pub fn new(label_column: &'a str) -> Self {
        CsvOptions { label_column, missing_tokens: &DEFAULT_MISSING_TOKENS, placeholder: DEFAULT_PLACEHOLDER }
    }
}

/// Load a comma-separated file with a header row. Every column except the
/// label becomes a feature. Labels that all parse as non-negative integers are
/// used as class indices; otherwise distinct label strings are numbered in
/// sorted order.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions<'_>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == opts.label_column)
        .ok_or_else(|| GilError::load(path, format!("no label column named {:?}", opts.label_column)))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|(i, _)| *i != label_idx).map(|(_, h)| h.to_string()).collect();

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut values = Vec::with_capacity(feature_names.len());
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                continue;
            }
            let cell = cell.trim();
            if opts.missing_tokens.contains(&cell) {
                values.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| GilError::Parse {
                    row: r + 1,
                    column: headers.get(c).unwrap_or("?").to_string(),
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    values.push(f64::NAN);
                } else {
                    values.push(v);
                }
            }
        }
        let label = record.get(label_idx).unwrap_or("").trim().to_string();
        if opts.missing_tokens.contains(&label.as_str()) {
            return Err(GilError::load(path, format!("row {}: missing label", r + 1)));
        }
        raw_labels.push(label);
        rows.push(values);
    }

    let (labels, num_classes) = encode_labels(&raw_labels);
    let samples: Vec<Sample> =
        rows.into_iter().zip(labels).map(|(x, y)| Sample::from_raw(x, y, opts.placeholder)).collect();
    let ds = Dataset::new(samples, num_classes, opts.placeholder);
    for (j, name) in feature_names.iter().enumerate() {
        if ds.samples.iter().all(|s| s.m[j] == 0.0) {
            eprintln!("warning: column {name:?} has no observed values; its mean is taken as 0");
        }
    }
    Ok(ds)
}

fn encode_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let numeric: Option<Vec<usize>> = raw.iter().map(|l| l.parse::<usize>().ok()).collect();
    if let Some(ys) = numeric {
        let k = ys.iter().max().map_or(0, |m| m + 1).max(2);
        return (ys, k);
    }
    let mut ids = BTreeMap::new();
    for l in raw {
        ids.entry(l.clone()).or_insert(0usize);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    let ys = raw.iter().map(|l| ids[l]).collect();
    (ys, ids.len().max(2))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Load an MNIST-style IDX image/label pair. Pixels are scaled into `[0, 1]`
/// and every entry is observed.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_mnist_idx_limited(images_path, labels_path, None)
}

/// Like [`load_mnist_idx`] but keeps only the first `limit` samples.
pub fn load_mnist_idx_limited(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_mnist_idx_limited(&images, &labels, limit).map_err(|(which, msg)| {
        GilError::load(if which == 0 { images_path } else { labels_path }, msg)
    })
}

/// Parse in-memory IDX buffers. The error carries 0 for the image buffer and
/// 1 for the label buffer.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> std::result::Result<Dataset, (u8, String)> {
    parse_mnist_idx_limited(images, labels, None)
}

pub fn parse_mnist_idx_limited(
    images: &[u8],
    labels: &[u8],
    limit: Option<usize>,
) -> std::result::Result<Dataset, (u8, String)> {
    let magic = be_u32(images, 0).ok_or((0, "truncated header".to_string()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err((0, format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let n = be_u32(images, 4).ok_or((0, "truncated header".to_string()))? as usize;
    let rows = be_u32(images, 8).ok_or((0, "truncated header".to_string()))? as usize;
    let cols = be_u32(images, 12).ok_or((0, "truncated header".to_string()))? as usize;
    let d = rows * cols;
    if images.len() < 16 + n * d {
        return Err((0, format!("truncated: {} bytes for {n} images of {rows}x{cols}", images.len())));
    }

    let lmagic = be_u32(labels, 0).ok_or((1, "truncated header".to_string()))?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err((1, format!("bad magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let ln = be_u32(labels, 4).ok_or((1, "truncated header".to_string()))? as usize;
    if ln != n {
        return Err((1, format!("label count {ln} does not match image count {n}")));
    }
    if labels.len() < 8 + n {
        return Err((1, format!("truncated: {} bytes for {n} labels", labels.len())));
    }

    let samples = (0..limit.map_or(n, |l| l.min(n)))
        .map(|i| {
            let px = &images[16 + i * d..16 + (i + 1) * d];
            let x = px.iter().map(|&p| p as f64 / 255.0).collect();
            Sample::from_raw(x, labels[8 + i] as usize, DEFAULT_PLACEHOLDER)
        })
        .collect();
    Ok(Dataset::new(samples, 10, DEFAULT_PLACEHOLDER))
}

/// Deterministically shuffled indices split into (train, test) parts.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(GilError::config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x5911));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&tr), ds.subset(&te)))
}

pub fn split_sequences(
    ds: &SequenceDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(SequenceDataset, SequenceDataset)> {
    let (tr, te) = split_indices(ds.len(), test_fraction, seed)?;
    Ok((ds.subset(&tr), ds.subset(&te)))
}

/// Per-column standardization fitted on observed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vector,
    pub std: Vector,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.d;
        let mean = ds.column_means.clone();
        let mut ss = vec![0.0; d];
        let mut count = vec![0usize; d];
        for s in &ds.samples {
            for j in 0..d {
                if s.m[j] != 0.0 {
                    ss[j] += (s.x[j] - mean[j]).powi(2);
                    count[j] += 1;
                }
            }
        }
        let std = ss
            .iter()
            .zip(&count)
            .map(|(s, &c)| {
                let sd = if c > 1 { (s / (c - 1) as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Standardizer { mean, std: Vector(std) }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                let x = s.x.iter().enumerate().map(|(j, &v)| (v - self.mean[j]) / self.std[j]).collect();
                Sample::from_raw(x, s.y, ds.placeholder)
            })
            .collect();
        Dataset::new(samples, ds.num_classes, ds.placeholder)
    }
}

/// Endless stream of index batches. Each epoch is a fresh deterministic
/// shuffle; incomplete trailing batches are dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(GilError::config(format!("batch size {batch_size} does not fit {n} samples")));
        }
        let mut s = BatchStream {
            n,
            batch_size,
            rng: seeded_rng(seed, 0xba7c4),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        s.reshuffle();
        s.epoch = 0;
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
        self.epoch += 1;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }

    /// All batches of one epoch starting from a fresh shuffle.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        self.reshuffle();
        self.epoch -= 1;
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Balanced binary batches: the first half holds label-1 indices, the second
/// half label-0 indices.
#[derive(Clone, Debug)]
pub struct BalancedBatchStream {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    half: usize,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl BalancedBatchStream {
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if num_classes != 2 {
            return Err(GilError::config(format!("balanced batches need binary labels, got {num_classes} classes")));
        }
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(GilError::config(format!("balanced batch size must be even, got {batch_size}")));
        }
        let half = batch_size / 2;
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        if positives.len() < half || negatives.len() < half {
            return Err(GilError::config(format!(
                "balanced batch of {batch_size} needs {half} samples per class ({} positive, {} negative)",
                positives.len(),
                negatives.len()
            )));
        }
        let mut s = BalancedBatchStream { positives, negatives, half, rng: seeded_rng(seed, 0xba1a), cursor: 0 };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.positives.shuffle(&mut self.rng);
        self.negatives.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.positives.len().min(self.negatives.len()) / self.half
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.batches_per_epoch() {
            self.reshuffle();
        }
        let lo = self.cursor * self.half;
        let mut b = self.positives[lo..lo + self.half].to_vec();
        b.extend_from_slice(&self.negatives[lo..lo + self.half]);
        self.cursor += 1;
        b
    }
}

impl Iterator for BalancedBatchStream {
    type Item = Vec<usize>;
    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
