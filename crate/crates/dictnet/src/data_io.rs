//! Dataset ingestion (IDX, CSV) and normalization.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dictnet_core::{ActivationKind, Matrix};
use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { offset: usize, expected: u32, found: u32 },
    #[error("IDX data truncated at offset {offset}: needed {needed} more bytes, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("IDX data has {extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("image file holds {images} images but label file holds {labels} labels (count field at offset {offset})")]
    CountMismatch {
        images: usize,
        labels: usize,
        offset: usize,
    },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column {column}: '{value}' is not a number")]
    NonNumeric {
        line: usize,
        column: usize,
        value: String,
    },
    #[error("line {line}, column {column}: label '{value}' is not an integer")]
    BadLabel {
        line: usize,
        column: usize,
        value: String,
    },
    #[error("CSV has no column named '{0}'")]
    MissingColumn(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("squash normalization needs a bounded activation, got {0}")]
    UnboundedSquash(&'static str),
    #[error("dataset has {found} features but the normalization was fitted on {expected}")]
    FeatureCount { expected: usize, found: usize },
    #[error("dataset cannot be written as IDX: {0}")]
    NotIdx(String),
    #[error(transparent)]
    Core(#[from] dictnet_core::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Samples as columns of `x`, with labels remapped to `0..C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// Class index per sample; empty for unlabeled data.
    pub labels: Vec<usize>,
    /// Original label value of each class index, in order of first appearance.
    pub label_values: Vec<i64>,
    pub feature_names: Option<Vec<String>>,
    /// `(rows, cols)` of each image for IDX data.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.cols() == 0
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() || self.x.cols() == 0
    }

    pub fn class_count(&self) -> usize {
        self.label_values.len()
    }

    /// Labels with their original values restored.
    pub fn original_labels(&self) -> Vec<i64> {
        self.labels.iter().map(|&l| self.label_values[l]).collect()
    }

    /// Keeps the first `n` samples (or all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let labels: Vec<usize> = self.labels.iter().take(n).copied().collect();
        Dataset {
            x: self.x.column_block(0, n),
            labels,
            label_values: self.label_values.clone(),
            feature_names: self.feature_names.clone(),
            image_shape: self.image_shape,
        }
    }
}

/// Remaps labels to `0..C` in order of first appearance.
pub fn remap_labels(values: &[i64]) -> (Vec<usize>, Vec<i64>) {
    dictnet_core::deep_net::remap_labels(values)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let offset = self.pos;
        let found = self.u32_be()?;
        if found != expected {
            return Err(DataError::BadMagic {
                offset,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(DataError::TrailingBytes {
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Raw contents of an IDX image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, image after image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// Pixels as a `(rows·cols) × count` matrix of values in `[0, 255]`.
    pub fn to_matrix(&self) -> Matrix {
        let d = self.rows * self.cols;
        Matrix::from_fn(d, self.count, |r, c| f64::from(self.pixels[c * d + r]))
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let pixels = cur.take(count * rows * cols)?.to_vec();
    cur.finish()?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.magic(IDX_LABELS_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let labels = cur.take(count)?.to_vec();
    cur.finish()?;
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX image and label contents.
pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
            offset: 4,
        });
    }
    let values: Vec<i64> = labels.iter().map(|&b| i64::from(b)).collect();
    let (labels, label_values) = remap_labels(&values);
    Ok(Dataset {
        x: images.to_matrix(),
        labels,
        label_values,
        feature_names: None,
        image_shape: Some((images.rows, images.cols)),
    })
}

/// Reads an IDX image/label pair (optionally gzip-compressed).
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_bytes(images_path)?)?;
    let labels = parse_idx_labels(&read_bytes(labels_path)?)?;
    idx_dataset(&images, &labels)
}

/// Reads an IDX image file without labels.
pub fn read_idx_images(path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_bytes(path)?)?;
    Ok(Dataset {
        x: images.to_matrix(),
        labels: Vec::new(),
        label_values: Vec::new(),
        feature_names: None,
        image_shape: Some((images.rows, images.cols)),
    })
}

/// Inverse of [`idx_dataset`]: pixel and label bytes of an IDX dataset.
pub fn dataset_to_idx(ds: &Dataset) -> Result<(IdxImages, Vec<u8>)> {
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| DataError::NotIdx("no image shape".into()))?;
    if rows * cols != ds.dim() {
        return Err(DataError::NotIdx(format!(
            "image shape {rows}x{cols} does not match {} features",
            ds.dim()
        )));
    }
    let mut pixels = Vec::with_capacity(ds.x.as_slice().len());
    for c in 0..ds.len() {
        for r in 0..ds.dim() {
            let v = ds.x.get(r, c);
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(DataError::NotIdx(format!("value {v} at ({r}, {c}) is not a byte")));
            }
            pixels.push(v as u8);
        }
    }
    let labels = ds
        .original_labels()
        .into_iter()
        .map(|v| u8::try_from(v).map_err(|_| DataError::NotIdx(format!("label {v} is not a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    Ok((
        IdxImages {
            count: ds.len(),
            rows,
            cols,
            pixels,
        },
        labels,
    ))
}

/// Reads a comma-separated file with a header row. Each row is one sample.
/// When `label_column` names a header field, that column is taken as integer
/// labels; otherwise the data is unlabeled and every column is a feature.
pub fn read_csv_dataset(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let text = read_bytes(path)?;
    parse_csv(&text, label_column)
}

pub fn parse_csv(text: &[u8], label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))?,
        ),
        None => None,
    };
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let d = feature_names.len();

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(DataError::RaggedRow {
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let mut sample = Vec::with_capacity(d);
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_idx {
                let v: i64 = cell.parse().map_err(|_| DataError::BadLabel {
                    line,
                    column: j + 1,
                    value: cell.to_string(),
                })?;
                raw_labels.push(v);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| DataError::NonNumeric {
                        line,
                        column: j + 1,
                        value: cell.to_string(),
                    })?;
                sample.push(v);
            }
        }
        columns.push(sample);
    }
    let x = Matrix::from_columns(d, &columns)?;
    let (labels, label_values) = remap_labels(&raw_labels);
    Ok(Dataset {
        x,
        labels,
        label_values,
        feature_names: Some(feature_names),
        image_shape: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    None,
    /// Divide by the global maximum absolute value.
    #[default]
    UnitScale,
    /// Per-feature zero mean and unit variance.
    Standardize,
    /// Global affine map of `[min, max]` onto the activation range shrunk by `δ`.
    Squash,
}

impl std::str::FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "unit_scale" => Ok(Self::UnitScale),
            "standardize" | "per_feature_standardize" => Ok(Self::Standardize),
            "squash" | "squash_to_activation_range" => Ok(Self::Squash),
            other => Err(format!(
                "unknown normalization '{other}' (expected none, unit_scale, standardize or squash)"
            )),
        }
    }
}

/// Fitted normalization, replayable on new data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    UnitScale {
        scale: f64,
    },
    /// `(x − mean) / scale` per feature; `scale` is 1 for constant features.
    Standardize {
        means: Vec<f64>,
        scales: Vec<f64>,
    },
    /// `lo + (x − min)·(hi − lo)/(max − min)`.
    Squash {
        min: f64,
        max: f64,
        lo: f64,
        hi: f64,
    },
}

impl Normalization {
    pub fn mode(&self) -> NormalizationMode {
        match self {
            Normalization::None => NormalizationMode::None,
            Normalization::UnitScale { .. } => NormalizationMode::UnitScale,
            Normalization::Standardize { .. } => NormalizationMode::Standardize,
            Normalization::Squash { .. } => NormalizationMode::Squash,
        }
    }

    /// Fits the transform on `x` (features × samples).
    pub fn fit(x: &Matrix, mode: NormalizationMode, activation: ActivationKind, delta: f64) -> Result<Self> {
        let data = x.as_slice();
        Ok(match mode {
            NormalizationMode::None => Normalization::None,
            NormalizationMode::UnitScale => {
                let m = x.max_abs();
                Normalization::UnitScale {
                    scale: if m > 0.0 { m } else { 1.0 },
                }
            }
            NormalizationMode::Standardize => {
                let n = x.cols().max(1) as f64;
                let mut means = Vec::with_capacity(x.rows());
                let mut scales = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    means.push(mean);
                    scales.push(if var > 0.0 { var.sqrt() } else { 1.0 });
                }
                Normalization::Standardize { means, scales }
            }
            NormalizationMode::Squash => {
                if !activation.is_bounded() {
                    return Err(DataError::UnboundedSquash(activation.name()));
                }
                let (lo, hi) = activation.range();
                let min = data.iter().copied().fold(f64::INFINITY, f64::min);
                let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (min, max) = if data.is_empty() { (0.0, 1.0) } else { (min, max) };
                Normalization::Squash {
                    min,
                    max,
                    lo: lo + delta,
                    hi: hi - delta,
                }
            }
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        Ok(match self {
            Normalization::None => x.clone(),
            Normalization::UnitScale { scale } => x.map(|v| v / scale),
            Normalization::Standardize { means, scales } => {
                if means.len() != x.rows() {
                    return Err(DataError::FeatureCount {
                        expected: means.len(),
                        found: x.rows(),
                    });
                }
                Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - means[r]) / scales[r])
            }
            Normalization::Squash { min, max, lo, hi } => {
                let span = max - min;
                if span > 0.0 {
                    x.map(|v| lo + (v - min) * (hi - lo) / span)
                } else {
                    x.map(|_| 0.5 * (lo + hi))
                }
            }
        })
    }
}

/// Fits `mode` on the dataset and returns the transformed copy and the
/// parameters needed to replay the transform on other data.
pub fn normalize(
    ds: &Dataset,
    mode: NormalizationMode,
    activation: ActivationKind,
    delta: f64,
) -> Result<(Dataset, Normalization)> {
    let params = Normalization::fit(&ds.x, mode, activation, delta)?;
    let mut out = ds.clone();
    out.x = params.apply(&ds.x)?;
    Ok((out, params))
}
