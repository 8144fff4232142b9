//! Row-major feature matrices and per-image feature sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of `f32`, row-major. Storage type for base
/// features; arithmetic on them is done in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix that still records its column count.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row subset in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// What produced a feature set. `Cnn` carries the exporter's source tag
/// (model and resize policy).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DescriptorKind {
    Sift,
    Surf,
    Patch,
    Cnn(String),
}

impl DescriptorKind {
    pub fn tag(&self) -> String {
        match self {
            DescriptorKind::Sift => "sift".into(),
            DescriptorKind::Surf => "surf".into(),
            DescriptorKind::Patch => "patch".into(),
            DescriptorKind::Cnn(src) if src.is_empty() => "cnn".into(),
            DescriptorKind::Cnn(src) => format!("cnn:{src}"),
        }
    }

    /// Fixed descriptor length, when the kind has one.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            DescriptorKind::Sift => Some(128),
            DescriptorKind::Surf => Some(64),
            _ => None,
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        match (head, rest) {
            ("sift", None) => Ok(DescriptorKind::Sift),
            ("surf", None) => Ok(DescriptorKind::Surf),
            ("patch", None) => Ok(DescriptorKind::Patch),
            ("cnn", r) => Ok(DescriptorKind::Cnn(r.unwrap_or("").to_string())),
            _ => Err(Error::Format(format!("unknown descriptor kind tag {s:?}"))),
        }
    }
}

/// The `J × d` base features extracted from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_id: String,
    pub kind: DescriptorKind,
    pub features: FeatureMatrix,
}

impl FeatureSet {
    pub fn new(image_id: impl Into<String>, kind: DescriptorKind, features: FeatureMatrix) -> Result<Self> {
        if let Some(d) = kind.fixed_dim() {
            if features.cols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: features.cols(),
                });
            }
        }
        if !features.all_finite() {
            return Err(Error::invalid("feature set contains NaN or infinite values"));
        }
        Ok(Self {
            image_id: image_id.into(),
            kind,
            features,
        })
    }

    /// Number of features `J`.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Descriptor length `d`.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}
