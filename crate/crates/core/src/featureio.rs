//! MFP1 feature files, feature populations and transpose-PCA population
//! reduction.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes   "MFP1"
//! kind    u8 length, then that many bytes of UTF-8
//! rank    u8
//! shape   rank × u32
//! payload product(shape) × f32, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use crate::reduce::centred_svd;

pub const MAGIC: &[u8; 4] = b"MFP1";

/// Rank-3 activation tensor `(d1, d2, d)`, row-major with the channel index
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub d1: usize,
    pub d2: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(d1: usize, d2: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if d1 == 0 || d2 == 0 || d == 0 || data.len() != d1 * d2 * d {
            return Err(Error::invalid(format!(
                "tensor shape ({d1},{d2},{d}) does not match {} values",
                data.len()
            )));
        }
        Ok(Self { d1, d2, d, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize) -> f32 {
        self.data[(i * self.d2 + j) * self.d + c]
    }
}

/// Decoded contents of an MFP1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub kind: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn matrix(kind: impl Into<String>, m: &FeatureMatrix) -> Self {
        Self {
            kind: kind.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn tensor(kind: impl Into<String>, t: &Tensor3) -> Self {
        Self {
            kind: kind.into(),
            shape: vec![t.d1, t.d2, t.d],
            data: t.data.clone(),
        }
    }

    /// Pack arbitrary bytes as a rank-1 payload: the bytes are padded with
    /// ASCII spaces to a multiple of 4 and every 4-byte group is stored as
    /// the f32 with that little-endian bit pattern.
    pub fn blob(kind: impl Into<String>, bytes: &[u8]) -> Self {
        let mut padded = bytes.to_vec();
        padded.resize(bytes.len().div_ceil(4).max(1) * 4, b' ');
        let data: Vec<f32> = padded
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Self {
            kind: kind.into(),
            shape: vec![data.len()],
            data,
        }
    }

    /// Inverse of [`FeatureFile::blob`], padding included.
    pub fn blob_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect()
    }

    pub fn into_matrix(self) -> Result<FeatureMatrix> {
        match self.shape[..] {
            [r, c] => FeatureMatrix::new(r, c, self.data),
            _ => Err(Error::Format(format!("expected a rank-2 file, found shape {:?}", self.shape))),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor3> {
        match self.shape[..] {
            [a, b, c] => Tensor3::new(a, b, c, self.data),
            _ => Err(Error::Format(format!("expected a rank-3 file, found shape {:?}", self.shape))),
        }
    }

    /// Interpret as a per-image feature set. Rank-3 CNN tensors are
    /// reshaped to `(d1·d2) × d`.
    pub fn into_feature_set(self, image_id: impl Into<String>) -> Result<FeatureSet> {
        let kind: DescriptorKind = self.kind.parse()?;
        let m = match self.shape.len() {
            2 => self.into_matrix()?,
            3 => {
                let t = self.into_tensor()?;
                FeatureMatrix::new(t.d1 * t.d2, t.d, t.data)?
            }
            _ => return Err(Error::Format(format!("unsupported rank {}", self.shape.len()))),
        };
        FeatureSet::new(image_id, kind, m)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let kind = self.kind.as_bytes();
        if kind.len() > u8::MAX as usize {
            return Err(Error::Format("kind tag longer than 255 bytes".into()));
        }
        if self.shape.is_empty() || self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("unsupported rank {}", self.shape.len())));
        }
        if self.shape.iter().any(|&s| s == 0 || s > u32::MAX as usize) {
            return Err(Error::Format(format!("shape {:?} has an empty or oversized axis", self.shape)));
        }
        let count: usize = self.shape.iter().product();
        if count != self.data.len() {
            return Err(Error::Format(format!(
                "shape {:?} needs {count} values, payload has {}",
                self.shape,
                self.data.len()
            )));
        }
        let mut out = Vec::with_capacity(6 + kind.len() + 4 * self.shape.len() + 4 * count);
        out.extend_from_slice(MAGIC);
        out.push(kind.len() as u8);
        out.extend_from_slice(kind);
        out.push(self.shape.len() as u8);
        for &s in &self.shape {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an MFP1 file".into()));
        }
        let kind_len = cur.take(1)?[0] as usize;
        let kind = std::str::from_utf8(cur.take(kind_len)?)
            .map_err(|_| Error::Format("kind tag is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        if rank == 0 {
            return Err(Error::Format("rank 0 is not allowed".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let s = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
            if s == 0 {
                return Err(Error::Format("shape entries must be at least 1".into()));
            }
            shape.push(s);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        let payload = &bytes[cur.pos..];
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, shape {shape:?} needs {}",
                payload.len(),
                count * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { kind, shape, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn write_file(path: &Path, file: &FeatureFile) -> Result<()> {
    let bytes = file.encode()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Write one image's features with its descriptor kind as the tag.
pub fn write_features(path: &Path, fs: &FeatureSet) -> Result<()> {
    if fs.is_empty() {
        return Err(Error::Format(format!(
            "{}: refusing to write an empty feature set",
            fs.image_id
        )));
    }
    write_file(path, &FeatureFile::matrix(fs.kind.tag(), &fs.features))
}

/// Read a feature file as a feature set; the image id is the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_file(path)?.into_feature_set(id)
}

/// Where a population row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    /// Index into [`Population::image_ids`].
    pub image: usize,
    pub row: usize,
}

/// All base features of a set of images stacked into one `P × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub features: FeatureMatrix,
    pub kind: DescriptorKind,
    pub image_ids: Vec<String>,
    pub origins: Vec<RowOrigin>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Keep only the given rows, preserving their provenance.
    pub fn subsample(&self, rows: &[usize]) -> Population {
        Population {
            features: self.features.select_rows(rows),
            kind: self.kind.clone(),
            image_ids: self.image_ids.clone(),
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
        }
    }
}

/// Concatenate feature sets in the given order.
pub fn build_population(sets: &[FeatureSet]) -> Result<Population> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("cannot build a population from no feature sets"))?;
    let d = first.dim();
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut origins = Vec::with_capacity(total);
    for (i, s) in sets.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: s.dim(),
            });
        }
        if s.kind != first.kind {
            return Err(Error::invalid(format!(
                "mixed descriptor kinds {} and {}",
                first.kind, s.kind
            )));
        }
        data.extend_from_slice(s.features.as_slice());
        origins.extend((0..s.len()).map(|row| RowOrigin { image: i, row }));
    }
    Ok(Population {
        features: FeatureMatrix::new(total, d, data)?,
        kind: first.kind.clone(),
        image_ids: sets.iter().map(|s| s.image_id.clone()).collect(),
        origins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `J ≤ d`: nothing to do.
    Unchanged,
    Reduced,
    /// All rows identical: the first `min(J, d)` rows were kept.
    Fallback,
}

/// Reduce a `J × d` feature set to at most `d` features by PCA on the
/// transposed matrix: the `d` columns are treated as samples of length `J`,
/// centred, projected on their top `d` principal directions, and the `d × d`
/// score matrix is transposed back.
pub fn reduce_population(fs: &FeatureSet) -> Result<(FeatureSet, Reduction)> {
    let (j, d) = (fs.len(), fs.dim());
    if j == 0 {
        return Err(Error::invalid("cannot reduce an empty feature set"));
    }
    if j <= d {
        return Ok((fs.clone(), Reduction::Unchanged));
    }
    let first = fs.features.row(0);
    if fs.features.iter_rows().all(|r| r == first) {
        let kept = fs.features.select_rows(&(0..d).collect::<Vec<_>>());
        return Ok((FeatureSet::new(fs.image_id.clone(), fs.kind.clone(), kept)?, Reduction::Fallback));
    }
    // d samples (rows) of length J
    let t = nalgebra::DMatrix::<f64>::from_fn(d, j, |r, c| fs.features.row(c)[r] as f64);
    let svd = centred_svd(&t)?;
    // scores: d samples × d components, zero-padded past the available rank
    let mut out = vec![0f32; d * d];
    let avail = svd.singular_values.len().min(d);
    for comp in 0..avail {
        let s = svd.singular_values[comp];
        for sample in 0..d {
            // transposed back: row = component, column = original dimension
            out[comp * d + sample] = (svd.u[(sample, comp)] * s) as f32;
        }
    }
    let m = FeatureMatrix::new(d, d, out)?;
    Ok((FeatureSet::new(fs.image_id.clone(), fs.kind.clone(), m)?, Reduction::Reduced))
}
