//! Moment fingerprints of clustered base features.
//!
//! For an image with features `S_i` assigned to dictionary centres:
//!
//! * `H₀` is the normalised histogram of assignments (bag of visual words),
//! * `H₁` holds the per-cluster mean feature; its VLAD form subtracts the
//!   centre and L2-normalises each block,
//! * `H₂` holds the per-cluster second moment of deviations, either full
//!   `d × d` blocks or their diagonals; the VLAD form measures deviations from
//!   the centre scaled by the `H₁` residual norm.
//!
//! Empty clusters contribute zero blocks so every image of a dataset yields
//! the same length.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::{assign, Dictionary};
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use crate::featureio::Tensor3;

/// Full `H₂` on inputs above this many values logs a warning.
pub const FULL_H2_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Moment {
    H0,
    H1 { vlad: bool },
    H2 { vlad: bool, diagonal: bool },
    CnnFlatten,
    CnnMaxPool,
}

impl Moment {
    pub fn order(&self) -> Option<u8> {
        match self {
            Moment::H0 => Some(0),
            Moment::H1 { .. } => Some(1),
            Moment::H2 { .. } => Some(2),
            _ => None,
        }
    }

    /// Length of one block of this moment for `k` clusters of dimension `d`.
    pub fn len(&self, k: usize, d: usize) -> usize {
        match self {
            Moment::H0 => k,
            Moment::H1 { .. } | Moment::H2 { diagonal: true, .. } => k * d,
            Moment::H2 { diagonal: false, .. } => k * d * d,
            Moment::CnnFlatten | Moment::CnnMaxPool => d,
        }
    }
}

impl fmt::Display for Moment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Moment::H0 => write!(f, "H0"),
            Moment::H1 { vlad } => write!(f, "H1{}", if *vlad { "v" } else { "" }),
            Moment::H2 { vlad, diagonal } => write!(
                f,
                "H2{}{}",
                if *vlad { "v" } else { "" },
                if *diagonal { "diag" } else { "" }
            ),
            Moment::CnnFlatten => write!(f, "flatten"),
            Moment::CnnMaxPool => write!(f, "maxpool"),
        }
    }
}

/// One contiguous block of a fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Part {
    pub moment: Moment,
    /// Number of cluster centres; 0 for CNN pooling parts.
    pub k: usize,
    pub len: usize,
}

/// How a fingerprint was built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recipe {
    pub descriptor: String,
    pub parts: Vec<Part>,
    /// Reductions applied, in order (e.g. `"redP"`, `"redF:600"`).
    #[serde(default)]
    pub reductions: Vec<String>,
}

impl Recipe {
    fn single(kind: &DescriptorKind, moment: Moment, k: usize, len: usize) -> Self {
        Self {
            descriptor: kind.tag(),
            parts: vec![Part { moment, k, len }],
            reductions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cluster counts of all parts, in order.
    pub fn ks(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.k).collect()
    }

    pub fn with_reduction(mut self, r: impl Into<String>) -> Self {
        self.reductions.push(r.into());
        self
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.descriptor)?;
        let mut i = 0;
        while i < self.parts.len() {
            let m = self.parts[i].moment;
            let mut ks = vec![self.parts[i].k];
            while i + 1 < self.parts.len() && self.parts[i + 1].moment == m {
                i += 1;
                ks.push(self.parts[i].k);
            }
            let ks: Vec<String> = ks.iter().filter(|&&k| k > 0).map(|k| k.to_string()).collect();
            if ks.is_empty() {
                write!(f, " {m}")?;
            } else {
                write!(f, " {m},{}", ks.join("+"))?;
            }
            i += 1;
        }
        for r in &self.reductions {
            write!(f, " [{r}]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub image_id: String,
    pub values: Vec<f64>,
    pub recipe: Recipe,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_input(fs: &FeatureSet, dict: &Dictionary) -> Result<Vec<usize>> {
    if fs.is_empty() {
        return Err(Error::invalid(format!("{}: empty feature set", fs.image_id)));
    }
    assign(dict, fs)
}

/// Per-cluster member counts and `f64` feature sums.
fn cluster_sums(fs: &FeatureSet, labels: &[usize], k: usize) -> (Vec<usize>, Vec<f64>) {
    let d = fs.dim();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0f64; k * d];
    for (row, &l) in fs.features.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    (counts, sums)
}

/// Histogram of cluster assignments, normalised by `J`.
pub fn h0(fs: &FeatureSet, dict: &Dictionary) -> Result<Fingerprint> {
    let labels = check_input(fs, dict)?;
    let mut hist = vec![0.0f64; dict.k];
    for &l in &labels {
        hist[l] += 1.0;
    }
    let j = labels.len() as f64;
    hist.iter_mut().for_each(|h| *h /= j);
    Ok(Fingerprint {
        image_id: fs.image_id.clone(),
        values: hist,
        recipe: Recipe::single(&fs.kind, Moment::H0, dict.k, dict.k),
    })
}

/// Per-cluster means `H₁,k`, and the centred residuals `H₁,k − μ_k`.
fn means_and_residuals(fs: &FeatureSet, dict: &Dictionary, labels: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let d = dict.d;
    let (counts, mut means) = cluster_sums(fs, labels, dict.k);
    let mut resid = vec![0.0f64; dict.k * d];
    for k in 0..dict.k {
        if counts[k] == 0 {
            continue;
        }
        let m = &mut means[k * d..(k + 1) * d];
        m.iter_mut().for_each(|v| *v /= counts[k] as f64);
        for ((r, &mv), &c) in resid[k * d..(k + 1) * d].iter_mut().zip(m.iter()).zip(dict.centre(k)) {
            *r = mv - c;
        }
    }
    (counts, means, resid)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-cluster mean features (`vlad = false`) or L2-normalised residuals
/// from the centres (`vlad = true`). Empty or degenerate clusters give zero
/// rows.
pub fn h1(fs: &FeatureSet, dict: &Dictionary, vlad: bool) -> Result<Fingerprint> {
    let labels = check_input(fs, dict)?;
    let d = dict.d;
    let (counts, means, mut resid) = means_and_residuals(fs, dict, &labels);
    let values = if vlad {
        for k in 0..dict.k {
            let block = &mut resid[k * d..(k + 1) * d];
            let n = norm(block);
            if counts[k] > 0 && n > 0.0 {
                block.iter_mut().for_each(|v| *v /= n);
            } else {
                if counts[k] > 0 {
                    log::debug!("{}: cluster {k} mean coincides with its centre", fs.image_id);
                }
                block.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        resid
    } else {
        means
    };
    Ok(Fingerprint {
        image_id: fs.image_id.clone(),
        values,
        recipe: Recipe::single(&fs.kind, Moment::H1 { vlad }, dict.k, dict.k * d),
    })
}

/// Per-cluster second moments with divisor `J_k`.
///
/// Without `vlad` the deviations are `S − H₁,k`; with it they are
/// `(S − μ_k) / |H₁,k − μ_k|`, and a cluster whose mean sits exactly on its
/// centre yields a zero block. `diagonal` keeps only the `d` diagonal entries
/// of each `d × d` block.
pub fn h2(fs: &FeatureSet, dict: &Dictionary, vlad: bool, diagonal: bool) -> Result<Fingerprint> {
    let labels = check_input(fs, dict)?;
    let d = dict.d;
    let block = if diagonal { d } else { d * d };
    if !diagonal && dict.k * d * d > FULL_H2_BUDGET {
        log::warn!(
            "{}: full H2 with K={} and d={d} produces {} values per image",
            fs.image_id,
            dict.k,
            dict.k * d * d
        );
    }
    let (counts, means, resid) = means_and_residuals(fs, dict, &labels);
    let mut scale = vec![1.0f64; dict.k];
    let mut degenerate = vec![false; dict.k];
    if vlad {
        for k in 0..dict.k {
            let n = norm(&resid[k * d..(k + 1) * d]);
            if n > 0.0 {
                scale[k] = 1.0 / n;
            } else {
                degenerate[k] = true;
                if counts[k] > 0 {
                    log::debug!("{}: cluster {k} VLAD residual is zero, H2v block set to zero", fs.image_id);
                }
            }
        }
    }
    let mut values = vec![0.0f64; dict.k * block];
    let mut dev = vec![0.0f64; d];
    for (row, &k) in fs.features.iter_rows().zip(&labels) {
        if degenerate[k] {
            continue;
        }
        let origin = if vlad { dict.centre(k) } else { &means[k * d..(k + 1) * d] };
        for ((dv, &s), &o) in dev.iter_mut().zip(row).zip(origin) {
            *dv = (s as f64 - o) * scale[k];
        }
        let out = &mut values[k * block..(k + 1) * block];
        if diagonal {
            for (o, &x) in out.iter_mut().zip(&dev) {
                *o += x * x;
            }
        } else {
            for a in 0..d {
                let xa = dev[a];
                // upper triangle only; mirrored below
                for b in a..d {
                    out[a * d + b] += xa * dev[b];
                }
            }
        }
    }
    for k in 0..dict.k {
        if counts[k] == 0 {
            continue;
        }
        let out = &mut values[k * block..(k + 1) * block];
        let jk = counts[k] as f64;
        if diagonal {
            out.iter_mut().for_each(|v| *v /= jk);
        } else {
            for a in 0..d {
                for b in a..d {
                    let v = out[a * d + b] / jk;
                    out[a * d + b] = v;
                    out[b * d + a] = v;
                }
            }
        }
    }
    Ok(Fingerprint {
        image_id: fs.image_id.clone(),
        recipe: Recipe::single(&fs.kind, Moment::H2 { vlad, diagonal }, dict.k, dict.k * block),
        values,
    })
}

/// Build the fingerprint for `moment` (a moment of order 0, 1 or 2).
pub fn moment_fingerprint(fs: &FeatureSet, dict: &Dictionary, moment: Moment) -> Result<Fingerprint> {
    match moment {
        Moment::H0 => h0(fs, dict),
        Moment::H1 { vlad } => h1(fs, dict, vlad),
        Moment::H2 { vlad, diagonal } => h2(fs, dict, vlad, diagonal),
        other => Err(Error::invalid(format!("{other} is not a clustered moment"))),
    }
}

fn concat(fps: &[Fingerprint]) -> Result<Fingerprint> {
    let first = fps
        .first()
        .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    let mut values = Vec::with_capacity(fps.iter().map(|f| f.len()).sum());
    let mut parts = Vec::new();
    let mut reductions = Vec::new();
    for f in fps {
        if f.image_id != first.image_id {
            return Err(Error::invalid(format!(
                "cannot concatenate fingerprints of {} and {}",
                first.image_id, f.image_id
            )));
        }
        if f.recipe.descriptor != first.recipe.descriptor {
            return Err(Error::invalid("cannot concatenate fingerprints of different descriptors"));
        }
        values.extend_from_slice(&f.values);
        parts.extend(f.recipe.parts.iter().cloned());
        for r in &f.recipe.reductions {
            if !reductions.contains(r) {
                reductions.push(r.clone());
            }
        }
    }
    Ok(Fingerprint {
        image_id: first.image_id.clone(),
        values,
        recipe: Recipe {
            descriptor: first.recipe.descriptor.clone(),
            parts,
            reductions,
        },
    })
}

/// Multi-scale fingerprint: same-order fingerprints with distinct cluster
/// counts, concatenated in the given order.
pub fn multiscale(fps: &[Fingerprint]) -> Result<Fingerprint> {
    let first = fps
        .first()
        .ok_or_else(|| Error::invalid("multiscale needs at least one fingerprint"))?;
    let moment = first
        .recipe
        .parts
        .first()
        .map(|p| p.moment)
        .ok_or_else(|| Error::invalid("fingerprint has an empty recipe"))?;
    let mut ks = Vec::new();
    for f in fps {
        for p in &f.recipe.parts {
            if p.moment != moment {
                return Err(Error::invalid(format!(
                    "multiscale parts must share one moment, found {moment} and {}",
                    p.moment
                )));
            }
            if ks.contains(&p.k) {
                return Err(Error::invalid(format!("cluster count {} appears twice", p.k)));
            }
            ks.push(p.k);
        }
    }
    concat(fps)
}

/// The combined fingerprint `[H₀, H₁]` of one image.
pub fn combine(h0: &Fingerprint, h1: &Fingerprint) -> Result<Fingerprint> {
    let ok = h0.recipe.parts.iter().all(|p| p.moment == Moment::H0)
        && h1.recipe.parts.iter().all(|p| p.moment.order() == Some(1));
    if !ok {
        return Err(Error::invalid("combine expects an H0 and an H1 fingerprint"));
    }
    concat(&[h0.clone(), h1.clone()])
}

fn cnn_recipe(moment: Moment, len: usize, source: &str) -> Recipe {
    Recipe::single(&DescriptorKind::Cnn(source.to_string()), moment, 0, len)
}

/// Row-major flatten of a `(d1, d2, d)` tensor (channel fastest).
pub fn cnn_flatten(image_id: &str, source: &str, t: &Tensor3) -> Fingerprint {
    Fingerprint {
        image_id: image_id.to_string(),
        values: t.data.iter().map(|&v| v as f64).collect(),
        recipe: cnn_recipe(Moment::CnnFlatten, t.data.len(), source),
    }
}

/// Channel-wise maximum over the spatial grid.
pub fn cnn_maxpool(image_id: &str, source: &str, t: &Tensor3) -> Fingerprint {
    let mut out = vec![f64::NEG_INFINITY; t.d];
    for cell in t.data.chunks_exact(t.d) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o = o.max(v as f64);
        }
    }
    Fingerprint {
        image_id: image_id.to_string(),
        values: out,
        recipe: cnn_recipe(Moment::CnnMaxPool, t.d, source),
    }
}

/// Each spatial position becomes a `d`-dimensional feature, positions in
/// row-major order.
pub fn cnn_as_features(image_id: &str, source: &str, t: &Tensor3) -> Result<FeatureSet> {
    FeatureSet::new(
        image_id,
        DescriptorKind::Cnn(source.to_string()),
        FeatureMatrix::new(t.d1 * t.d2, t.d, t.data.clone())?,
    )
}

/// `N × n` matrix of fingerprints sharing one recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintStack {
    pub ids: Vec<String>,
    pub n: usize,
    /// Row-major `N × n`.
    pub values: Vec<f64>,
    pub recipe: Recipe,
}

impl FingerprintStack {
    pub fn from_fingerprints(fps: Vec<Fingerprint>) -> Result<Self> {
        let first = fps
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero fingerprints"))?;
        let recipe = first.recipe.clone();
        let n = first.len();
        if n == 0 {
            return Err(Error::invalid("fingerprints must be non-empty"));
        }
        let mut values = Vec::with_capacity(n * fps.len());
        let mut ids = Vec::with_capacity(fps.len());
        for f in fps {
            if f.recipe != recipe {
                return Err(Error::invalid(format!(
                    "{}: recipe {} differs from {}",
                    f.image_id, f.recipe, recipe
                )));
            }
            if f.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("{}: non-finite fingerprint", f.image_id)));
            }
            values.extend_from_slice(&f.values);
            ids.push(f.image_id);
        }
        Ok(Self { ids, n, values, recipe })
    }

    /// Stack raw rows with a given recipe (used for synthetic and reduced data).
    pub fn from_rows(ids: Vec<String>, n: usize, values: Vec<f64>, recipe: Recipe) -> Result<Self> {
        if n == 0 || values.len() != ids.len() * n {
            return Err(Error::invalid(format!(
                "{} values do not form {} rows of length {n}",
                values.len(),
                ids.len()
            )));
        }
        Ok(Self { ids, n, values, recipe })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.n);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            n: self.n,
            values,
            recipe: self.recipe.clone(),
        }
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows(), self.n, &self.values)
    }
}
