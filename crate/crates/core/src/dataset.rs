//! Micrographs, CSV manifests and stratified fold plans.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

/// BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// A single-channel image with intensities in `[0, 1]`, stored row-major
/// (`height` rows of `width` pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct Micrograph {
    pub id: String,
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    pub label: Option<usize>,
}

impl Micrograph {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image is {width}x{height}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
            label: None,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Load a PNG or PGM file as a grayscale micrograph. Colour images are
/// converted with BT.601 luma weights; values are scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Micrograph> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-area image".into(),
        });
    }
    let pixels = to_luma(&img);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Micrograph::new(id, w, h, pixels).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_luma(img: &DynamicImage) -> Vec<f32> {
    match img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        _ => img
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let v = LUMA[0] * p.0[0] + LUMA[1] * p.0[1] + LUMA[2] * p.0[2];
                v.clamp(0.0, 1.0)
            })
            .collect(),
    }
}

/// Save a micrograph as an 8-bit grayscale PNG.
pub fn save_png(img: &Micrograph, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    /// Image path, resolved against the manifest's directory.
    pub path: PathBuf,
    pub class_name: String,
    /// Index of `class_name` in [`Manifest::class_names`].
    pub label: usize,
}

impl ManifestEntry {
    /// Image identity: the file stem.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Distinct class names in lexicographic order.
    pub class_names: Vec<String>,
}

impl Manifest {
    /// Build from `(path, class name)` pairs; class indices follow the
    /// lexicographic order of the names.
    pub fn from_pairs(pairs: Vec<(PathBuf, String)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for (p, _) in &pairs {
            if !seen.insert(p.clone()) {
                return Err(Error::Manifest(format!("duplicate path {}", p.display())));
            }
        }
        let class_names: Vec<String> = pairs
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let entries = pairs
            .into_iter()
            .map(|(path, class_name)| {
                let label = class_names.binary_search(&class_name).expect("class collected above");
                ManifestEntry {
                    path,
                    class_name,
                    label,
                }
            })
            .collect();
        Ok(Self {
            entries,
            class_names,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id()).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write as a `path,label` CSV. Paths are written as stored.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        w.write_record(["path", "label"])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        for e in &self.entries {
            w.write_record([e.path.to_string_lossy().as_ref(), e.class_name.as_str()])
                .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read a `path,label` CSV manifest. Relative image paths are resolved
/// against the directory containing the manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Manifest(format!(
            "{}: expected header `path,label`, found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut pairs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Manifest(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::Manifest(format!(
                "{}: row {} is malformed",
                path.display(),
                i + 2
            )));
        }
        let p = PathBuf::from(&rec[0]);
        let p = if p.is_absolute() { p } else { base.join(p) };
        pairs.push((p, rec[1].to_string()));
    }
    Manifest::from_pairs(pairs).map_err(|e| match e {
        Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Assignment of every sample to one of `n_folds` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Stratified k-fold split. Members of each class are shuffled with a
/// seeded ChaCha stream and dealt round-robin, continuing the deal where the
/// previous class stopped so fold sizes also stay balanced.
pub fn stratified_folds(labels: &[usize], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::invalid("at least 2 folds are required"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::invalid("no samples to split"));
    }
    if let Some((c, m)) = by_class.iter().find(|(_, m)| m.len() < n_folds) {
        return Err(Error::invalid(format!(
            "class {c} has {} members, fewer than {n_folds} folds",
            m.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    Ok(FoldPlan {
        n_folds,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn class_indices_are_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "m.csv", "path,label\na.png,spheroidite\nb.png,pearlite\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.class_names, vec!["pearlite", "spheroidite"]);
        assert_eq!(m.entries[0].label, 1);
        assert_eq!(m.entries[1].label, 0);
        assert_eq!(m.entries[0].path, dir.path().join("a.png"));
    }

    #[test]
    fn six_hundred_rows_three_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("path,label\n");
        for (i, c) in ["network", "pearlite", "spheroidite"].iter().cycle().take(600).enumerate() {
            body.push_str(&format!("img{i}.png,{c}\n"));
        }
        let m = load_manifest(&write_tmp(dir.path(), "m.csv", &body)).unwrap();
        assert_eq!(m.n_classes(), 3);
        for c in 0..3 {
            assert_eq!(m.labels().iter().filter(|&&l| l == c).count(), 200);
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(&dir.path().join("missing.csv")).is_err());
        let empty = write_tmp(dir.path(), "e.csv", "");
        assert!(load_manifest(&empty).is_err());
        let header_only = write_tmp(dir.path(), "h.csv", "path,label\n");
        assert!(load_manifest(&header_only).is_err());
        let bad = write_tmp(dir.path(), "b.csv", "path,label\na.png\n");
        assert!(load_manifest(&bad).is_err());
        let dup = write_tmp(dir.path(), "d.csv", "path,label\na.png,x\na.png,y\n");
        assert!(load_manifest(&dup).is_err());
        let wrong = write_tmp(dir.path(), "w.csv", "file,class\na.png,x\n");
        assert!(load_manifest(&wrong).is_err());
    }

    #[test]
    fn pgm_all_white_and_midgray() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = b"P5\n16 16\n255\n".to_vec();
        body.extend(std::iter::repeat(255u8).take(255));
        body.push(128);
        let p = dir.path().join("w.pgm");
        std::fs::write(&p, &body).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
        assert!(img.pixels()[..255].iter().all(|&v| v == 1.0));
        assert!((img.pixels()[255] - 128.0 / 255.0).abs() < 1e-6);
        assert!((img.pixels()[255] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn rgb_png_uses_bt601_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.png");
        let mut buf = image::RgbImage::new(16, 16);
        for px in buf.pixels_mut() {
            *px = image::Rgb([255, 0, 0]);
        }
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.pixels().iter().all(|&v| (v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn unreadable_and_tiny_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "junk.png", "not an image");
        assert!(load_image(&p).is_err());
        let tiny = dir.path().join("tiny.png");
        image::GrayImage::new(8, 8).save(&tiny).unwrap();
        assert!(load_image(&tiny).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f32> = (0..256).map(|i| i as f32 / 255.0).collect();
        let img = Micrograph::new("g", 16, 16, px.clone()).unwrap();
        let p = dir.path().join("g.png");
        save_png(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in px.iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn per_fold_class_counts(labels: &[usize], plan: &FoldPlan, n_classes: usize) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; n_classes]; plan.n_folds];
        for (i, &f) in plan.assignments.iter().enumerate() {
            counts[f][labels[i]] += 1;
        }
        counts
    }

    #[test]
    fn uhcs_sized_split_is_even() {
        let labels: Vec<usize> = (0..600).map(|i| i % 3).collect();
        let plan = stratified_folds(&labels, 10, 7).unwrap();
        for fold in per_fold_class_counts(&labels, &plan, 3) {
            assert_eq!(fold, vec![20, 20, 20]);
        }
    }

    #[test]
    fn one_image_per_fold() {
        let labels = vec![0; 10];
        let plan = stratified_folds(&labels, 10, 1).unwrap();
        let mut seen = plan.assignments.clone();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_members_rejected() {
        assert!(stratified_folds(&[0; 5], 10, 0).is_err());
        assert!(stratified_folds(&[0; 5], 1, 0).is_err());
    }

    #[test]
    fn folds_are_deterministic_and_partition() {
        let labels: Vec<usize> = (0..97).map(|i| (i * 7) % 4).collect();
        let a = stratified_folds(&labels, 5, 42).unwrap();
        let b = stratified_folds(&labels, 5, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = (0..5).flat_map(|f| a.test_indices(f)).collect();
        all.sort();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
        for c in 0..4 {
            let per: Vec<usize> = per_fold_class_counts(&labels, &a, 4).iter().map(|f| f[c]).collect();
            assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }
}
