//! Local base features: SIFT, SURF and dense patch grids.

mod plane;
pub mod sift;
pub mod surf;

use serde::{Deserialize, Serialize};

pub use sift::{detect_sift, SiftParams, SIFT_DIM};
pub use surf::{detect_surf, IntegralImage, SurfParams, SURF_DIM};

use crate::dataset::Micrograph;
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use plane::Plane;

/// Detectors refuse images smaller than twice the 16-pixel base footprint.
pub const MIN_DETECT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Sub-pixel position in input-image coordinates.
    pub x: f32,
    pub y: f32,
    /// Gaussian scale of detection, in input-image pixels.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
    pub octave: usize,
}

/// Square patches of side `patch_side` placed every `stride` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridSpec {
    pub patch_side: usize,
    pub stride: usize,
}

impl Default for PatchGridSpec {
    fn default() -> Self {
        Self {
            patch_side: 16,
            stride: 16,
        }
    }
}

/// One flattened raw-intensity patch per grid position, grid positions in
/// row-major order.
pub fn dense_patches(img: &Micrograph, spec: PatchGridSpec) -> Result<FeatureSet> {
    let features = patch_grid(img.width(), img.height(), img.pixels(), spec)?;
    FeatureSet::new(img.id.clone(), DescriptorKind::Patch, features)
}

fn patch_grid(w: usize, h: usize, pixels: &[f32], spec: PatchGridSpec) -> Result<FeatureMatrix> {
    let m = spec.patch_side;
    if m == 0 || m > w.min(h) {
        return Err(Error::invalid(format!(
            "patch side {m} does not fit a {w}x{h} image"
        )));
    }
    if spec.stride == 0 || spec.stride > w.min(h) {
        return Err(Error::invalid(format!(
            "stride {} is invalid for a {w}x{h} image",
            spec.stride
        )));
    }
    let ys: Vec<usize> = (0..=h - m).step_by(spec.stride).collect();
    let xs: Vec<usize> = (0..=w - m).step_by(spec.stride).collect();
    let mut data = Vec::with_capacity(ys.len() * xs.len() * m * m);
    for &y0 in &ys {
        for &x0 in &xs {
            for y in y0..y0 + m {
                data.extend_from_slice(&pixels[y * w + x0..y * w + x0 + m]);
            }
        }
    }
    FeatureMatrix::new(ys.len() * xs.len(), m * m, data)
}

/// Extraction method with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Extractor {
    Sift(SiftParams),
    Surf(SurfParams),
    Patch(PatchGridSpec),
}

impl Extractor {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            Extractor::Sift(_) => DescriptorKind::Sift,
            Extractor::Surf(_) => DescriptorKind::Surf,
            Extractor::Patch(_) => DescriptorKind::Patch,
        }
    }

    pub fn extract(&self, img: &Micrograph) -> Result<FeatureSet> {
        match self {
            Extractor::Sift(p) => detect_sift(img, p).map(|(_, fs)| fs),
            Extractor::Surf(p) => detect_surf(img, p).map(|(_, fs)| fs),
            Extractor::Patch(spec) => dense_patches(img, *spec),
        }
    }
}

/// Pixels shifted so the darkest one is zero. Detection depends on
/// intensity differences only, and smaller magnitudes keep f32 rounding in
/// the pyramid independent of a constant offset.
pub(crate) fn micrograph_plane(img: &Micrograph) -> Plane {
    let lo = img.pixels().iter().copied().fold(f32::INFINITY, f32::min);
    Plane::new(img.width(), img.height(), img.pixels().iter().map(|&v| v - lo).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Micrograph {
        let px = (0..w * h).map(|i| i as f32 / (w * h) as f32).collect();
        Micrograph::new("r", w, h, px).unwrap()
    }

    #[test]
    fn four_by_four_into_two_by_two() {
        let px: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let m = patch_grid(4, 4, &px, PatchGridSpec { patch_side: 2, stride: 2 }).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(m.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patch_grid(4, 4, &px, PatchGridSpec { patch_side: 2, stride: 5 }).is_err());
    }

    #[test]
    fn exact_partition_into_patches() {
        // 16x16 is the smallest micrograph; check the 2x2 block layout on its corner
        let img = ramp(16, 16);
        let fs = dense_patches(&img, PatchGridSpec { patch_side: 8, stride: 8 }).unwrap();
        assert_eq!((fs.len(), fs.dim()), (4, 64));
        assert_eq!(fs.features.row(1)[0], img.get(8, 0));
        assert_eq!(fs.features.row(2)[0], img.get(0, 8));
        assert_eq!(fs.features.row(3)[9], img.get(9, 9));
    }

    #[test]
    fn grid_counts() {
        let img = ramp(224, 224);
        let fs = dense_patches(&img, PatchGridSpec { patch_side: 16, stride: 16 }).unwrap();
        assert_eq!(fs.len(), 196);
        let fs = dense_patches(&img, PatchGridSpec { patch_side: 16, stride: 8 }).unwrap();
        assert_eq!(fs.len(), 27 * 27);
    }

    #[test]
    fn invalid_grids() {
        let img = ramp(16, 20);
        assert!(dense_patches(&img, PatchGridSpec { patch_side: 17, stride: 1 }).is_err());
        assert!(dense_patches(&img, PatchGridSpec { patch_side: 4, stride: 0 }).is_err());
        assert!(dense_patches(&img, PatchGridSpec { patch_side: 4, stride: 17 }).is_err());
        assert!(dense_patches(&img, PatchGridSpec { patch_side: 0, stride: 1 }).is_err());
    }
}
