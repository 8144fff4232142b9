//! Fast-Hessian keypoints with 64-d Haar-wavelet descriptors.
//!
//! Box-filter approximations of the Gaussian second derivatives are
//! evaluated on an integral image. Octave `o` uses filter sizes
//! `3·(2^(o+1)·(i+1) + 1)` for `i = 0..4`, i.e. 9, 15, 21, 27 for the first.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Keypoint, MIN_DETECT_SIDE};
use crate::dataset::Micrograph;
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};

pub const SURF_DIM: usize = 64;

const LAYERS: usize = 4;
const ORI_WINDOW: f32 = PI / 3.0;
const ORI_STEP: f32 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfParams {
    pub n_octaves: usize,
    /// Sampling step of the first octave, doubled for each further octave.
    pub init_sample: usize,
    /// Minimum determinant-of-Hessian response.
    pub threshold: f32,
    pub ignore_orientation: bool,
    /// Describe every keypoint at the smallest detector scale.
    pub ignore_scale: bool,
}

impl Default for SurfParams {
    fn default() -> Self {
        Self {
            n_octaves: 1,
            init_sample: 2,
            threshold: 0.0004,
            ignore_orientation: false,
            ignore_scale: false,
        }
    }
}

/// Summed-area table; `at(x, y)` is the sum over `[0, x] × [0, y]`.
#[derive(Debug, Clone)]
pub struct IntegralImage {
    w: usize,
    h: usize,
    /// `(w + 1) × (h + 1)` with a zero first row and column.
    table: Vec<f64>,
}

impl IntegralImage {
    pub fn new(w: usize, h: usize, pixels: &[f32]) -> Self {
        assert_eq!(pixels.len(), w * h);
        let stride = w + 1;
        let mut table = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0.0;
            for x in 0..w {
                row_sum += pixels[y * w + x] as f64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        Self { w, h, table }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.table[(y + 1) * (self.w + 1) + x + 1]
    }

    /// Sum over rows `[row, row + rows)` and columns `[col, col + cols)`,
    /// clipped to the image.
    pub fn box_sum(&self, row: isize, col: isize, rows: isize, cols: isize) -> f64 {
        let r0 = row.clamp(0, self.h as isize) as usize;
        let c0 = col.clamp(0, self.w as isize) as usize;
        let r1 = (row + rows).clamp(0, self.h as isize) as usize;
        let c1 = (col + cols).clamp(0, self.w as isize) as usize;
        if r1 <= r0 || c1 <= c0 {
            return 0.0;
        }
        let s = self.w + 1;
        self.table[r1 * s + c1] - self.table[r0 * s + c1] - self.table[r1 * s + c0] + self.table[r0 * s + c0]
    }

    fn haar_x(&self, row: isize, col: isize, size: isize) -> f64 {
        let h = size / 2;
        self.box_sum(row - h, col, size, h) - self.box_sum(row - h, col - h, size, h)
    }

    fn haar_y(&self, row: isize, col: isize, size: isize) -> f64 {
        let h = size / 2;
        self.box_sum(row, col - h, h, size) - self.box_sum(row - h, col - h, h, size)
    }
}

struct ResponseLayer {
    filter: usize,
    step: usize,
    w: usize,
    h: usize,
    det: Vec<f32>,
}

impl ResponseLayer {
    fn build(ii: &IntegralImage, filter: usize, step: usize) -> Self {
        let w = ii.w / step;
        let h = ii.h / step;
        let l = (filter / 3) as isize;
        let b = ((filter - 1) / 2) as isize;
        let fw = filter as isize;
        let inv_area = 1.0 / (filter * filter) as f64;
        let mut det = vec![0.0f32; w * h];
        for ar in 0..h {
            for ac in 0..w {
                let r = (ar * step) as isize;
                let c = (ac * step) as isize;
                let dxx = ii.box_sum(r - l + 1, c - b, 2 * l - 1, fw) - 3.0 * ii.box_sum(r - l + 1, c - l / 2, 2 * l - 1, l);
                let dyy = ii.box_sum(r - b, c - l + 1, fw, 2 * l - 1) - 3.0 * ii.box_sum(r - l / 2, c - l + 1, l, 2 * l - 1);
                let dxy = ii.box_sum(r - l, c + 1, l, l) + ii.box_sum(r + 1, c - l, l, l)
                    - ii.box_sum(r - l, c - l, l, l)
                    - ii.box_sum(r + 1, c + 1, l, l);
                let (dxx, dyy, dxy) = (dxx * inv_area, dyy * inv_area, dxy * inv_area);
                det[ar * w + ac] = (dxx * dyy - 0.81 * dxy * dxy) as f32;
            }
        }
        Self {
            filter,
            step,
            w,
            h,
            det,
        }
    }

    #[inline]
    fn at(&self, r: isize, c: isize) -> f32 {
        self.det[r as usize * self.w + c as usize]
    }
}

/// Detect keypoints and compute their descriptors.
pub fn detect_surf(img: &Micrograph, params: &SurfParams) -> Result<(Vec<Keypoint>, FeatureSet)> {
    if img.width() < MIN_DETECT_SIDE || img.height() < MIN_DETECT_SIDE {
        return Err(Error::invalid(format!(
            "SURF needs an image of at least {MIN_DETECT_SIDE}x{MIN_DETECT_SIDE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if params.n_octaves == 0 || params.init_sample == 0 {
        return Err(Error::invalid("SURF parameters must be positive"));
    }
    let ii = IntegralImage::new(img.width(), img.height(), img.pixels());
    let mut found = Vec::new();
    for o in 0..params.n_octaves {
        let step = params.init_sample << o;
        if img.width() / step < 3 || img.height() / step < 3 {
            break;
        }
        let layers: Vec<ResponseLayer> = (0..LAYERS)
            .map(|i| ResponseLayer::build(&ii, 3 * ((1 << (o + 1)) * (i + 1) + 1), step))
            .collect();
        let filter_step = (6usize << o) as f32;
        for m in 1..LAYERS - 1 {
            extrema(&layers[m - 1], &layers[m], &layers[m + 1], filter_step, o, params.threshold, &mut found);
        }
    }
    let mut keypoints = Vec::with_capacity(found.len());
    let mut rows = Vec::with_capacity(found.len() * SURF_DIM);
    for mut kp in found {
        if params.ignore_scale {
            kp.scale = 1.2;
        }
        kp.orientation = if params.ignore_orientation {
            0.0
        } else {
            orientation(&ii, &kp)
        };
        if let Some(desc) = descriptor(&ii, &kp) {
            rows.extend_from_slice(&desc);
            keypoints.push(kp);
        }
    }
    let fs = FeatureSet::new(
        img.id.clone(),
        DescriptorKind::Surf,
        FeatureMatrix::new(keypoints.len(), SURF_DIM, rows)?,
    )?;
    Ok((keypoints, fs))
}

fn extrema(
    b: &ResponseLayer,
    m: &ResponseLayer,
    t: &ResponseLayer,
    filter_step: f32,
    octave: usize,
    threshold: f32,
    out: &mut Vec<Keypoint>,
) {
    let border = ((t.filter + 1) / (2 * t.step)) as isize;
    for r in 0..t.h as isize {
        for c in 0..t.w as isize {
            if r <= border || r >= t.h as isize - border || c <= border || c >= t.w as isize - border {
                continue;
            }
            let v = m.at(r, c);
            if v < threshold {
                continue;
            }
            let is_max = (-1..=1).all(|dr| {
                (-1..=1).all(|dc| {
                    t.at(r + dr, c + dc) < v
                        && b.at(r + dr, c + dc) < v
                        && ((dr == 0 && dc == 0) || m.at(r + dr, c + dc) < v)
                })
            });
            if !is_max {
                continue;
            }
            let d = |l: &ResponseLayer, dr: isize, dc: isize| l.at(r + dr, c + dc) as f64;
            let dx = 0.5 * (d(m, 0, 1) - d(m, 0, -1));
            let dy = 0.5 * (d(m, 1, 0) - d(m, -1, 0));
            let ds = 0.5 * (d(t, 0, 0) - d(b, 0, 0));
            let vv = v as f64;
            let dxx = d(m, 0, 1) + d(m, 0, -1) - 2.0 * vv;
            let dyy = d(m, 1, 0) + d(m, -1, 0) - 2.0 * vv;
            let dss = d(t, 0, 0) + d(b, 0, 0) - 2.0 * vv;
            let dxy = 0.25 * (d(m, 1, 1) - d(m, 1, -1) - d(m, -1, 1) + d(m, -1, -1));
            let dxs = 0.25 * (d(t, 0, 1) - d(t, 0, -1) - d(b, 0, 1) + d(b, 0, -1));
            let dys = 0.25 * (d(t, 1, 0) - d(t, -1, 0) - d(b, 1, 0) + d(b, -1, 0));
            let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
            let Some(inv) = hess.try_inverse() else {
                continue;
            };
            let off = -(inv * nalgebra::Vector3::new(dx, dy, ds));
            if off.iter().any(|o| o.abs() >= 0.5) {
                continue;
            }
            let step = m.step as f32;
            out.push(Keypoint {
                x: (c as f32 + off[0] as f32) * step,
                y: (r as f32 + off[1] as f32) * step,
                scale: 1.2 / 9.0 * (m.filter as f32 + off[2] as f32 * filter_step),
                orientation: 0.0,
                octave,
            });
        }
    }
}

fn orientation(ii: &IntegralImage, kp: &Keypoint) -> f32 {
    let s = kp.scale.round().max(1.0) as isize;
    let (r0, c0) = (kp.y.round() as isize, kp.x.round() as isize);
    let sig = 2.5f32;
    let mut responses = Vec::with_capacity(113);
    for i in -6isize..=6 {
        for j in -6isize..=6 {
            if i * i + j * j >= 36 {
                continue;
            }
            let g = (-((i * i + j * j) as f32) / (2.0 * sig * sig)).exp();
            let hx = g * ii.haar_x(r0 + j * s, c0 + i * s, 4 * s) as f32;
            let hy = g * ii.haar_y(r0 + j * s, c0 + i * s, 4 * s) as f32;
            if hx != 0.0 || hy != 0.0 {
                responses.push((hy.atan2(hx).rem_euclid(2.0 * PI), hx, hy));
            }
        }
    }
    let mut best = (0.0f32, 0.0f32);
    let mut best_mag = 0.0f32;
    let mut a = 0.0f32;
    while a < 2.0 * PI {
        let (mut sx, mut sy) = (0.0f32, 0.0f32);
        for &(ang, hx, hy) in &responses {
            let rel = (ang - a).rem_euclid(2.0 * PI);
            if rel < ORI_WINDOW {
                sx += hx;
                sy += hy;
            }
        }
        let mag = sx * sx + sy * sy;
        if mag > best_mag {
            best_mag = mag;
            best = (sx, sy);
        }
        a += ORI_STEP;
    }
    if best_mag == 0.0 {
        0.0
    } else {
        best.1.atan2(best.0).rem_euclid(2.0 * PI)
    }
}

/// 20s × 20s window, 4×4 subregions of 5×5 samples; each subregion gives
/// `[Σdx, Σ|dx|, Σdy, Σ|dy|]` in the keypoint frame.
fn descriptor(ii: &IntegralImage, kp: &Keypoint) -> Option<[f32; SURF_DIM]> {
    let s = kp.scale;
    let haar = (2.0 * s).round().max(2.0) as isize;
    let (sin, cos) = kp.orientation.sin_cos();
    let sig = 3.3 * s;
    let mut desc = [0.0f32; SURF_DIM];
    for i in 0..20 {
        for j in 0..20 {
            let u = (j as f32 - 9.5) * s;
            let v = (i as f32 - 9.5) * s;
            let x = kp.x + cos * u - sin * v;
            let y = kp.y + sin * u + cos * v;
            let g = (-(u * u + v * v) / (2.0 * sig * sig)).exp();
            let (row, col) = (y.round() as isize, x.round() as isize);
            let hx = ii.haar_x(row, col, haar) as f32;
            let hy = ii.haar_y(row, col, haar) as f32;
            let dx = g * (cos * hx + sin * hy);
            let dy = g * (-sin * hx + cos * hy);
            let base = ((i / 5) * 4 + j / 5) * 4;
            desc[base] += dx;
            desc[base + 1] += dx.abs();
            desc[base + 2] += dy;
            desc[base + 3] += dy.abs();
        }
    }
    let norm = desc.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
    if norm <= f32::EPSILON {
        return None;
    }
    for v in desc.iter_mut() {
        *v /= norm;
    }
    Some(desc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integral_of_ones() {
        let ii = IntegralImage::new(4, 4, &[1.0; 16]);
        assert_eq!(ii.at(3, 3), 16.0);
        assert_eq!(ii.at(0, 0), 1.0);
        assert_eq!(ii.at(1, 2), 6.0);
        assert_eq!(ii.box_sum(1, 1, 2, 2), 4.0);
        assert_eq!(ii.box_sum(-5, -5, 100, 100), 16.0);
    }

    #[test]
    fn box_sum_matches_direct_sum() {
        let (w, h) = (9, 7);
        let px: Vec<f32> = (0..w * h).map(|i| ((i * 13) % 11) as f32).collect();
        let ii = IntegralImage::new(w, h, &px);
        for (r, c, nr, nc) in [(0, 0, 3, 4), (2, 3, 4, 5), (6, 8, 1, 1), (1, 0, 6, 9)] {
            let mut direct = 0.0;
            for y in r..r + nr {
                for x in c..c + nc {
                    direct += px[y * w + x] as f64;
                }
            }
            assert_eq!(ii.box_sum(r as isize, c as isize, nr as isize, nc as isize), direct);
        }
    }

    #[test]
    fn filter_sizes_per_octave() {
        let sizes = |o: usize| -> Vec<usize> { (0..LAYERS).map(|i| 3 * ((1 << (o + 1)) * (i + 1) + 1)).collect() };
        assert_eq!(sizes(0), vec![9, 15, 21, 27]);
        assert_eq!(sizes(1), vec![15, 27, 39, 51]);
    }

    #[test]
    fn haar_responds_to_a_vertical_edge() {
        let (w, h) = (20, 20);
        let px: Vec<f32> = (0..w * h).map(|i| if i % w >= 10 { 1.0 } else { 0.0 }).collect();
        let ii = IntegralImage::new(w, h, &px);
        assert!(ii.haar_x(10, 10, 4) > 0.0);
        assert_eq!(ii.haar_y(10, 10, 4), 0.0);
    }
}
