//! Difference-of-Gaussians keypoints with 128-d gradient-orientation
//! descriptors.
//!
//! The scale space follows the classic layout: `scales_per_octave + 3`
//! Gaussian images per octave, extrema searched over the inner DoG layers,
//! quadratic sub-pixel refinement, contrast and edge-response rejection.
//! Descriptors are 4×4 cells of 8-bin orientation histograms over a 16×16
//! sample grid whose spacing grows with the keypoint scale.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use super::plane::Plane;
use super::{micrograph_plane, Keypoint};
use crate::dataset::Micrograph;
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};

pub const SIFT_DIM: usize = 128;

const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const DESC_GRID: usize = 16;
const DESC_CELLS: usize = 4;
const DESC_BINS: usize = 8;
const DESC_CLAMP: f32 = 0.2;
const MAX_REFINE_STEPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftParams {
    pub n_octaves: usize,
    pub scales_per_octave: usize,
    /// Blur of the first Gaussian layer of each octave.
    pub sigma: f32,
    /// Compared against `|D(x̂)| · scales_per_octave`.
    pub contrast_threshold: f32,
    /// Maximum principal-curvature ratio.
    pub edge_threshold: f32,
    /// Upsample the input by two before building the pyramid.
    pub double_image: bool,
    /// Skip orientation assignment; every descriptor uses angle 0.
    pub ignore_orientation: bool,
    /// Sample every descriptor at the base-scale footprint.
    pub ignore_scale: bool,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            n_octaves: 4,
            scales_per_octave: 3,
            sigma: 1.6,
            contrast_threshold: 0.04,
            edge_threshold: 10.0,
            double_image: true,
            ignore_orientation: false,
            ignore_scale: false,
        }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
    /// Size of one octave pixel in input-image pixels.
    pixel: f32,
}

/// Detect keypoints and compute their descriptors.
pub fn detect_sift(img: &Micrograph, params: &SiftParams) -> Result<(Vec<Keypoint>, FeatureSet)> {
    let min_side = 2 * DESC_GRID;
    if img.width() < min_side || img.height() < min_side {
        return Err(Error::invalid(format!(
            "SIFT needs an image of at least {min_side}x{min_side}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if params.scales_per_octave == 0 || params.n_octaves == 0 || params.sigma <= 0.0 {
        return Err(Error::invalid("SIFT parameters must be positive"));
    }
    let pyramid = build_pyramid(&micrograph_plane(img), params);
    let mut keypoints = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for (o, oct) in pyramid.iter().enumerate() {
        for cand in find_extrema(oct, params) {
            let layer = cand.layer_index(params.scales_per_octave);
            let g = &oct.gauss[layer];
            let step = if params.ignore_scale {
                1.0 / oct.pixel
            } else {
                cand.sigma / params.sigma
            };
            let half = DESC_GRID as f32 / 2.0 * step;
            if cand.x < half || cand.y < half || cand.x > (g.w - 1) as f32 - half || cand.y > (g.h - 1) as f32 - half {
                continue;
            }
            let angles = if params.ignore_orientation {
                vec![0.0]
            } else {
                orientations(g, cand.x, cand.y, cand.sigma)
            };
            for angle in angles {
                let Some(desc) = descriptor(g, cand.x, cand.y, step, angle) else {
                    continue;
                };
                keypoints.push(Keypoint {
                    x: cand.x * oct.pixel,
                    y: cand.y * oct.pixel,
                    scale: cand.sigma * oct.pixel,
                    orientation: angle,
                    octave: o,
                });
                rows.extend_from_slice(&desc);
            }
        }
    }
    let n = keypoints.len();
    let fs = FeatureSet::new(
        img.id.clone(),
        DescriptorKind::Sift,
        FeatureMatrix::new(n, SIFT_DIM, rows)?,
    )?;
    Ok((keypoints, fs))
}

fn build_pyramid(input: &Plane, params: &SiftParams) -> Vec<Octave> {
    let s = params.scales_per_octave;
    let (mut base, mut pixel, in_blur) = if params.double_image {
        (input.upsample(), 0.5f32, 1.0f32)
    } else {
        (input.clone(), 1.0f32, 0.5f32)
    };
    let extra = (params.sigma.powi(2) - in_blur.powi(2)).max(0.01).sqrt();
    base = base.gaussian_blur(extra);
    let k = 2f32.powf(1.0 / s as f32);
    let mut octaves = Vec::with_capacity(params.n_octaves);
    for _ in 0..params.n_octaves {
        if base.w < DESC_GRID || base.h < DESC_GRID {
            break;
        }
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(base.clone());
        let mut prev_sigma = params.sigma;
        for i in 1..s + 3 {
            let sig = params.sigma * k.powi(i as i32);
            let inc = (sig * sig - prev_sigma * prev_sigma).sqrt();
            let next = gauss[i - 1].gaussian_blur(inc);
            gauss.push(next);
            prev_sigma = sig;
        }
        let dog = gauss.windows(2).map(|w| w[1].sub(&w[0])).collect();
        let next_base = gauss[s].downsample();
        octaves.push(Octave { gauss, dog, pixel });
        base = next_base;
        pixel *= 2.0;
    }
    octaves
}

/// A refined extremum in octave coordinates.
struct Candidate {
    x: f32,
    y: f32,
    /// Continuous layer position, `1 ≤ layer ≤ scales_per_octave`.
    layer: f32,
    /// Blur at the refined layer, in octave pixels.
    sigma: f32,
}

impl Candidate {
    fn layer_index(&self, s: usize) -> usize {
        (self.layer.round() as usize).clamp(1, s)
    }
}

fn find_extrema(oct: &Octave, params: &SiftParams) -> Vec<Candidate> {
    let s = params.scales_per_octave;
    let prefilter = 0.5 * params.contrast_threshold / s as f32;
    let (w, h) = (oct.dog[0].w, oct.dog[0].h);
    let border = 1;
    let mut out = Vec::new();
    for layer in 1..=s {
        let cur = &oct.dog[layer];
        for y in border..h - border {
            for x in border..w - border {
                let v = cur.at(x, y);
                if v.abs() <= prefilter || !is_extremum(&oct.dog, layer, x, y, v) {
                    continue;
                }
                if let Some(c) = refine(oct, params, layer, x, y) {
                    out.push(c);
                }
            }
        }
    }
    out
}

fn is_extremum(dog: &[Plane], layer: usize, x: usize, y: usize, v: f32) -> bool {
    let positive = v > 0.0;
    for plane in &dog[layer - 1..=layer + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = plane.at(xx, yy);
                if positive && n > v || !positive && n < v {
                    return false;
                }
            }
        }
    }
    true
}

fn refine(oct: &Octave, params: &SiftParams, layer: usize, x: usize, y: usize) -> Option<Candidate> {
    let s = params.scales_per_octave;
    let dog = &oct.dog;
    let (w, h) = (dog[0].w as isize, dog[0].h as isize);
    let (mut xi, mut yi, mut li) = (x as isize, y as isize, layer as isize);
    for _ in 0..MAX_REFINE_STEPS {
        let d = |l: isize, dx: isize, dy: isize| dog[l as usize].at((xi + dx) as usize, (yi + dy) as usize) as f64;
        let v = d(li, 0, 0);
        let gx = 0.5 * (d(li, 1, 0) - d(li, -1, 0));
        let gy = 0.5 * (d(li, 0, 1) - d(li, 0, -1));
        let gs = 0.5 * (d(li + 1, 0, 0) - d(li - 1, 0, 0));
        let dxx = d(li, 1, 0) + d(li, -1, 0) - 2.0 * v;
        let dyy = d(li, 0, 1) + d(li, 0, -1) - 2.0 * v;
        let dss = d(li + 1, 0, 0) + d(li - 1, 0, 0) - 2.0 * v;
        let dxy = 0.25 * (d(li, 1, 1) - d(li, -1, 1) - d(li, 1, -1) + d(li, -1, -1));
        let dxs = 0.25 * (d(li + 1, 1, 0) - d(li + 1, -1, 0) - d(li - 1, 1, 0) + d(li - 1, -1, 0));
        let dys = 0.25 * (d(li + 1, 0, 1) - d(li + 1, 0, -1) - d(li - 1, 0, 1) + d(li - 1, 0, -1));
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let grad = nalgebra::Vector3::new(gx, gy, gs);
        let offset = -(hess.try_inverse()? * grad);
        if offset.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * grad.dot(&offset);
            if (contrast.abs() as f32) * (s as f32) < params.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = params.edge_threshold as f64;
            if det <= 0.0 || tr * tr * r >= (r + 1.0).powi(2) * det {
                return None;
            }
            let layer = li as f32 + offset[2] as f32;
            return Some(Candidate {
                x: xi as f32 + offset[0] as f32,
                y: yi as f32 + offset[1] as f32,
                layer,
                sigma: params.sigma * 2f32.powf(layer / s as f32),
            });
        }
        xi += offset[0].round() as isize;
        yi += offset[1].round() as isize;
        li += offset[2].round() as isize;
        if li < 1 || li > s as isize || xi < 1 || yi < 1 || xi >= w - 1 || yi >= h - 1 {
            return None;
        }
    }
    None
}

#[inline]
fn gradient(g: &Plane, x: usize, y: usize) -> (f32, f32) {
    (
        0.5 * (g.at(x + 1, y) - g.at(x - 1, y)),
        0.5 * (g.at(x, y + 1) - g.at(x, y - 1)),
    )
}

/// Dominant gradient orientations around a keypoint: peaks of a smoothed
/// 36-bin histogram within 80% of the maximum.
fn orientations(g: &Plane, kx: f32, ky: f32, sigma: f32) -> Vec<f32> {
    let sig_w = ORI_SIGMA_FACTOR * sigma;
    let radius = (3.0 * sig_w).round() as isize;
    let (cx, cy) = (kx.round() as isize, ky.round() as isize);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (x, y) = (cx + dx, cy + dy);
            if x < 1 || y < 1 || x >= g.w as isize - 1 || y >= g.h as isize - 1 {
                continue;
            }
            let (rx, ry) = (x as f32 - kx, y as f32 - ky);
            let r2 = rx * rx + ry * ry;
            if r2 > (radius * radius) as f32 {
                continue;
            }
            let (gx, gy) = gradient(g, x as usize, y as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let weight = (-r2 / (2.0 * sig_w * sig_w)).exp();
            let bin = ((ang * ORI_BINS as f32 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    let smoothed: Vec<f32> = (0..ORI_BINS)
        .map(|i| {
            let at = |k: isize| hist[(i as isize + k).rem_euclid(ORI_BINS as isize) as usize];
            (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * (4.0 / 16.0) + at(0) * (6.0 / 16.0)
        })
        .collect();
    let max = smoothed.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let l = smoothed[(i + ORI_BINS - 1) % ORI_BINS];
        let r = smoothed[(i + 1) % ORI_BINS];
        let c = smoothed[i];
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let denom = l - 2.0 * c + r;
            let shift = if denom != 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
            let angle = ((i as f32 + shift) * 2.0 * PI / ORI_BINS as f32).rem_euclid(2.0 * PI);
            out.push(angle);
        }
    }
    out
}

/// 128-d descriptor on a rotated 16×16 sample grid with spacing `step`.
/// `None` if the window carries no gradient energy.
fn descriptor(g: &Plane, kx: f32, ky: f32, step: f32, angle: f32) -> Option<[f32; SIFT_DIM]> {
    let (sin, cos) = angle.sin_cos();
    let centre = (DESC_GRID as f32 - 1.0) / 2.0;
    let sig_w = DESC_GRID as f32 / 2.0;
    let cell = (DESC_GRID / DESC_CELLS) as f32;
    let mut hist = [0.0f32; SIFT_DIM];
    for i in 0..DESC_GRID {
        for j in 0..DESC_GRID {
            let u = (j as f32 - centre) * step;
            let v = (i as f32 - centre) * step;
            let x = kx + cos * u - sin * v;
            let y = ky + sin * u + cos * v;
            let gx = 0.5 * (g.bilinear(x + 1.0, y) - g.bilinear(x - 1.0, y));
            let gy = 0.5 * (g.bilinear(x, y + 1.0) - g.bilinear(x, y - 1.0));
            let gu = cos * gx + sin * gy;
            let gv = -sin * gx + cos * gy;
            let mag = (gu * gu + gv * gv).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ang = gv.atan2(gu).rem_euclid(2.0 * PI);
            let du = j as f32 - centre;
            let dv = i as f32 - centre;
            let weight = (-(du * du + dv * dv) / (2.0 * sig_w * sig_w)).exp() * mag;
            // trilinear split over (row cell, column cell, orientation bin)
            let fr = (i as f32 + 0.5) / cell - 0.5;
            let fc = (j as f32 + 0.5) / cell - 0.5;
            let fo = ang * DESC_BINS as f32 / (2.0 * PI);
            let (r0, c0, o0) = (fr.floor(), fc.floor(), fo.floor());
            let (dr, dc, dobin) = (fr - r0, fc - c0, fo - o0);
            for (ri, wr) in [(r0 as isize, 1.0 - dr), (r0 as isize + 1, dr)] {
                if ri < 0 || ri >= DESC_CELLS as isize {
                    continue;
                }
                for (ci, wc) in [(c0 as isize, 1.0 - dc), (c0 as isize + 1, dc)] {
                    if ci < 0 || ci >= DESC_CELLS as isize {
                        continue;
                    }
                    for (oi, wo) in [(o0 as usize % DESC_BINS, 1.0 - dobin), ((o0 as usize + 1) % DESC_BINS, dobin)] {
                        let idx = (ri as usize * DESC_CELLS + ci as usize) * DESC_BINS + oi;
                        hist[idx] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }
    normalize_clamped(&mut hist)?;
    Some(hist)
}

/// L2-normalise, clamp at 0.2, renormalise.
fn normalize_clamped(v: &mut [f32]) -> Option<()> {
    let norm = l2(v);
    if norm <= f32::EPSILON {
        return None;
    }
    for x in v.iter_mut() {
        *x = (*x / norm).min(DESC_CLAMP);
    }
    let norm = l2(v);
    for x in v.iter_mut() {
        *x /= norm;
    }
    Some(())
}

fn l2(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32
}
