//! Procedural two-texture micrograph dataset: lamellar stripes and
//! equiaxed blobs, with randomised orientation, spacing, size and noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{save_png, Manifest, Micrograph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Stripes,
    Blobs,
}

impl Texture {
    pub fn class_name(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            per_class: 20,
            side: 128,
            seed: 0,
            noise: 0.05,
        }
    }
}

/// Pearlite-like lamellae: a few colonies (nearest-seed regions), each with
/// its own lamella orientation and phase around a shared spacing.
fn stripes(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base_period = rng.random_range(7.0..13.0);
    let n_colonies = rng.random_range(3..7);
    let colonies: Vec<[f64; 6]> = (0..n_colonies)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            [
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
                theta.sin(),
                theta.cos(),
                base_period * rng.random_range(0.85..1.15),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let c = colonies
                .iter()
                .min_by(|a, b| {
                    let da = (a[0] - xf).powi(2) + (a[1] - yf).powi(2);
                    let db = (b[0] - xf).powi(2) + (b[1] - yf).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one colony");
            let across = xf * c[3] + yf * c[2];
            let v = (std::f64::consts::TAU * across / c[4] + c[5]).sin();
            // sharpen towards two-phase lamellae
            out[y * side + x] = 0.5 + 0.4 * (2.5 * v).tanh();
        }
    }
    out
}

fn blobs(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = rng.random_range(3.0..6.0);
    let spacing = radius * rng.random_range(2.6..3.4);
    let mut out = vec![0.1f64; side * side];
    let cells = (side as f64 / spacing).ceil() as usize + 1;
    let jitter = spacing * 0.3;
    for gy in 0..cells {
        for gx in 0..cells {
            let cx = gx as f64 * spacing + rng.random_range(-jitter..jitter);
            let cy = gy as f64 * spacing + rng.random_range(-jitter..jitter);
            let r = radius * rng.random_range(0.8..1.2);
            let (x0, x1) = ((cx - 2.0 * r).floor().max(0.0) as usize, ((cx + 2.0 * r).ceil() as usize).min(side));
            let (y0, y1) = ((cy - 2.0 * r).floor().max(0.0) as usize, ((cy + 2.0 * r).ceil() as usize).min(side));
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    // smooth disc edge over about one pixel
                    let v = 0.8 / (1.0 + ((d - r) * 2.0).exp());
                    let p = &mut out[y * side + x];
                    *p = (*p).max(0.1 + v);
                }
            }
        }
    }
    out
}

/// One synthetic micrograph.
pub fn synth_image(id: &str, texture: Texture, side: usize, noise: f64, seed: u64) -> Result<Micrograph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match texture {
        Texture::Stripes => stripes(side, &mut rng),
        Texture::Blobs => blobs(side, &mut rng),
    };
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let px: Vec<f32> = base
        .into_iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Micrograph::new(id, side, side, px)
}

/// All images of the dataset, stripes first, with class labels
/// (`blobs` = 0, `stripes` = 1).
pub fn synth_dataset(params: &SynthParams) -> Result<Vec<Micrograph>> {
    let jobs: Vec<(String, Texture, u64)> = [Texture::Stripes, Texture::Blobs]
        .iter()
        .enumerate()
        .flat_map(|(t, &tex)| {
            (0..params.per_class).map(move |i| {
                let seed = params.seed.wrapping_mul(1_000_003).wrapping_add((t * params.per_class + i) as u64);
                (format!("{}_{i:03}", tex.class_name()), tex, seed)
            })
        })
        .collect();
    jobs.par_iter()
        .map(|(id, tex, seed)| {
            let label = usize::from(*tex == Texture::Stripes);
            Ok(synth_image(id, *tex, params.side, params.noise, *seed)?.with_label(label))
        })
        .collect()
}

/// Write the dataset as PNG files plus `manifest.csv` into `dir`.
pub fn write_synth_dataset(dir: &Path, params: &SynthParams) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = synth_dataset(params)?;
    let pairs = images
        .par_iter()
        .map(|img| {
            let path = dir.join(format!("{}.png", img.id));
            save_png(img, &path)?;
            let class = if img.label == Some(1) { "stripes" } else { "blobs" };
            Ok((PathBuf::from(format!("{}.png", img.id)), class.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::from_pairs(pairs)?;
    manifest.write_csv(&dir.join("manifest.csv"))?;
    for e in &mut manifest.entries {
        e.path = dir.join(&e.path);
    }
    Ok(manifest)
}
