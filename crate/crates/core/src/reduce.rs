//! Principal component analysis of fingerprint stacks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::FingerprintStack;

/// Thin SVD of a column-centred matrix, singular values in descending order.
pub(crate) struct CentredSvd {
    /// Column means subtracted before factorisation.
    pub mean: Vec<f64>,
    /// `rows × m` left singular vectors, `m = min(rows, cols)`.
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// `m × cols` right singular vectors (as rows).
    pub v_t: DMatrix<f64>,
}

/// Subtract the mean of every column (taken over the rows) and factorise.
pub(crate) fn centred_svd(x: &DMatrix<f64>) -> Result<CentredSvd> {
    let (rows, cols) = x.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("SVD of an empty matrix"));
    }
    let mean: Vec<f64> = (0..cols).map(|c| x.column(c).mean()).collect();
    let mut centred = x.clone();
    for (c, m) in mean.iter().enumerate() {
        centred.column_mut(c).add_scalar_mut(-m);
    }
    if centred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite input to SVD".into()));
    }
    let wide = rows < cols;
    let a = if wide { centred.transpose() } else { centred };
    let (qu, sv, v) = tall_svd(a)?;
    // for a wide input the roles of the two factors swap
    let (u, v_t) = if wide { (v, qu.transpose()) } else { (qu, v.transpose()) };
    let m = sv.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let u = DMatrix::from_fn(rows, m, |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(m, cols, |r, c| v_t[(order[r], c)]);
    let singular_values = order.iter().map(|&i| sv[i]).collect();
    Ok(CentredSvd {
        mean,
        u,
        singular_values,
        v_t,
    })
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U·diag(s)·Vᵀ` of an `m × k` matrix with `m ≥ k`, unsorted.
///
/// Householder QR reduces `A` to the `k × k` factor `R`, whose SVD is found by
/// one-sided Jacobi rotations. Columns of `U` for zero singular values are
/// left at zero.
fn tall_svd(a: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let k = a.ncols();
    let qr = a.qr();
    let q = qr.q();
    let mut w = qr.r();
    let mut v = DMatrix::<f64>::identity(k, k);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for r in p + 1..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    let (x, y) = (w[(i, p)], w[(i, r)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut w, &mut v] {
                    for i in 0..k {
                        let (x, y) = (m[(i, p)], m[(i, r)]);
                        m[(i, p)] = c * x - s * y;
                        m[(i, r)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical("Jacobi SVD did not converge".into()));
    }
    let mut sv = Vec::with_capacity(k);
    for j in 0..k {
        let n = w.column(j).norm();
        sv.push(n);
        if n > 0.0 {
            w.column_mut(j).unscale_mut(n);
        }
    }
    Ok((q * w, sv, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `r` orthonormal rows of length `n`, stored row-major.
    pub components: Vec<f64>,
    pub r: usize,
    pub n: usize,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.n..(i + 1) * self.n]
    }

    /// `(x − mean)·componentsᵀ`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.r)
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((c, v), m)| c * (v - m))
                    .sum()
            })
            .collect()
    }

    /// Map scores back to the original space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &zi) in z.iter().enumerate().take(self.r) {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += zi * c;
            }
        }
        out
    }
}

pub fn fit_pca(stack: &FingerprintStack, r: usize) -> Result<PcaModel> {
    let (rows, n) = (stack.rows(), stack.n);
    if r == 0 || r > rows.min(n) {
        return Err(Error::invalid(format!(
            "PCA rank {r} outside 1..={} for a {rows}x{n} stack",
            rows.min(n)
        )));
    }
    let svd = centred_svd(&stack.to_dmatrix())?;
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * rows.max(n) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut r_eff = r;
    if rank < r {
        log::warn!("stack has numerical rank {rank}; reducing PCA rank from {r}");
        r_eff = rank.max(1);
    }
    let mut components = Vec::with_capacity(r_eff * n);
    for i in 0..r_eff {
        let mut row: Vec<f64> = svd.v_t.row(i).iter().copied().collect();
        let pivot = row
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, v)| if v.abs() > best.1.abs() { (j, v) } else { best });
        if pivot.1 < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(row);
    }
    let denom = (rows.max(2) - 1) as f64;
    let explained_variance = svd.singular_values[..r_eff].iter().map(|s| s * s / denom).collect();
    Ok(PcaModel {
        mean: svd.mean,
        components,
        r: r_eff,
        n,
        explained_variance,
    })
}

pub fn transform(model: &PcaModel, stack: &FingerprintStack) -> Result<FingerprintStack> {
    if stack.n != model.n {
        return Err(Error::DimensionMismatch {
            expected: model.n,
            found: stack.n,
        });
    }
    let values: Vec<f64> = (0..stack.rows())
        .into_par_iter()
        .flat_map_iter(|i| model.project(stack.row(i)))
        .collect();
    let recipe = stack.recipe.clone().with_reduction(format!("pca:{}", model.r));
    FingerprintStack::from_rows(stack.ids.clone(), model.r, values, recipe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Recipe;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(rows: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> FingerprintStack {
        let values = (0..rows * n).map(|i| f(i / n, i % n)).collect();
        let recipe = Recipe {
            descriptor: "test".into(),
            parts: vec![],
            reductions: vec![],
        };
        FingerprintStack::from_rows((0..rows).map(|i| i.to_string()).collect(), n, values, recipe).unwrap()
    }

    fn random(rows: usize, n: usize, seed: u64) -> FingerprintStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..rows * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        stack(rows, n, |i, j| v[i * n + j])
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn line_in_plane() {
        let s = stack(10, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 + 1.0 });
        let m = fit_pca(&s, 1).unwrap();
        let total: f64 = {
            let full = fit_pca(&s, 2).unwrap();
            full.explained_variance.iter().sum()
        };
        assert!((m.explained_variance[0] - total).abs() < 1e-9 * total);
        let c = m.component(0);
        assert!(c[1] > 0.0 && (c[1] / c[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn orthonormal_sorted_components() {
        let s = random(20, 7, 1);
        let m = fit_pca(&s, 5).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = m.component(a).iter().zip(m.component(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.explained_variance.iter().all(|&v| v >= 0.0));
        for i in 0..5 {
            let c = m.component(i);
            let big = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn full_rank_reconstruction_wide() {
        // r = N on a wide stack; centred data has rank N-1
        let s = random(8, 100, 2);
        let m = fit_pca(&s, 8).unwrap();
        assert_eq!(m.r, 7);
        let z = transform(&m, &s).unwrap();
        for i in 0..8 {
            let back = m.reconstruct(z.row(i));
            let err = dist(&back, s.row(i));
            let norm = s.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err < 1e-8 * norm);
        }
        for i in 0..8 {
            for j in 0..8 {
                assert!((dist(z.row(i), z.row(j)) - dist(s.row(i), s.row(j))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_maps_to_zero_and_projection_is_stable() {
        let s = random(12, 5, 3);
        let m = fit_pca(&s, 3).unwrap();
        assert!(m.project(&m.mean).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(m.project(s.row(4)), m.project(s.row(4)));
    }

    #[test]
    fn reconstruction_error_non_increasing() {
        let s = random(15, 6, 4);
        let mut last = f64::INFINITY;
        for r in 1..=6 {
            let m = fit_pca(&s, r).unwrap();
            let z = transform(&m, &s).unwrap();
            let err: f64 = (0..15).map(|i| dist(&m.reconstruct(z.row(i)), s.row(i)).powi(2)).sum();
            assert!(err <= last + 1e-9);
            last = err;
        }
    }

    #[test]
    fn shift_invariance() {
        let s = random(10, 4, 5);
        let shifted = stack(10, 4, |i, j| s.row(i)[j] + 3.5 - j as f64);
        let a = transform(&fit_pca(&s, 3).unwrap(), &s).unwrap();
        let b = transform(&fit_pca(&shifted, 3).unwrap(), &shifted).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let s = random(5, 3, 6);
        assert!(fit_pca(&s, 0).is_err());
        assert!(fit_pca(&s, 4).is_err());
        let m = fit_pca(&s, 2).unwrap();
        assert!(matches!(transform(&m, &random(5, 4, 7)), Err(Error::DimensionMismatch { .. })));
    }
}
