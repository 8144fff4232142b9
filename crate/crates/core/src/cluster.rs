//! k-means dictionary learning: k-means++ seeding, Lloyd iterations, best of
//! several restarts.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};
use crate::featureio::Population;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centre moves further than this (Euclidean).
    pub tol: f64,
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

/// Result of one k-means fit over a generic row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `k × d`, row-major.
    pub centres: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub n_iter: usize,
}

impl KMeansFit {
    pub fn centre(&self, k: usize) -> &[f64] {
        &self.centres[k * self.d..(k + 1) * self.d]
    }
}

/// Cluster centres learned from a feature population.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    /// `k × d`, row-major.
    pub centres: Vec<f64>,
    pub k: usize,
    pub d: usize,
    pub inertia: f64,
    pub kind: DescriptorKind,
}

impl Dictionary {
    pub fn new(centres: Vec<f64>, k: usize, d: usize, kind: DescriptorKind) -> Result<Self> {
        if k == 0 || d == 0 || centres.len() != k * d {
            return Err(Error::invalid(format!(
                "dictionary needs k*d = {k}*{d} values, got {}",
                centres.len()
            )));
        }
        if centres.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dictionary centres must be finite"));
        }
        Ok(Self {
            centres,
            k,
            d,
            inertia: 0.0,
            kind,
        })
    }

    pub fn centre(&self, k: usize) -> &[f64] {
        &self.centres[k * self.d..(k + 1) * self.d]
    }

    /// Centres as an `f32` matrix (storage form).
    pub fn to_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::new(self.k, self.d, self.centres.iter().map(|&v| v as f32).collect())
            .expect("shape checked at construction")
    }
}

/// Fit a dictionary of `params.k` centres on a feature population.
pub fn fit_kmeans(pop: &Population, params: &KMeansParams) -> Result<Dictionary> {
    let fit = kmeans(pop.features.as_slice(), pop.features.cols(), params)?;
    Ok(Dictionary {
        centres: fit.centres,
        k: fit.k,
        d: fit.d,
        inertia: fit.inertia,
        kind: pop.kind.clone(),
    })
}

/// Nearest-centre label of every feature; ties go to the lowest index.
pub fn assign(dict: &Dictionary, fs: &FeatureSet) -> Result<Vec<usize>> {
    if fs.dim() != dict.d {
        return Err(Error::DimensionMismatch {
            expected: dict.d,
            found: fs.dim(),
        });
    }
    Ok(fs
        .features
        .iter_rows()
        .map(|row| nearest(row, &dict.centres, dict.d).0)
        .collect())
}

#[inline]
fn sq_dist<T: Copy + Into<f64>>(a: &[T], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = x.into() - y;
            t * t
        })
        .sum()
}

/// Index and squared distance of the nearest centre.
#[inline]
fn nearest<T: Copy + Into<f64>>(row: &[T], centres: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centres.chunks_exact(d).enumerate() {
        let dist = sq_dist(row, c);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

/// k-means over a row-major `n × d` matrix, best of `params.n_init`
/// restarts by inertia.
pub fn kmeans<T>(data: &[T], d: usize, params: &KMeansParams) -> Result<KMeansFit>
where
    T: Copy + Into<f64> + Send + Sync,
{
    if d == 0 || data.len() % d != 0 {
        return Err(Error::invalid("data length is not a multiple of the dimension"));
    }
    let n = data.len() / d;
    if params.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if params.k > n {
        return Err(Error::invalid(format!("k = {} exceeds {n} points", params.k)));
    }
    if data.iter().any(|&v| !v.into().is_finite()) {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..params.n_init.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seeder.next_u64());
        let fit = lloyd(data, n, d, params, &mut rng)?;
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init<T: Copy + Into<f64>>(data: &[T], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centres = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centres.extend(row(first).iter().map(|&v| v.into()));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centres[0..d])).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.extend(row(pick).iter().map(|&v| v.into()));
        let new_c = &centres[c * d..(c + 1) * d];
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(row(i), new_c));
        }
    }
    centres
}

fn assign_all<T>(data: &[T], d: usize, centres: &[f64]) -> (Vec<usize>, Vec<f64>)
where
    T: Copy + Into<f64> + Send + Sync,
{
    data.par_chunks_exact(d)
        .map(|row| nearest(row, centres, d))
        .unzip()
}

fn lloyd<T>(data: &[T], n: usize, d: usize, params: &KMeansParams, rng: &mut ChaCha8Rng) -> Result<KMeansFit>
where
    T: Copy + Into<f64> + Send + Sync,
{
    let k = params.k;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centres = plus_plus_init(data, n, d, k, rng);
    let mut history = Vec::new();
    let mut n_iter = 0;
    loop {
        let (labels, dists) = assign_all(data, d, &centres);
        history.push(dists.iter().sum());
        if n_iter >= params.max_iter {
            break;
        }
        n_iter += 1;
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row(i)) {
                *s += v.into();
            }
        }
        let mut shift = 0.0f64;
        let mut taken = Vec::new();
        for c in 0..k {
            let old = centres[c * d..(c + 1) * d].to_vec();
            let new: Vec<f64> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let p = farthest_from(data, d, &old, &taken);
                taken.push(p);
                row(p).iter().map(|&v| v.into()).collect()
            };
            shift = shift.max(sq_dist(&new, &old).sqrt());
            centres[c * d..(c + 1) * d].copy_from_slice(&new);
        }
        if shift < params.tol {
            let (_, dists) = assign_all(data, d, &centres);
            history.push(dists.iter().sum());
            break;
        }
    }
    // the last update may have emptied a cluster; reseed until none is empty
    let mut labels;
    let mut dists;
    let mut guard = 0;
    loop {
        (labels, dists) = assign_all(data, d, &centres);
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        // the point worst served by the current centres
        let (far, far_d) = dists
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        guard += 1;
        if far_d <= 0.0 || guard > k {
            return Err(Error::invalid(format!(
                "fewer than {k} distinct points; cannot keep every cluster non-empty"
            )));
        }
        let p: Vec<f64> = row(far).iter().map(|&v| v.into()).collect();
        centres[empty * d..(empty + 1) * d].copy_from_slice(&p);
    }
    let inertia: f64 = dists.iter().sum();
    if history.last().is_none_or(|&h| inertia < h) {
        history.push(inertia);
    }
    Ok(KMeansFit {
        centres,
        k,
        d,
        labels,
        inertia,
        history,
        n_iter,
    })
}

fn farthest_from<T: Copy + Into<f64>>(data: &[T], d: usize, centre: &[f64], exclude: &[usize]) -> usize {
    let mut best = (0, -1.0);
    for (i, row) in data.chunks_exact(d).enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let dist = sq_dist(row, centre);
        if dist > best.1 {
            best = (i, dist);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureio::build_population;

    fn fs_from(rows: &[[f32; 2]]) -> FeatureSet {
        FeatureSet::new(
            "t",
            DescriptorKind::Patch,
            FeatureMatrix::from_rows(2, rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pop = build_population(&[fs_from(&[[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])]).unwrap();
        let dict = fit_kmeans(&pop, &KMeansParams::new(1, 0)).unwrap();
        assert_eq!(dict.centre(0), &[2.0, 4.0]);
    }

    #[test]
    fn four_points_two_clusters() {
        // every 2-partition of the four points, scored by within-cluster SSE
        let pts = [[0.0f32, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << 3) {
            let mut sse = 0.0;
            for side in [true, false] {
                let members: Vec<_> = (0..4).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                if members.is_empty() {
                    continue;
                }
                let mx = members.iter().map(|&i| pts[i][0] as f64).sum::<f64>() / members.len() as f64;
                let my = members.iter().map(|&i| pts[i][1] as f64).sum::<f64>() / members.len() as f64;
                sse += members
                    .iter()
                    .map(|&i| (pts[i][0] as f64 - mx).powi(2) + (pts[i][1] as f64 - my).powi(2))
                    .sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, mask);
            }
        }
        assert_eq!(best.1, 0b011);
        let pop = build_population(&[fs_from(&pts)]).unwrap();
        let dict = fit_kmeans(&pop, &KMeansParams::new(2, 3)).unwrap();
        let mut centres: Vec<Vec<f64>> = (0..2).map(|k| dict.centre(k).to_vec()).collect();
        centres.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(centres, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((dict.inertia - best.0).abs() < 1e-12);
    }

    #[test]
    fn assignment_ties_and_exact_hits() {
        let dict = Dictionary::new(vec![0.0, 0.0, 2.0, 0.0, 5.0, 5.0], 3, 2, DescriptorKind::Patch).unwrap();
        let fs = fs_from(&[[5.0, 5.0], [1.0, 0.0], [1.9, 0.0]]);
        assert_eq!(assign(&dict, &fs).unwrap(), vec![2, 0, 1]);
        let wrong = FeatureSet::new("w", DescriptorKind::Patch, FeatureMatrix::zeros(1, 3)).unwrap();
        assert!(assign(&dict, &wrong).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = [0.0f64, 1.0, 2.0];
        assert!(kmeans(&data, 1, &KMeansParams::new(4, 0)).is_err());
        assert!(kmeans(&data, 1, &KMeansParams::new(0, 0)).is_err());
        assert!(kmeans(&[0.0f64, f64::NAN], 1, &KMeansParams::new(1, 0)).is_err());
    }

    #[test]
    fn duplicate_points_cannot_fill_k_clusters() {
        let data = [1.0f64; 6];
        assert!(kmeans(&data, 1, &KMeansParams::new(2, 0)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let a = kmeans(&data, 3, &KMeansParams::new(5, 11)).unwrap();
        let b = kmeans(&data, 3, &KMeansParams::new(5, 11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_cluster_keeps_a_member() {
        // heavy duplicates make empty clusters likely during iteration
        let mut data = vec![0.0f64; 40];
        data.extend((0..10).map(|i| 100.0 + i as f64));
        for seed in 0..20 {
            let fit = kmeans(&data, 1, &KMeansParams::new(6, seed)).unwrap();
            let mut counts = vec![0; 6];
            for &l in &fit.labels {
                counts[l] += 1;
            }
            assert!(counts.iter().all(|&c| c > 0), "seed {seed}: {counts:?}");
        }
    }
}
