//! k-nearest-neighbour graphs over fingerprints and the learners that run on
//! them: spectral clustering, Laplace learning and Poisson learning.
//!
//! Graphs are unweighted and symmetric; a directed kNN edge in either
//! direction produces an undirected edge. All solvers work on the
//! combinatorial Laplacian `L = D − A`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::cluster::{kmeans, KMeansParams};
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintStack;

pub const DEFAULT_KNN: usize = 10;
pub const DEFAULT_POISSON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGraph {
    /// Sorted neighbour lists.
    neighbours: Vec<Vec<usize>>,
    labels: Vec<Option<usize>>,
    n_classes: usize,
}

impl LabeledGraph {
    /// Undirected graph from an edge list; duplicates and orientation are
    /// ignored, self-loops rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbours = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::invalid(format!("edge ({a}, {b}) outside a {n}-node graph")));
            }
            if a == b {
                return Err(Error::invalid(format!("self-loop at node {a}")));
            }
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for nb in &mut neighbours {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(Self {
            neighbours,
            labels: vec![None; n],
            n_classes: 0,
        })
    }

    /// Attach a partial labelling. Every class in `0..n_classes` may appear;
    /// nodes with `None` are unlabelled.
    pub fn with_labels(mut self, labels: Vec<Option<usize>>, n_classes: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
        }
        self.labels = labels;
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.neighbours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbours.is_empty()
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbours[i].len()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbours[a].binary_search(&b).is_ok()
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nb) in self.neighbours.iter().enumerate() {
            out.extend(nb.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// `out = L·x`.
    pub fn laplacian_mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, nb) in self.neighbours.iter().enumerate() {
            out[i] = nb.len() as f64 * x[i] - nb.iter().map(|&j| x[j]).sum::<f64>();
        }
    }

    pub fn dense_laplacian(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut l = DMatrix::zeros(n, n);
        for (i, nb) in self.neighbours.iter().enumerate() {
            l[(i, i)] = nb.len() as f64;
            for &j in nb {
                l[(i, j)] = -1.0;
            }
        }
        l
    }

    /// Connected component index of every node, numbered by smallest member.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let n = self.len();
        let mut comp = vec![usize::MAX; n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = count;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for &j in &self.neighbours[i] {
                    if comp[j] == usize::MAX {
                        comp[j] = count;
                        queue.push_back(j);
                    }
                }
            }
            count += 1;
        }
        (count, comp)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other rows of every row (squared Euclidean distance,
/// ties to the lower index), symmetrised by OR.
pub fn knn_graph(stack: &FingerprintStack, k: usize) -> Result<LabeledGraph> {
    let n = stack.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} nearest neighbours needs 1 <= k < N = {n}")));
    }
    let directed: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = stack.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(xi, stack.row(j)), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let edges: Vec<(usize, usize)> = directed
        .iter()
        .enumerate()
        .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
        .collect();
    LabeledGraph::from_edges(n, &edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub labels: Vec<usize>,
    /// The smallest Laplacian eigenvalues, ascending (a diagnostic for
    /// choosing the class count by the first large gap).
    pub eigenvalues: Vec<f64>,
}

/// Partition the graph into `k_classes` groups using the eigenvectors of the
/// `k_classes` smallest Laplacian eigenvalues with the constant direction
/// removed, clustered by k-means.
pub fn spectral_cluster(g: &LabeledGraph, k_classes: usize, seed: u64) -> Result<SpectralResult> {
    let n = g.len();
    if k_classes < 2 {
        return Err(Error::invalid("spectral clustering needs at least 2 classes"));
    }
    if n < k_classes {
        return Err(Error::invalid(format!("{n} nodes cannot form {k_classes} clusters")));
    }
    let (n_comp, _) = g.components();
    if n_comp > k_classes {
        log::warn!("graph has {n_comp} connected components but only {k_classes} classes are requested");
    }
    let eig = SymmetricEigen::try_new(g.dense_laplacian(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("Laplacian eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let shown = (k_classes + 5).min(n);
    let eigenvalues: Vec<f64> = order[..shown].iter().map(|&i| eig.eigenvalues[i]).collect();
    log::info!("smallest Laplacian eigenvalues: {eigenvalues:?}");

    let mut e = DMatrix::from_fn(n, k_classes, |r, c| eig.eigenvectors[(r, order[c])]);
    for mut col in e.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    // leading k−1 directions of the span after removing the constant vector
    let svd = e.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD of spectral embedding failed".into()))?;
    let mut dir: Vec<usize> = (0..svd.singular_values.len()).collect();
    dir.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let dims = k_classes - 1;
    let mut rows = Vec::with_capacity(n * dims);
    for r in 0..n {
        for &c in &dir[..dims] {
            rows.push(u[(r, c)] * svd.singular_values[c]);
        }
    }
    let fit = kmeans(&rows, dims, &KMeansParams::new(k_classes, seed))?;
    Ok(SpectralResult {
        labels: fit.labels,
        eigenvalues,
    })
}

/// Class scores and predictions of a label-propagation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub n_classes: usize,
    /// Row-major `N × K` scores.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    /// Nodes whose component carries no labelled node; their scores are
    /// uniform and the prediction is arbitrary.
    pub unresolved: Vec<bool>,
    pub converged: bool,
    /// Largest relative residual over the class columns.
    pub residual: f64,
}

impl LabelField {
    pub fn score(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct CgOutcome {
    x: Vec<f64>,
    rel_residual: f64,
    converged: bool,
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive
/// (semi-)definite operator. Returns the iterate with the smallest residual
/// when `max_iter` runs out.
fn pcg(apply: impl Fn(&[f64], &mut [f64]), diag: &[f64], b: &[f64], tol: f64, max_iter: usize) -> CgOutcome {
    let n = b.len();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return CgOutcome {
            x,
            rel_residual: 0.0,
            converged: true,
        };
    }
    let precond = |r: &[f64], z: &mut [f64]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(diag) {
            *zi = if *di > 0.0 { ri / di } else { *ri };
        }
    };
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut best = (1.0, x.clone());
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= tol {
            break;
        }
        precond(&r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // the recursive residual drifts; report the true one
    let mut ax = vec![0.0; n];
    apply(&best.1, &mut ax);
    let rel = ax.iter().zip(b).map(|(a, c)| (c - a) * (c - a)).sum::<f64>().sqrt() / bnorm;
    CgOutcome {
        x: best.1,
        rel_residual: rel,
        converged: rel <= tol,
    }
}

fn check_labels(g: &LabeledGraph) -> Result<()> {
    if g.n_classes == 0 || g.labels.iter().all(Option::is_none) {
        return Err(Error::invalid("label propagation needs at least one labelled node"));
    }
    Ok(())
}

/// Harmonic extension of one-hot labels: `L u = 0` on unlabelled nodes with
/// labelled nodes clamped to their one-hot vectors.
pub fn laplace_learn(g: &LabeledGraph) -> Result<LabelField> {
    check_labels(g)?;
    let (n, kc) = (g.len(), g.n_classes);
    for c in 0..kc {
        if !g.labels.contains(&Some(c)) {
            return Err(Error::invalid(format!("class {c} has no labelled node")));
        }
    }
    let (n_comp, comp) = g.components();
    let mut comp_labelled = vec![false; n_comp];
    for (i, l) in g.labels.iter().enumerate() {
        if l.is_some() {
            comp_labelled[comp[i]] = true;
        }
    }
    let unresolved: Vec<bool> = (0..n).map(|i| !comp_labelled[comp[i]]).collect();
    if unresolved.iter().any(|&u| u) {
        log::warn!("some connected components carry no labels; their nodes get uniform scores");
    }
    // unknowns: unlabelled nodes in labelled components
    let mut slot = vec![usize::MAX; n];
    let mut free = Vec::new();
    for i in 0..n {
        if g.labels[i].is_none() && !unresolved[i] {
            slot[i] = free.len();
            free.push(i);
        }
    }
    let mut scores = vec![0.0; n * kc];
    for i in 0..n {
        if let Some(c) = g.labels[i] {
            scores[i * kc + c] = 1.0;
        } else if unresolved[i] {
            scores[i * kc..(i + 1) * kc].fill(1.0 / kc as f64);
        }
    }
    let diag: Vec<f64> = free.iter().map(|&i| g.degree(i) as f64).collect();
    let apply = |x: &[f64], out: &mut [f64]| {
        for (s, &i) in free.iter().enumerate() {
            let mut v = g.degree(i) as f64 * x[s];
            for &j in g.neighbours(i) {
                if slot[j] != usize::MAX {
                    v -= x[slot[j]];
                }
            }
            out[s] = v;
        }
    };
    let mut converged = true;
    let mut residual = 0.0f64;
    if !free.is_empty() {
        for c in 0..kc {
            let rhs: Vec<f64> = free
                .iter()
                .map(|&i| g.neighbours(i).iter().filter(|&&j| g.labels[j] == Some(c)).count() as f64)
                .collect();
            let out = pcg(&apply, &diag, &rhs, 1e-13, 20 * free.len() + 100);
            converged &= out.converged || out.rel_residual <= 1e-10;
            residual = residual.max(out.rel_residual);
            for (s, &i) in free.iter().enumerate() {
                scores[i * kc + c] = out.x[s];
            }
        }
    }
    let labels = (0..n).map(|i| argmax(&scores[i * kc..(i + 1) * kc])).collect();
    Ok(LabelField {
        n_classes: kc,
        scores,
        labels,
        unresolved,
        converged,
        residual,
    })
}

/// Poisson forcing in integer units: row `i` is `m·(y_i − ȳ)` for labelled
/// nodes and zero otherwise, where `m` is the number of labelled nodes. The
/// entries are exact integers, so every column sums to exactly zero.
pub fn poisson_forcing(g: &LabeledGraph) -> Result<Vec<f64>> {
    check_labels(g)?;
    let (n, kc) = (g.len(), g.n_classes);
    let mut counts = vec![0i64; kc];
    for c in g.labels.iter().flatten() {
        counts[*c] += 1;
    }
    let m: i64 = counts.iter().sum();
    let mut b = vec![0.0; n * kc];
    for (i, l) in g.labels.iter().enumerate() {
        if let Some(c) = *l {
            for (k, &nk) in counts.iter().enumerate() {
                b[i * kc + k] = ((if k == c { m } else { 0 }) - nk) as f64;
            }
        }
    }
    Ok(b)
}

/// Solve `L u = b` with the mean-zero Poisson forcing `b`, one class column
/// at a time, and predict by argmax.
///
/// On a disconnected graph each component is solved with its own forcing
/// made mean-zero; the component's net forcing then decides its class
/// (largest net source wins), with the local solution breaking ties.
pub fn poisson_learn(g: &LabeledGraph, max_iter: Option<usize>, tol: f64) -> Result<LabelField> {
    let b_int = poisson_forcing(g)?;
    let (n, kc) = (g.len(), g.n_classes);
    let m = g.labels.iter().flatten().count() as f64;
    let max_iter = max_iter.unwrap_or(10 * n);
    let (n_comp, comp) = g.components();
    let mut members = vec![Vec::new(); n_comp];
    for i in 0..n {
        members[comp[i]].push(i);
    }
    let mut scores = vec![0.0; n * kc];
    let mut converged = true;
    let mut residual = 0.0f64;
    let mut net = vec![0.0; n_comp * kc];
    let mut unresolved = vec![false; n];
    for (ci, nodes) in members.iter().enumerate() {
        let size = nodes.len();
        let mut slot = vec![usize::MAX; n];
        for (s, &i) in nodes.iter().enumerate() {
            slot[i] = s;
        }
        if !nodes.iter().any(|&i| g.labels[i].is_some()) {
            for &i in nodes {
                unresolved[i] = true;
                scores[i * kc..(i + 1) * kc].fill(1.0 / kc as f64);
            }
            continue;
        }
        let diag: Vec<f64> = nodes.iter().map(|&i| g.degree(i) as f64).collect();
        let apply = |x: &[f64], out: &mut [f64]| {
            for (s, &i) in nodes.iter().enumerate() {
                out[s] = g.degree(i) as f64 * x[s] - g.neighbours(i).iter().map(|&j| x[slot[j]]).sum::<f64>();
            }
        };
        for c in 0..kc {
            let mut rhs: Vec<f64> = nodes.iter().map(|&i| b_int[i * kc + c] / m).collect();
            let total: f64 = rhs.iter().sum();
            if n_comp > 1 {
                net[ci * kc + c] = total;
                let shift = total / size as f64;
                rhs.iter_mut().for_each(|v| *v -= shift);
            }
            let out = pcg(&apply, &diag, &rhs, tol, max_iter);
            converged &= out.converged;
            residual = residual.max(out.rel_residual);
            let mean = out.x.iter().sum::<f64>() / size as f64;
            for (s, &i) in nodes.iter().enumerate() {
                scores[i * kc + c] = out.x[s] - mean;
            }
        }
    }
    if !converged {
        log::warn!("Poisson solve stopped at relative residual {residual:.3e} after {max_iter} iterations");
    }
    let labels = (0..n)
        .map(|i| {
            let local = &scores[i * kc..(i + 1) * kc];
            if n_comp == 1 || unresolved[i] {
                return argmax(local);
            }
            let src = &net[comp[i] * kc..(comp[i] + 1) * kc];
            let top = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut best: Option<usize> = None;
            for c in 0..kc {
                if src[c] == top && best.is_none_or(|b| local[c] > local[b]) {
                    best = Some(c);
                }
            }
            best.unwrap_or(0)
        })
        .collect();
    Ok(LabelField {
        n_classes: kc,
        scores,
        labels,
        unresolved,
        converged,
        residual,
    })
}
