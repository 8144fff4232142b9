use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-3;
const MAX_ITER: usize = 10_000_000;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    /// Exponential χ² kernel; `gamma = None` means `1 / n` for inputs of
    /// length `n`.
    Chi2 { gamma: Option<f64> },
}

impl Kernel {
    pub fn chi2() -> Self {
        Kernel::Chi2 { gamma: None }
    }

    fn resolved(self, n: usize) -> Self {
        match self {
            Kernel::Chi2 { gamma: None } => Kernel::Chi2 {
                gamma: Some(1.0 / n as f64),
            },
            k => k,
        }
    }

    /// Kernel value; the χ² form requires non-negative inputs.
    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        match *self {
            Kernel::Linear => Ok(u.iter().zip(v).map(|(a, b)| a * b).sum()),
            Kernel::Chi2 { gamma } => chi2_kernel(u, v, gamma.unwrap_or(1.0 / u.len().max(1) as f64)),
        }
    }
}

/// `exp(−γ Σ (uᵢ−vᵢ)² / (uᵢ+vᵢ))`, terms with `uᵢ = vᵢ = 0` contributing 0.
pub fn chi2_kernel(u: &[f64], v: &[f64], gamma: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let mut acc = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        if a < 0.0 || b < 0.0 {
            return Err(Error::invalid(
                "the chi2 kernel needs non-negative fingerprints; use the linear kernel for signed data",
            ));
        }
        let s = a + b;
        if s > 0.0 {
            acc += (a - b) * (a - b) / s;
        }
    }
    Ok((-gamma * acc).exp())
}

/// Row-major Gram matrix of `rows` (each of length `n`).
pub fn gram(kernel: &Kernel, rows: &[f64], n: usize) -> Result<Vec<f64>> {
    let m = rows.len() / n;
    let kernel = kernel.resolved(n);
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i..m)
                .map(|j| kernel.eval(&rows[i * n..(i + 1) * n], &rows[j * n..(j + 1) * n]))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut k = vec![0.0; m * m];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            k[i * m + i + off] = v;
            k[(i + off) * m + i] = v;
        }
    }
    Ok(k)
}

/// Binary soft-margin SVM; decision `Σ coef_i K(sv_i, x) − b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub n: usize,
    /// Row-major support vectors.
    pub support: Vec<f64>,
    /// `α_i y_i` for each support vector.
    pub coef: Vec<f64>,
    pub b: f64,
    /// Final maximal KKT violation.
    pub kkt_gap: f64,
    pub converged: bool,
}

impl SvmModel {
    pub fn n_support(&self) -> usize {
        self.coef.len()
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let mut s = -self.b;
        for (sv, &a) in self.support.chunks_exact(self.n).zip(&self.coef) {
            s += a * self.kernel.eval(sv, x)?;
        }
        Ok(s)
    }

    /// `+1` when the decision value is non-negative, else `−1`.
    pub fn predict(&self, x: &[f64]) -> Result<i8> {
        Ok(if self.decision(x)? >= 0.0 { 1 } else { -1 })
    }
}

fn check_y(y: &[i8]) -> Result<()> {
    if y.iter().any(|&v| v != 1 && v != -1) {
        return Err(Error::invalid("binary SVM labels must be +1 or -1"));
    }
    if !y.contains(&1) || !y.contains(&-1) {
        return Err(Error::invalid("binary SVM training needs both classes"));
    }
    Ok(())
}

/// Train on row-major `rows` (`y.len()` rows of length `n`).
pub fn svm_train(rows: &[f64], n: usize, y: &[i8], kernel: Kernel, c: f64) -> Result<SvmModel> {
    if n == 0 || rows.len() != y.len() * n {
        return Err(Error::invalid("SVM input rows do not match the label count"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid(format!("C must be positive, got {c}")));
    }
    check_y(y)?;
    let kernel = kernel.resolved(n);
    let k = gram(&kernel, rows, n)?;
    let (alpha, b, gap, converged) = smo(&k, y, c, DEFAULT_TOL);
    if !converged {
        log::warn!("SMO stopped before reaching the KKT tolerance (gap {gap:.3e})");
    }
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            support.extend_from_slice(&rows[i * n..(i + 1) * n]);
            coef.push(a * y[i] as f64);
        }
    }
    Ok(SvmModel {
        kernel,
        c,
        n,
        support,
        coef,
        b,
        kkt_gap: gap,
        converged,
    })
}

/// SMO with second-order working-set selection on a precomputed Gram
/// matrix. Returns `(α, b, final gap, converged)`.
pub(crate) fn smo(k: &[f64], y: &[i8], c: f64, eps: f64) -> (Vec<f64>, f64, f64, bool) {
    let m = y.len();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let q = |i: usize, j: usize| yf[i] * yf[j] * k[i * m + j];
    let mut alpha = vec![0.0; m];
    let mut grad = vec![-1.0; m];
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    let mut gap = f64::INFINITY;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..m {
            if up(alpha[t], yf[t]) && -yf[t] * grad[t] > gmax {
                gmax = -yf[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best_obj = f64::INFINITY;
        for t in 0..m {
            if !low(alpha[t], yf[t]) {
                continue;
            }
            let v = -yf[t] * grad[t];
            gmin = gmin.min(v);
            if i != usize::MAX && v < gmax {
                let bdiff = gmax - v;
                let mut a = k[i * m + i] + k[t * m + t] - 2.0 * k[i * m + t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -bdiff * bdiff / a;
                if obj < best_obj {
                    best_obj = obj;
                    j = t;
                }
            }
        }
        gap = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || gap < eps {
            converged = true;
            break;
        }
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if yf[i] != yf[j] {
            let mut quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    // bias from free vectors, else the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut n_free) = (0.0, 0usize);
    for t in 0..m {
        let yg = yf[t] * grad[t];
        if alpha[t] >= c {
            if yf[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if yf[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum += yg;
        }
    }
    let b = if n_free > 0 { sum / n_free as f64 } else { (ub + lb) / 2.0 };
    (alpha, b, gap, converged)
}

/// One-vs-one error-correcting output code over binary SVMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcocModel {
    pub n_classes: usize,
    /// `n_classes × learners`, entries in {+1, 0, −1}.
    pub code: Vec<Vec<i8>>,
    pub learners: Vec<SvmModel>,
}

pub fn ecoc_train(rows: &[f64], n: usize, y: &[usize], n_classes: usize, kernel: Kernel, c: f64) -> Result<EcocModel> {
    if n_classes < 2 {
        return Err(Error::invalid("ECOC needs at least two classes"));
    }
    if n == 0 || rows.len() != y.len() * n {
        return Err(Error::invalid("ECOC input rows do not match the label count"));
    }
    for cls in 0..n_classes {
        if !y.contains(&cls) {
            return Err(Error::invalid(format!("class {cls} is missing from the training data")));
        }
    }
    if let Some(bad) = y.iter().find(|&&v| v >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    let pairs: Vec<(usize, usize)> = (0..n_classes)
        .flat_map(|a| (a + 1..n_classes).map(move |b| (a, b)))
        .collect();
    let mut code = vec![vec![0i8; pairs.len()]; n_classes];
    for (l, &(a, b)) in pairs.iter().enumerate() {
        code[a][l] = 1;
        code[b][l] = -1;
    }
    let learners = pairs
        .par_iter()
        .map(|&(a, b)| {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
            let mut sub = Vec::with_capacity(idx.len() * n);
            for &i in &idx {
                sub.extend_from_slice(&rows[i * n..(i + 1) * n]);
            }
            let yy: Vec<i8> = idx.iter().map(|&i| if y[i] == a { 1 } else { -1 }).collect();
            svm_train(&sub, n, &yy, kernel, c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EcocModel {
        n_classes,
        code,
        learners,
    })
}

impl EcocModel {
    /// Class with the smallest Hamming loss, ties broken by hinge loss and
    /// then by the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let f: Vec<f64> = self.learners.iter().map(|l| l.decision(x)).collect::<Result<_>>()?;
        let mut best = (f64::INFINITY, f64::INFINITY, 0usize);
        for (cls, row) in self.code.iter().enumerate() {
            let mut hamming = 0.0;
            let mut hinge = 0.0;
            for (&m, &v) in row.iter().zip(&f) {
                let s = if v >= 0.0 { 1.0 } else { -1.0 };
                hamming += (1.0 - m as f64 * s) / 2.0;
                if m != 0 {
                    hinge += (1.0 - m as f64 * v).max(0.0);
                }
            }
            if hamming < best.0 || (hamming == best.0 && hinge < best.1) {
                best = (hamming, hinge, cls);
            }
        }
        Ok(best.2)
    }

    pub fn predict_rows(&self, rows: &[f64], n: usize) -> Result<Vec<usize>> {
        rows.par_chunks_exact(n).map(|r| self.predict(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_values() {
        assert_eq!(chi2_kernel(&[0.2, 0.8], &[0.2, 0.8], 0.5).unwrap(), 1.0);
        assert!((chi2_kernel(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap() - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(chi2_kernel(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), 1.0);
        let a = chi2_kernel(&[0.1, 0.3, 0.6], &[0.5, 0.2, 0.3], 2.0).unwrap();
        let b = chi2_kernel(&[0.5, 0.2, 0.3], &[0.1, 0.3, 0.6], 2.0).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
        assert!(chi2_kernel(&[-0.1, 0.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn default_gamma_is_inverse_length() {
        let k = Kernel::chi2().resolved(4);
        assert_eq!(k, Kernel::Chi2 { gamma: Some(0.25) });
    }

    #[test]
    fn separable_points() {
        let rows = [0.0, 0.0, 0.1, 0.2, 0.2, 0.0, 2.0, 2.0, 2.1, 1.9, 1.8, 2.2];
        let y = [1, 1, 1, -1, -1, -1];
        let m = svm_train(&rows, 2, &y, Kernel::Linear, 1.0).unwrap();
        assert!(m.converged);
        for (r, &t) in rows.chunks(2).zip(&y) {
            assert_eq!(m.predict(r).unwrap(), t);
            // margin respected: no slack
            assert!(t as f64 * m.decision(r).unwrap() >= 1.0 - 2e-3);
        }
    }

    #[test]
    fn duplicated_point_in_both_classes_needs_slack() {
        let rows = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0];
        let y = [1, 1, -1, -1];
        let m = svm_train(&rows, 2, &y, Kernel::Linear, 1.0).unwrap();
        let f = m.decision(&[1.0, 1.0]).unwrap();
        // one of the two copies must violate its margin
        assert!(f < 1.0 || -f < 1.0);
        assert!(1.0 - f > 1e-6 || 1.0 + f > 1e-6);
    }

    #[test]
    fn bad_inputs() {
        assert!(svm_train(&[0.0, 1.0], 1, &[1, 1], Kernel::Linear, 1.0).is_err());
        assert!(svm_train(&[0.0, 1.0], 1, &[1, 2], Kernel::Linear, 1.0).is_err());
        assert!(svm_train(&[0.0, -1.0], 1, &[1, -1], Kernel::chi2(), 1.0).is_err());
        assert!(svm_train(&[0.0, 1.0], 1, &[1, -1], Kernel::Linear, 0.0).is_err());
    }

    #[test]
    fn decision_ignores_row_order() {
        let rows = [0.0, 0.3, 0.5, 0.9, 1.4, 2.0, 0.7];
        let y = [1, 1, 1, -1, -1, -1, -1];
        let m1 = svm_train(&rows, 1, &y, Kernel::Linear, 1.0).unwrap();
        let rev: Vec<f64> = rows.iter().rev().copied().collect();
        let yrev: Vec<i8> = y.iter().rev().copied().collect();
        let m2 = svm_train(&rev, 1, &yrev, Kernel::Linear, 1.0).unwrap();
        for x in [-1.0, 0.2, 0.6, 0.8, 1.0, 3.0] {
            assert_eq!(m1.predict(&[x]).unwrap(), m2.predict(&[x]).unwrap());
        }
    }

    #[test]
    fn two_classes_use_one_learner() {
        let rows = [0.0, 1.0, 5.0, 6.0];
        let m = ecoc_train(&rows, 1, &[0, 0, 1, 1], 2, Kernel::Linear, 1.0).unwrap();
        assert_eq!(m.learners.len(), 1);
        assert_eq!(m.predict_rows(&rows, 1).unwrap(), vec![0, 0, 1, 1]);
        let m3 = ecoc_train(&[0.0, 1.0, 5.0, 6.0, 10.0, 11.0], 1, &[0, 0, 1, 1, 2, 2], 3, Kernel::Linear, 1.0).unwrap();
        assert_eq!(m3.learners.len(), 3);
        assert!(ecoc_train(&rows, 1, &[0, 0, 1, 1], 3, Kernel::Linear, 1.0).is_err());
    }
}
