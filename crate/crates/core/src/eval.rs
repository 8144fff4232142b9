//! Accuracy scoring, cross-validation and label-rate sweeps.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FoldPlan;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintStack;
use crate::graph::{knn_graph, laplace_learn, poisson_learn, spectral_cluster, LabeledGraph, DEFAULT_POISSON_TOL};
use crate::reduce::{fit_pca, transform};
use crate::supervised::{ecoc_train, forest_train, kmeans_classify, ForestParams, Kernel};

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::DimensionMismatch {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let mut c = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::invalid(format!("label pair ({t}, {p}) outside 0..{k}")));
            }
            c.counts[t * k + p] += 1;
        }
        Ok(c)
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Trace over total.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("accuracy of an empty confusion matrix"));
        }
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for p in 0..self.k {
            s.push_str(&format!(",{p}"));
        }
        s.push('\n');
        for t in 0..self.k {
            s.push_str(&t.to_string());
            for p in 0..self.k {
                s.push_str(&format!(",{}", self.get(t, p)));
            }
            s.push('\n');
        }
        s
    }
}

/// Maximum-weight perfect matching on a square `k × k` weight matrix
/// (Hungarian method). Returns `assign[row] = column`.
pub fn assignment_max(weights: &[i64], k: usize) -> Vec<usize> {
    // shortest augmenting path on costs −w; 1-based potentials
    let cost = |i: usize, j: usize| -weights[(i - 1) * k + (j - 1)];
    let mut u = vec![0i64; k + 1];
    let mut v = vec![0i64; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; k];
    for j in 1..=k {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Relabel predictions to best agree with the truth. Returns
/// `(perm, accuracy)` where `perm[predicted] = true class`.
///
/// Up to 8 classes every permutation is tried and ties go to the
/// lexicographically smallest; beyond that an assignment solver is used.
pub fn match_permutation(truth: &[usize], pred: &[usize], k: usize) -> Result<(Vec<usize>, f64)> {
    let c = ConfusionMatrix::from_labels(truth, pred, k)?;
    if c.total() == 0 {
        return Err(Error::invalid("cannot match empty label vectors"));
    }
    // agreement[p][t]
    let agree = |p: usize, t: usize| c.get(t, p);
    let best = if k <= 8 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = (0u64, perm.clone());
        let mut first = true;
        loop {
            let hits: u64 = (0..k).map(|p| agree(p, perm[p])).sum();
            if first || hits > best.0 {
                best = (hits, perm.clone());
                first = false;
            }
            if !next_permutation(&mut perm) {
                break;
            }
        }
        best.1
    } else {
        let w: Vec<i64> = (0..k * k).map(|i| agree(i / k, i % k) as i64).collect();
        assignment_max(&w, k)
    };
    let hits: u64 = (0..k).map(|p| agree(p, best[p])).sum();
    Ok((best, hits as f64 / c.total() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SslScore {
    /// Score only the held-out fold.
    Holdout,
    /// Score every node whose label was not revealed.
    AllUnlabelled,
}

impl fmt::Display for SslScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SslScore::Holdout => "holdout",
            SslScore::AllUnlabelled => "all-unlabelled",
        })
    }
}

impl FromStr for SslScore {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(SslScore::Holdout),
            "all-unlabelled" => Ok(SslScore::AllUnlabelled),
            _ => Err(Error::Config(format!("unknown SSL scoring '{s}' (holdout|all-unlabelled)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Svm { kernel: Kernel, c: f64 },
    Rf(ForestParams),
    Kmeans,
    Spectral { knn: usize },
    Laplace { knn: usize },
    Poisson { knn: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Supervised,
    SemiSupervised,
    Unsupervised,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Svm { .. } => "svm",
            Method::Rf(_) => "rf",
            Method::Kmeans => "kmeans",
            Method::Spectral { .. } => "spectral",
            Method::Laplace { .. } => "laplace",
            Method::Poisson { .. } => "poisson",
        }
    }

    pub fn protocol(&self) -> Protocol {
        match self {
            Method::Svm { .. } | Method::Rf(_) => Protocol::Supervised,
            Method::Laplace { .. } | Method::Poisson { .. } => Protocol::SemiSupervised,
            Method::Kmeans | Method::Spectral { .. } => Protocol::Unsupervised,
        }
    }
}

/// Train a supervised method on `train` rows and predict `test` rows.
pub fn fit_predict(
    method: &Method,
    stack: &FingerprintStack,
    labels: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    seed: u64,
) -> Result<Vec<usize>> {
    let tr = stack.select(train);
    let te = stack.select(test);
    let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    match method {
        Method::Svm { kernel, c } => ecoc_train(&tr.values, tr.n, &y, n_classes, *kernel, *c)?.predict_rows(&te.values, te.n),
        Method::Rf(p) => {
            let p = ForestParams { seed: p.seed ^ seed, ..*p };
            forest_train(&tr.values, tr.n, &y, n_classes, &p)?.predict_rows(&te.values)
        }
        other => Err(Error::invalid(format!("{} is not a supervised method", other.name()))),
    }
}

/// Run a semi-supervised method with the given nodes revealed.
pub fn propagate(method: &Method, graph: &LabeledGraph, labels: &[usize], n_classes: usize, revealed: &[usize]) -> Result<Vec<usize>> {
    let mut partial = vec![None; graph.len()];
    for &i in revealed {
        partial[i] = Some(labels[i]);
    }
    let g = graph.clone().with_labels(partial, n_classes)?;
    match method {
        Method::Laplace { .. } => Ok(laplace_learn(&g)?.labels),
        Method::Poisson { .. } => Ok(poisson_learn(&g, None, DEFAULT_POISSON_TOL)?.labels),
        other => Err(Error::invalid(format!("{} is not a label-propagation method", other.name()))),
    }
}

/// Stratified subset of `pool` of size `round(p·|pool|)`, split across
/// classes by largest remainder with at least one member per class.
pub fn stratified_subset(pool: &[usize], labels: &[usize], n_classes: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("label rate {p} outside (0, 1]")));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let present = by_class.iter().filter(|c| !c.is_empty()).count();
    let total = (p * pool.len() as f64).round() as usize;
    if total < present {
        return Err(Error::invalid(format!(
            "label rate {p} reveals {total} of {} samples, fewer than the {present} classes",
            pool.len()
        )));
    }
    let mut take: Vec<usize> = by_class.iter().map(|c| usize::from(!c.is_empty())).collect();
    let mut left = total - present;
    // remaining slots by largest remainder of the proportional share
    let mut shares: Vec<(f64, usize)> = by_class
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .map(|(k, c)| (total as f64 * c.len() as f64 / pool.len() as f64 - 1.0, k))
        .collect();
    for (s, k) in shares.iter_mut() {
        let whole = (s.max(0.0).floor() as usize).min(by_class[*k].len() - take[*k]).min(left);
        take[*k] += whole;
        left -= whole;
        *s -= whole as f64;
    }
    shares.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    while left > 0 {
        let mut progressed = false;
        for &(_, k) in &shares {
            if left > 0 && take[k] < by_class[k].len() {
                take[k] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut out = Vec::with_capacity(total);
    for (k, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        out.extend_from_slice(&members[..take[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub seed: u64,
    /// Fraction of the training side revealed to SSL methods.
    pub label_rate: f64,
    pub ssl_score: SslScore,
    /// Fit PCA to this rank on each training side instead of using the stack as is.
    pub pca_per_fold: Option<usize>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            label_rate: 0.05,
            ssl_score: SslScore::Holdout,
            pca_per_fold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub method: String,
    pub recipe: String,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the fold accuracies.
    pub std: f64,
    pub confusions: Vec<ConfusionMatrix>,
    pub label_rate: Option<f64>,
    pub ssl_score: Option<SslScore>,
    pub dict_per_fold: bool,
    pub pca_per_fold: bool,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(fold as u64)
}

/// Project with a PCA fitted on `train` rows only.
fn per_fold_pca(stack: &FingerprintStack, train: &[usize], r: usize) -> Result<FingerprintStack> {
    let model = fit_pca(&stack.select(train), r.min(train.len()).min(stack.n))?;
    transform(&model, stack)
}

fn evaluate_fold(
    method: &Method,
    stack: &FingerprintStack,
    labels: &[usize],
    n_classes: usize,
    folds: &FoldPlan,
    fold: usize,
    opts: &CvOptions,
) -> Result<ConfusionMatrix> {
    let train = folds.train_indices(fold);
    let test = folds.test_indices(fold);
    let owned;
    let stack = match opts.pca_per_fold {
        Some(r) => {
            owned = per_fold_pca(stack, &train, r)?;
            &owned
        }
        None => stack,
    };
    let seed = fold_seed(opts.seed, fold);
    match method.protocol() {
        Protocol::Supervised => {
            let pred = fit_predict(method, stack, labels, n_classes, &train, &test, seed)?;
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            ConfusionMatrix::from_labels(&truth, &pred, n_classes)
        }
        Protocol::SemiSupervised => {
            let knn = match method {
                Method::Laplace { knn } | Method::Poisson { knn } => *knn,
                _ => unreachable!(),
            };
            let graph = knn_graph(stack, knn)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let revealed = stratified_subset(&train, labels, n_classes, opts.label_rate, &mut rng)?;
            let pred = propagate(method, &graph, labels, n_classes, &revealed)?;
            let scored: Vec<usize> = match opts.ssl_score {
                SslScore::Holdout => test,
                SslScore::AllUnlabelled => (0..labels.len()).filter(|i| revealed.binary_search(i).is_err()).collect(),
            };
            let truth: Vec<usize> = scored.iter().map(|&i| labels[i]).collect();
            let p: Vec<usize> = scored.iter().map(|&i| pred[i]).collect();
            ConfusionMatrix::from_labels(&truth, &p, n_classes)
        }
        Protocol::Unsupervised => {
            let pred = match method {
                Method::Kmeans => kmeans_classify(stack, n_classes, seed)?,
                Method::Spectral { knn } => spectral_cluster(&knn_graph(stack, *knn)?, n_classes, seed)?.labels,
                _ => unreachable!(),
            };
            let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            let p: Vec<usize> = test.iter().map(|&i| pred[i]).collect();
            let (perm, _) = match_permutation(&truth, &p, n_classes)?;
            let mapped: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            ConfusionMatrix::from_labels(&truth, &mapped, n_classes)
        }
    }
}

/// Cross-validate `method` on one shared stack.
pub fn run_cv(
    stack: &FingerprintStack,
    labels: &[usize],
    n_classes: usize,
    method: &Method,
    folds: &FoldPlan,
    opts: &CvOptions,
) -> Result<CvResult> {
    run_cv_per_fold(std::slice::from_ref(stack), labels, n_classes, method, folds, opts)
}

/// Cross-validate with one stack per fold (for dictionaries fitted per
/// fold); a single stack is shared by all folds.
pub fn run_cv_per_fold(
    stacks: &[FingerprintStack],
    labels: &[usize],
    n_classes: usize,
    method: &Method,
    folds: &FoldPlan,
    opts: &CvOptions,
) -> Result<CvResult> {
    if stacks.is_empty() || (stacks.len() != 1 && stacks.len() != folds.n_folds) {
        return Err(Error::invalid("need one stack, or one per fold"));
    }
    for s in stacks {
        if s.rows() != labels.len() || folds.assignments.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                found: s.rows(),
            });
        }
    }
    let confusions = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| {
            let s = &stacks[if stacks.len() == 1 { 0 } else { f }];
            evaluate_fold(method, s, labels, n_classes, folds, f, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_accuracies = confusions.iter().map(|c| c.accuracy()).collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&fold_accuracies);
    let ssl = method.protocol() == Protocol::SemiSupervised;
    Ok(CvResult {
        method: method.name().to_string(),
        recipe: stacks[0].recipe.to_string(),
        fold_accuracies,
        mean,
        std,
        confusions,
        label_rate: ssl.then_some(opts.label_rate),
        ssl_score: ssl.then_some(opts.ssl_score),
        dict_per_fold: stacks.len() > 1,
        pca_per_fold: opts.pca_per_fold.is_some(),
    })
}

pub const DEFAULT_LABEL_RATES: [f64; 6] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
    /// False when `p` is too small to reveal one sample of every class.
    pub valid: bool,
}

/// For every label rate and repetition, reveal a stratified `pN` subset;
/// supervised methods train on it alone, propagation methods use it as the
/// labelled set on the full graph. Both are scored on the remaining nodes.
pub fn label_rate_sweep(
    stack: &FingerprintStack,
    labels: &[usize],
    n_classes: usize,
    rates: &[f64],
    methods: &[Method],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if repetitions == 0 {
        return Err(Error::invalid("the sweep needs at least one repetition"));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut graphs: Vec<(usize, LabeledGraph)> = Vec::new();
    for m in methods {
        if let Method::Laplace { knn } | Method::Poisson { knn } = m {
            if !graphs.iter().any(|(k, _)| k == knn) {
                graphs.push((*knn, knn_graph(stack, *knn)?));
            }
        }
    }
    let mut rows = Vec::new();
    for &p in rates {
        let subsets: Vec<Option<Vec<usize>>> = (0..repetitions)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(seed, r));
                stratified_subset(&all, labels, n_classes, p, &mut rng).ok()
            })
            .collect();
        let valid = subsets.iter().all(Option::is_some);
        for m in methods {
            if !valid {
                rows.push(SweepRow {
                    p,
                    method: m.name().into(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    accuracies: vec![],
                    valid: false,
                });
                continue;
            }
            let accs = subsets
                .par_iter()
                .enumerate()
                .map(|(r, sub)| {
                    let sub = sub.as_ref().expect("validated above");
                    let rest: Vec<usize> = all.iter().copied().filter(|i| sub.binary_search(i).is_err()).collect();
                    if rest.is_empty() {
                        return Err(Error::invalid(format!("label rate {p} leaves nothing to score")));
                    }
                    let pred: Vec<usize> = match m.protocol() {
                        Protocol::Supervised => fit_predict(m, stack, labels, n_classes, sub, &rest, fold_seed(seed, r))?,
                        Protocol::SemiSupervised => {
                            let knn = match m {
                                Method::Laplace { knn } | Method::Poisson { knn } => *knn,
                                _ => unreachable!(),
                            };
                            let g = &graphs.iter().find(|(k, _)| *k == knn).expect("built above").1;
                            let full = propagate(m, g, labels, n_classes, sub)?;
                            rest.iter().map(|&i| full[i]).collect()
                        }
                        Protocol::Unsupervised => {
                            return Err(Error::invalid(format!("{} uses no labels and cannot be swept", m.name())))
                        }
                    };
                    let truth: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
                    ConfusionMatrix::from_labels(&truth, &pred, n_classes)?.accuracy()
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&accs);
            rows.push(SweepRow {
                p,
                method: m.name().into(),
                mean,
                std,
                accuracies: accs,
                valid: true,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["p", "method", "mean_acc", "std_acc", "n_reps", "valid"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.p.to_string(),
            r.method.clone(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
            r.accuracies.len().to_string(),
            r.valid.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `results.csv` header.
pub const RESULTS_HEADER: &str = "recipe,method,p,mean_acc,std_acc,seed,dict_per_fold,pca_per_fold,ssl_score";

pub fn write_results_csv(results: &[CvResult], seed: u64, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        let quoted = format!("\"{}\"", r.recipe.replace('"', "\"\""));
        out.push_str(&format!(
            "{quoted},{},{},{:.6},{:.6},{seed},{},{},{}\n",
            r.method,
            r.label_rate.map(|p| p.to_string()).unwrap_or_default(),
            r.mean,
            r.std,
            r.dict_per_fold,
            r.pca_per_fold,
            r.ssl_score.map(|s| s.to_string()).unwrap_or_default()
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
