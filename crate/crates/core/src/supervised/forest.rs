use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `⌈√n⌉`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 10_000,
            max_depth: 10,
            min_leaf: 1,
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Gini impurity `1 − Σ π_c²` of a class-count vector.
pub fn gini(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { class: usize, counts: Vec<usize> },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class, .. } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, at: usize) -> usize {
            match &t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_classes: usize,
    pub n: usize,
    pub params: ForestParams,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    rows: &'a [f64],
    n: usize,
    y: &'a [usize],
    n_classes: usize,
    mtry: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

impl Builder<'_> {
    fn x(&self, i: usize, f: usize) -> f64 {
        self.rows[i * self.n + f]
    }

    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Best `(weighted gini, feature, threshold)` over at least `mtry`
    /// non-constant features, visited in random order.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(f64, usize, f64)> {
        let mut features: Vec<usize> = (0..self.n).collect();
        features.shuffle(rng);
        let total = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut visited = 0;
        let mut order = idx.to_vec();
        for f in features {
            if visited >= self.mtry {
                break;
            }
            order.sort_by(|&a, &b| self.x(a, f).total_cmp(&self.x(b, f)).then(a.cmp(&b)));
            if self.x(order[0], f) == self.x(*order.last().unwrap(), f) {
                continue;
            }
            visited += 1;
            let mut left = vec![0usize; self.n_classes];
            let mut right = self.counts(&order);
            for pos in 1..order.len() {
                let moved = order[pos - 1];
                left[self.y[moved]] += 1;
                right[self.y[moved]] -= 1;
                let (lo, hi) = (self.x(moved, f), self.x(order[pos], f));
                if lo == hi || pos < self.min_leaf || order.len() - pos < self.min_leaf {
                    continue;
                }
                let score = (pos as f64 * gini(&left) + (order.len() - pos) as f64 * gini(&right)) / total;
                if best.is_none_or(|b| score < b.0) {
                    let mut t = lo + (hi - lo) / 2.0;
                    if t <= lo {
                        t = hi;
                    }
                    best = Some((score, f, t));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.counts(idx);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            class: majority(&counts),
            counts: counts.clone(),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return at;
        }
        let Some((_, feature, threshold)) = self.best_split(idx, rng) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x(i, feature) < threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn tree_seed(seed: u64, t: usize) -> u64 {
    // splitmix64 step so neighbouring tree indices get unrelated streams
    let mut z = seed.wrapping_add((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn forest_train(rows: &[f64], n: usize, y: &[usize], n_classes: usize, params: &ForestParams) -> Result<ForestModel> {
    let m = y.len();
    if m < 2 {
        return Err(Error::invalid("a random forest needs at least two samples"));
    }
    if n == 0 || rows.len() != m * n {
        return Err(Error::invalid("forest input rows do not match the label count"));
    }
    if params.n_trees == 0 || params.min_leaf == 0 {
        return Err(Error::invalid("n_trees and min_leaf must be positive"));
    }
    if let Some(bad) = y.iter().find(|&&v| v >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    let mtry = params.mtry.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(params.seed, t));
            let idx: Vec<usize> = if params.bootstrap {
                (0..m).map(|_| rng.random_range(0..m)).collect()
            } else {
                (0..m).collect()
            };
            let mut b = Builder {
                rows,
                n,
                y,
                n_classes,
                mtry,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
                nodes: Vec::new(),
            };
            b.grow(&idx, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        n_classes,
        n,
        params: *params,
        trees,
    })
}

impl ForestModel {
    /// Majority vote of the trees, ties to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: x.len(),
            });
        }
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        Ok(majority(&votes))
    }

    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<usize>> {
        rows.par_chunks_exact(self.n).map(|r| self.predict(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5, 0]), 0.0);
        assert_eq!(gini(&[3, 3]), 0.5);
        assert!((gini(&[1, 1, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_separable_stump() {
        let rows = [0.1, 0.4, 0.35, 0.8, 0.9, 0.7];
        let y = [0, 0, 0, 1, 1, 1];
        let p = ForestParams {
            n_trees: 1,
            max_depth: 1,
            bootstrap: false,
            ..Default::default()
        };
        let f = forest_train(&rows, 1, &y, 2, &p).unwrap();
        assert_eq!(f.trees[0].depth(), 1);
        assert_eq!(f.predict_rows(&rows).unwrap(), y.to_vec());
        match &f.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert!((threshold - 0.55).abs() < 1e-12),
            other => panic!("expected a split, got {other:?}"),
        }
    }

    #[test]
    fn identical_features_give_majority_stump() {
        let rows = [1.0; 5];
        let f = forest_train(&rows, 1, &[1, 1, 0, 1, 0], 2, &ForestParams { n_trees: 3, ..Default::default() }).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(f.predict(&[1.0]).unwrap(), f.trees[0].predict(&[1.0]));
        let nb = forest_train(&rows, 1, &[1, 1, 0, 1, 0], 2, &ForestParams { n_trees: 1, bootstrap: false, ..Default::default() }).unwrap();
        assert_eq!(nb.predict(&[1.0]).unwrap(), 1);
    }

    #[test]
    fn depth_and_leaf_limits_hold() {
        let rows: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let y: Vec<usize> = (0..100).map(|i| (i * 7 % 3) as usize).collect();
        let p = ForestParams {
            n_trees: 20,
            max_depth: 4,
            min_leaf: 3,
            seed: 9,
            ..Default::default()
        };
        let f = forest_train(&rows, 2, &y, 3, &p).unwrap();
        for t in &f.trees {
            assert!(t.depth() <= 4);
            for n in &t.nodes {
                if let Node::Leaf { counts, .. } = n {
                    assert!(counts.iter().sum::<usize>() >= 3);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_order_free() {
        let rows: Vec<f64> = (0..120).map(|i| ((i * 13) % 17) as f64 / 17.0).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let p = ForestParams { n_trees: 15, seed: 3, ..Default::default() };
        let a = forest_train(&rows, 3, &y, 2, &p).unwrap();
        let b = forest_train(&rows, 3, &y, 2, &p).unwrap();
        assert_eq!(a, b);
        let mut rev = a.clone();
        rev.trees.reverse();
        assert_eq!(a.predict_rows(&rows).unwrap(), rev.predict_rows(&rows).unwrap());
    }
}
