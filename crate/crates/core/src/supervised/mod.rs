//! Classifiers over fingerprint stacks.

pub mod forest;
pub mod svm;

pub use forest::{forest_train, gini, ForestModel, ForestParams};
pub use svm::{chi2_kernel, ecoc_train, gram, svm_train, EcocModel, Kernel, SvmModel};

use crate::cluster::{kmeans, KMeansParams};
use crate::error::Result;
use crate::fingerprint::FingerprintStack;

/// Unsupervised baseline: k-means directly on the fingerprints. Labels are
/// cluster indices, meaningful only up to permutation.
pub fn kmeans_classify(stack: &FingerprintStack, k_classes: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(&stack.values, stack.n, &KMeansParams::new(k_classes, seed))?.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::Recipe;

    fn stack(points: &[[f64; 2]]) -> FingerprintStack {
        FingerprintStack::from_rows(
            (0..points.len()).map(|i| i.to_string()).collect(),
            2,
            points.iter().flatten().copied().collect(),
            Recipe {
                descriptor: "t".into(),
                parts: vec![],
                reductions: vec![],
            },
        )
        .unwrap()
    }

    #[test]
    fn far_clouds_split_exactly() {
        let s = stack(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.2], [9.0, 9.0], [9.1, 9.0], [9.0, 8.8]]);
        let l = kmeans_classify(&s, 2, 1).unwrap();
        assert!(l[..3].iter().all(|&v| v == l[0]));
        assert!(l[3..].iter().all(|&v| v == l[3]));
        assert_ne!(l[0], l[3]);
    }

    /// Exhaustive search over all 2-partitions of 8 points for the minimum
    /// within-cluster sum of squares.
    #[test]
    fn eight_points_match_exhaustive_sse() {
        let pts = [[0.0, 0.0], [1.0, 0.5], [0.4, 1.2], [3.0, 3.1], [3.5, 2.4], [2.9, 4.0], [0.8, 0.1], [4.1, 3.3]];
        let sse = |mask: u32| {
            let mut total = 0.0;
            for side in [true, false] {
                let m: Vec<&[f64; 2]> = (0..8).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| &pts[i]).collect();
                if m.is_empty() {
                    continue;
                }
                let c = [m.iter().map(|p| p[0]).sum::<f64>() / m.len() as f64, m.iter().map(|p| p[1]).sum::<f64>() / m.len() as f64];
                total += m.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>();
            }
            total
        };
        let best = (1u32..255).filter(|m| m & 1 == 1).min_by(|&a, &b| sse(a).total_cmp(&sse(b))).unwrap();
        let l = kmeans_classify(&stack(&pts), 2, 4).unwrap();
        for i in 0..8 {
            assert_eq!(l[i] == l[0], best >> i & 1 == 1);
        }
    }
}
