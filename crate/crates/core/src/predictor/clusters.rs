//! Grouping of latent dimensions into expert clusters.
//!
//! Average-linkage agglomerative clustering of the discrimination columns
//! under the distance `1 − |r|`, where `r` is the Pearson correlation between
//! two dimensions across items.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::pearson;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Disjoint groups of dimension indices covering `0..D`. Each group is
    /// sorted, and groups are ordered by their smallest index.
    pub clusters: Vec<Vec<usize>>,
    pub method_report: ClusterReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub linkage: String,
    /// D×D absolute correlation matrix, row-major.
    pub abs_correlation: Vec<f64>,
    /// Dimensions whose column was constant; their correlations were taken as 0.
    pub constant_dims: Vec<usize>,
    /// Linkage distance of every merge, in merge order.
    pub merge_distances: Vec<f64>,
}

impl ClusterAssignment {
    pub fn dim(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn singletons(dim: usize) -> Self {
        Self {
            clusters: (0..dim).map(|d| vec![d]).collect(),
            method_report: ClusterReport {
                linkage: "none".into(),
                ..ClusterReport::default()
            },
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("cluster assignment is empty"));
        }
        let mut seen = vec![false; dim];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::invalid("empty cluster"));
            }
            for &d in c {
                if d >= dim || seen[d] {
                    return Err(Error::invalid(format!("dimension {d} is out of range or repeated")));
                }
                seen[d] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("clusters do not cover every dimension"));
        }
        Ok(())
    }
}

/// Clusters the `D` columns of `item_alphas` (one row per item) into `c`
/// groups. Ties go to the pair of clusters with the lowest smallest indices.
pub fn cluster_dimensions(item_alphas: &[Vec<f64>], c: usize) -> Result<ClusterAssignment> {
    if item_alphas.len() < 2 {
        return Err(Error::TooFew {
            what: "items for dimension clustering",
            minimum: 2,
            found: item_alphas.len(),
        });
    }
    let dim = item_alphas[0].len();
    if item_alphas.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid("ragged discrimination matrix"));
    }
    if c == 0 || c > dim {
        return Err(Error::invalid(format!("cluster count {c} must be in 1..={dim}")));
    }

    let columns: Vec<Vec<f64>> = (0..dim).map(|d| item_alphas.iter().map(|r| r[d]).collect()).collect();
    let constant: Vec<usize> = (0..dim)
        .filter(|&d| columns[d].iter().all(|&v| v == columns[d][0]))
        .collect();
    let mut corr = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            corr[i * dim + j] = if i == j {
                1.0
            } else {
                // pearson() already returns 0 for a zero-variance column
                pearson(&columns[i], &columns[j]).abs()
            };
        }
    }

    let mut clusters: Vec<Vec<usize>> = (0..dim).map(|d| vec![d]).collect();
    let mut merges = Vec::new();
    while clusters.len() > c {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += 1.0 - corr[i * dim + j];
                    }
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(bd, _, _)| avg < bd) {
                    best = Some((avg, a, b));
                }
            }
        }
        let (dist, a, b) = best.expect("at least two clusters");
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
        merges.push(dist);
    }
    clusters.sort_by_key(|c| c[0]);

    Ok(ClusterAssignment {
        clusters,
        method_report: ClusterReport {
            linkage: "average, 1 - |pearson|".into(),
            abs_correlation: corr,
            constant_dims: constant,
            merge_distances: merges,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<Vec<f64>> {
        // dims 0,1 identical; dims 2,3 identical; the two pairs uncorrelated
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, -1.0, -1.0, 1.0];
        (0..4).map(|k| vec![x[k], x[k], y[k], y[k]]).collect()
    }

    #[test]
    fn recovers_planted_pairs() {
        let a = cluster_dimensions(&rows(), 2).unwrap();
        assert_eq!(a.clusters, vec![vec![0, 1], vec![2, 3]]);
        a.validate(4).unwrap();
    }

    #[test]
    fn extremes() {
        let all = cluster_dimensions(&rows(), 1).unwrap();
        assert_eq!(all.clusters, vec![vec![0, 1, 2, 3]]);
        let single = cluster_dimensions(&rows(), 4).unwrap();
        assert_eq!(single.clusters, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn constant_column_is_reported() {
        let r: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, 2.0, (k * k) as f64]).collect();
        let a = cluster_dimensions(&r, 2).unwrap();
        assert_eq!(a.method_report.constant_dims, vec![1]);
        assert_eq!(a.clusters, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn bad_arguments() {
        assert!(cluster_dimensions(&rows()[..1], 1).is_err());
        assert!(cluster_dimensions(&rows(), 0).is_err());
        assert!(cluster_dimensions(&rows(), 5).is_err());
    }
}
