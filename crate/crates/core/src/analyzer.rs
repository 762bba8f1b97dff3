//! Feature selection and grouping ahead of joint leakage estimation.
//!
//! Features are ranked by individual leakage, redundant ones (NMI above a
//! threshold with a better-ranked feature) are pruned greedily, the top `n`
//! survivors are kept, and DBSCAN on `1 - NMI` splits them into groups that
//! are treated as independent given the website.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{Category, FeatureTable, FEATURE_COUNT};
use crate::infotheory::{DiscreteDistribution, DiscretizedFeatures, PairwiseNmi};
use crate::quantifier::{individual_leakage, McConfig, QuantError};

pub const DEFAULT_TOP_N: usize = 100;
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: usize,
    pub bits: f64,
    pub stderr: f64,
    /// Set when the estimate failed; such features rank last.
    pub error: Option<String>,
}

/// Individual leakages, highest first; ties broken by feature index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRanking {
    entries: Vec<RankedFeature>,
}

impl LeakageRanking {
    pub fn new(mut entries: Vec<RankedFeature>) -> Self {
        entries.sort_by(|a, b| {
            a.error
                .is_some()
                .cmp(&b.error.is_some())
                .then(b.bits.total_cmp(&a.bits))
                .then(a.feature.cmp(&b.feature))
        });
        LeakageRanking { entries }
    }

    pub fn entries(&self) -> &[RankedFeature] {
        &self.entries
    }

    /// Features with a successful estimate, in rank order.
    pub fn order(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.error.is_none())
            .map(|e| e.feature)
            .collect()
    }
}

/// Closed-world leakage of each listed feature on its own.
pub fn rank_features(
    table: &FeatureTable,
    features: &[usize],
    prior: &DiscreteDistribution,
    mc: McConfig,
    beta: usize,
) -> LeakageRanking {
    let entries = features
        .par_iter()
        .map(|&f| match individual_leakage(table, f, prior, mc, beta) {
            Ok(e) => RankedFeature {
                feature: f,
                bits: e.bits,
                stderr: e.mc_standard_error,
                error: None,
            },
            Err(e) => RankedFeature {
                feature: f,
                bits: 0.0,
                stderr: 0.0,
                error: Some(e.to_string()),
            },
        })
        .collect();
    LeakageRanking::new(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pruned {
    pub kept: Vec<usize>,
    /// `(dropped, keeper)` pairs.
    pub pruned: Vec<(usize, usize)>,
}

/// Greedy scan over `order`: a feature is dropped when its NMI with an
/// already kept feature exceeds `threshold`, the first such feature being
/// its keeper. Stops once `limit` features are kept.
pub fn prune_redundant(order: &[usize], nmi: &impl PairwiseNmi, threshold: f64, limit: Option<usize>) -> Pruned {
    let mut kept: Vec<usize> = Vec::new();
    let mut pruned = Vec::new();
    for &f in order {
        if limit.is_some_and(|l| kept.len() >= l) {
            break;
        }
        match kept.iter().find(|&&k| nmi.nmi(f, k) > threshold) {
            Some(&keeper) => pruned.push((f, keeper)),
            None => kept.push(f),
        }
    }
    Pruned { kept, pruned }
}

/// DBSCAN over `n` points. A point's neighbourhood is every point at
/// distance strictly below `eps`, itself included; points with at least
/// `min_pts` neighbours are core. Returns each point's cluster, `None` for
/// noise. Clusters are numbered in order of their first point.
pub fn dbscan(n: usize, eps: f64, min_pts: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let neighbours = |p: usize| -> Vec<usize> { (0..n).filter(|&q| q == p || dist(p, q) < eps).collect() };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        let hood = neighbours(p);
        if hood.len() < min_pts {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[p] = Some(cluster);
        let mut queue = hood;
        while let Some(q) = queue.pop() {
            if labels[q].is_none() {
                labels[q] = Some(cluster);
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let hood = neighbours(q);
            if hood.len() >= min_pts {
                queue.extend(hood);
            }
        }
    }
    labels
}

/// DBSCAN with `min_pts = 1` on a distance matrix: every feature lands in
/// a cluster, singletons included. Returns row positions per cluster.
pub fn cluster_features(distance: &[Vec<f64>], eps: f64) -> Vec<Vec<usize>> {
    let labels = dbscan(distance.len(), eps, 1, |i, j| distance[i][j]);
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut clusters = vec![Vec::new(); count];
    for (i, l) in labels.iter().enumerate() {
        clusters[l.expect("min_pts = 1 leaves no noise")].push(i);
    }
    clusters
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrouping {
    pub kept_features: Vec<usize>,
    pub pruned_redundant: Vec<(usize, usize)>,
    pub clusters: Vec<Vec<usize>>,
}

impl FeatureGrouping {
    /// Clusters are disjoint, cover the kept set, and every pruned feature
    /// has one keeper among the kept ones.
    pub fn is_consistent(&self) -> bool {
        let mut members: Vec<usize> = self.clusters.iter().flatten().copied().collect();
        members.sort_unstable();
        let mut kept = self.kept_features.clone();
        kept.sort_unstable();
        let mut dropped: Vec<usize> = self.pruned_redundant.iter().map(|p| p.0).collect();
        dropped.sort_unstable();
        members == kept
            && dropped.windows(2).all(|w| w[0] != w[1])
            && self
                .pruned_redundant
                .iter()
                .all(|(_, k)| self.kept_features.contains(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    pub top_n: usize,
    pub prune_threshold: f64,
    pub eps: f64,
    pub beta: usize,
    pub mc: McConfig,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            top_n: DEFAULT_TOP_N,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            eps: DEFAULT_EPS,
            beta: crate::density::DEFAULT_BETA,
            mc: McConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: usize,
    pub name: String,
    pub kept: usize,
}

/// Everything the grouping stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub params: GroupingParams,
    pub grouping: FeatureGrouping,
    pub feature_names: Vec<String>,
    pub ranking: Vec<RankedFeature>,
    /// Features with the same value in every row.
    pub constant_features: Vec<usize>,
    /// Kept features per category; empty unless the table uses the full
    /// fingerprint layout.
    pub provenance: Vec<CategoryShare>,
    pub max_cross_cluster_nmi: f64,
    pub warnings: Vec<String>,
}

impl GroupingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Rank, prune, keep the top `n`, cluster.
pub fn build_grouping(
    table: &FeatureTable,
    prior: &DiscreteDistribution,
    params: GroupingParams,
) -> Result<GroupingReport, QuantError> {
    let columns: Vec<Vec<f64>> = (0..table.width()).into_par_iter().map(|f| table.column(f)).collect();
    let (constant, candidates): (Vec<usize>, Vec<usize>) =
        (0..table.width()).partition(|&f| columns[f].iter().all(|&v| v == columns[f][0]));
    if candidates.is_empty() {
        return Err(QuantError::Config("every feature is constant".into()));
    }
    let ranking = rank_features(table, &candidates, prior, params.mc, params.beta);
    let nmi = DiscretizedFeatures::new(&columns)?;
    let pruned = prune_redundant(&ranking.order(), &nmi, params.prune_threshold, Some(params.top_n));

    let mut warnings = Vec::new();
    if pruned.kept.len() < params.top_n {
        let msg = format!(
            "only {} features survive pruning (top_n = {})",
            pruned.kept.len(),
            params.top_n
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let failed: Vec<&RankedFeature> = ranking.entries().iter().filter(|e| e.error.is_some()).collect();
    if !failed.is_empty() {
        warnings.push(format!("{} features could not be estimated", failed.len()));
    }

    let matrix = nmi.matrix(&pruned.kept);
    let clusters: Vec<Vec<usize>> = cluster_features(&matrix.distance(), params.eps)
        .into_iter()
        .map(|c| c.into_iter().map(|i| pruned.kept[i]).collect())
        .collect();
    let mut max_cross = 0.0f64;
    for (a, ca) in clusters.iter().enumerate() {
        for cb in &clusters[a + 1..] {
            for &i in ca {
                for &j in cb {
                    max_cross = max_cross.max(nmi.nmi(i, j));
                }
            }
        }
    }
    let provenance = if table.width() == FEATURE_COUNT {
        Category::ALL
            .iter()
            .map(|&c| CategoryShare {
                category: c.index(),
                name: c.name().to_string(),
                kept: pruned.kept.iter().filter(|f| c.range().contains(f)).count(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(GroupingReport {
        params,
        grouping: FeatureGrouping {
            kept_features: pruned.kept,
            pruned_redundant: pruned.pruned,
            clusters,
        },
        feature_names: table.names().to_vec(),
        ranking: ranking.entries().to_vec(),
        constant_features: constant,
        provenance,
        max_cross_cluster_nmi: max_cross,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infotheory::NmiMatrix;

    fn matrix(n: usize, pairs: &[(usize, usize, f64)]) -> NmiMatrix {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        for &(i, j, x) in pairs {
            v[i * n + j] = x;
            v[j * n + i] = x;
        }
        NmiMatrix::from_values(n, v)
    }

    #[test]
    fn prune_duplicate() {
        // A, B = A, C independent of A
        let m = matrix(3, &[(0, 1, 1.0)]);
        let p = prune_redundant(&[0, 1, 2], &m, 0.9, None);
        assert_eq!(p.kept, vec![0, 2]);
        assert_eq!(p.pruned, vec![(1, 0)]);
        let p = prune_redundant(&[0, 1, 2], &m, 1.0, None);
        assert!(p.pruned.is_empty());
    }

    #[test]
    fn prune_chain_is_greedy() {
        let m = matrix(3, &[(0, 1, 0.95), (1, 2, 0.95), (0, 2, 0.0)]);
        let p = prune_redundant(&[0, 1, 2], &m, 0.9, None);
        assert_eq!(p.kept, vec![0, 2]);
        assert_eq!(p.pruned, vec![(1, 0)]);
        assert_eq!(prune_redundant(&[0, 1, 2], &m, 0.9, Some(1)).kept, vec![0]);
    }

    #[test]
    fn clusters_from_blocks() {
        let n = 6;
        let mut d = vec![vec![0.95; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                if i == j {
                    *x = 0.0;
                } else if (i < 3) == (j < 3) {
                    *x = 0.2;
                }
            }
        }
        assert_eq!(cluster_features(&d, 0.4), vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let far = vec![vec![0.0, 0.5], vec![0.5, 0.0]];
        assert_eq!(cluster_features(&far, 0.4), vec![vec![0], vec![1]]);
    }

    #[test]
    fn chained_reachability() {
        let d = vec![vec![0.0, 0.3, 0.9], vec![0.3, 0.0, 0.3], vec![0.9, 0.3, 0.0]];
        assert_eq!(cluster_features(&d, 0.4), vec![vec![0, 1, 2]]);
        // Boundary distance is not a neighbour.
        let d = vec![vec![0.0, 0.4], vec![0.4, 0.0]];
        assert_eq!(cluster_features(&d, 0.4).len(), 2);
    }

    #[test]
    fn dbscan_marks_noise_with_larger_min_pts() {
        let pts: [f64; 4] = [0.0, 0.1, 0.2, 5.0];
        let labels = dbscan(4, 0.15, 2, |i, j| (pts[i] - pts[j]).abs());
        assert_eq!(labels, vec![Some(0), Some(0), Some(0), None]);
    }

    #[test]
    fn ranking_order_and_ties() {
        let r = LeakageRanking::new(vec![
            RankedFeature {
                feature: 3,
                bits: 1.0,
                stderr: 0.0,
                error: None,
            },
            RankedFeature {
                feature: 1,
                bits: 1.0,
                stderr: 0.0,
                error: None,
            },
            RankedFeature {
                feature: 0,
                bits: 0.0,
                stderr: 0.0,
                error: Some("x".into()),
            },
            RankedFeature {
                feature: 2,
                bits: 2.0,
                stderr: 0.0,
                error: None,
            },
        ]);
        assert_eq!(r.order(), vec![2, 1, 3]);
        assert_eq!(r.entries()[3].feature, 0);
    }
}
