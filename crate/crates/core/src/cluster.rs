//! 2-means over per-model contributions to the two leading components.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iva::IvaResult;
use crate::parafac2::Parafac2Result;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least 2 components, decomposition has {0}")]
    RankTooSmall(usize),

    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("all points are identical")]
    DegenerateInput,

    #[error("silhouette needs two non-empty clusters")]
    SingleCluster,

    #[error("{what}: expected {expected} entries, got {found}")]
    SizeMismatch { what: &'static str, expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Iva,
    Parafac2,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Iva => "iva",
            Method::Parafac2 => "parafac2",
        })
    }
}

/// Model `k`'s contribution to components 1 and 2.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionMatrix {
    pub points: Vec<[f64; 2]>,
    pub source_method: Method,
}

/// Rows of the loading matrix `Σ`, first two columns.
pub fn parafac2_contributions(result: &Parafac2Result) -> Result<ContributionMatrix, ClusterError> {
    if result.rank() < 2 {
        return Err(ClusterError::RankTooSmall(result.rank()));
    }
    let l = &result.loadings;
    Ok(ContributionMatrix {
        points: (0..l.nrows()).map(|k| [l[(k, 0)], l[(k, 1)]]).collect(),
        source_method: Method::Parafac2,
    })
}

/// Column 2-norms of the back-reconstructed `A^[k]` for the two most correlated SCVs.
pub fn iva_contributions(result: &IvaResult, mixing: &[DMatrix<f64>]) -> Result<ContributionMatrix, ClusterError> {
    if result.order() < 2 {
        return Err(ClusterError::RankTooSmall(result.order()));
    }
    if mixing.len() != result.datasets() {
        return Err(ClusterError::SizeMismatch {
            what: "mixing matrices",
            expected: result.datasets(),
            found: mixing.len(),
        });
    }
    let (c1, c2) = (result.scv_order[0], result.scv_order[1]);
    Ok(ContributionMatrix {
        points: mixing.iter().map(|a| [a.column(c1).norm(), a.column(c2).norm()]).collect(),
        source_method: Method::Iva,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 10,
            seed: 0,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub assignments: Vec<usize>,
    pub centroids: [[f64; 2]; 2],
    pub wcss: f64,
    pub mean_silhouette: f64,
    pub trojan_cluster: usize,
    /// Set when one cluster ended up empty.
    pub degenerate: bool,
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    dist2(a, b).sqrt()
}

/// Within-cluster sum of squares of an assignment, using cluster means.
pub fn wcss(points: &[[f64; 2]], assignments: &[usize]) -> f64 {
    let cents = centroids(points, assignments);
    points.iter().zip(assignments).map(|(p, &a)| dist2(p, &cents[a])).sum()
}

fn centroids(points: &[[f64; 2]], assignments: &[usize]) -> [[f64; 2]; 2] {
    let mut sum = [[0.0; 2]; 2];
    let mut count = [0usize; 2];
    for (p, &a) in points.iter().zip(assignments) {
        sum[a][0] += p[0];
        sum[a][1] += p[1];
        count[a] += 1;
    }
    for c in 0..2 {
        if count[c] > 0 {
            sum[c][0] /= count[c] as f64;
            sum[c][1] /= count[c] as f64;
        }
    }
    sum
}

fn plus_plus_seed(points: &[[f64; 2]], rng: &mut ChaCha8Rng) -> [[f64; 2]; 2] {
    let first = points[rng.random_range(0..points.len())];
    let weights: Vec<f64> = points.iter().map(|p| dist2(p, &first)).collect();
    let total: f64 = weights.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut second = points[points.len() - 1];
    for (p, w) in points.iter().zip(&weights) {
        if *w > 0.0 && pick < *w {
            second = *p;
            break;
        }
        pick -= w;
    }
    if dist2(&first, &second) == 0.0 {
        // Rounding left us on a duplicate; take the farthest point.
        let far = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        second = points[far];
    }
    [first, second]
}

fn lloyd(points: &[[f64; 2]], mut cents: [[f64; 2]; 2], max_iter: usize) -> (Vec<usize>, [[f64; 2]; 2]) {
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = if dist2(p, &cents[1]) < dist2(p, &cents[0]) { 1 } else { 0 };
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        let new = centroids(points, &assign);
        for c in 0..2 {
            if assign.contains(&c) {
                cents[c] = new[c];
            }
        }
        if !changed {
            break;
        }
    }
    (assign, cents)
}

fn mean_intra_distance(points: &[[f64; 2]], assignments: &[usize], cluster: usize) -> f64 {
    let members: Vec<&[f64; 2]> = points.iter().zip(assignments).filter(|(_, &a)| a == cluster).map(|(p, _)| p).collect();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            acc += dist(members[i], members[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}

/// Best-of-`restarts` Lloyd 2-means with k-means++ seeding.
///
/// `suspicion` (one score per point, higher = more suspicious) selects the
/// trojan cluster by its mean; without it, the tighter cluster is chosen.
pub fn kmeans2(points: &[[f64; 2]], suspicion: Option<&[f64]>, opts: &KMeansOptions) -> Result<ClusterReport, ClusterError> {
    if points.len() < 2 {
        return Err(ClusterError::TooFewPoints(points.len()));
    }
    if points.iter().all(|p| dist2(p, &points[0]) == 0.0) {
        return Err(ClusterError::DegenerateInput);
    }
    if let Some(s) = suspicion {
        if s.len() != points.len() {
            return Err(ClusterError::SizeMismatch {
                what: "suspicion scores",
                expected: points.len(),
                found: s.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<usize>, [[f64; 2]; 2])> = None;
    for _ in 0..opts.restarts.max(1) {
        let seeds = plus_plus_seed(points, &mut rng);
        let (assign, cents) = lloyd(points, seeds, opts.max_iter);
        let score = wcss(points, &assign);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, assign, cents));
        }
    }
    let (score, assignments, centroids) = best.expect("at least one restart");
    let degenerate = !(assignments.contains(&0) && assignments.contains(&1));
    let mean_silhouette = if degenerate { 0.0 } else { silhouette(points, &assignments)? };

    let trojan_cluster = match suspicion {
        Some(s) if !degenerate => {
            let mean = |c: usize| {
                let v: Vec<f64> = s.iter().zip(&assignments).filter(|(_, &a)| a == c).map(|(x, _)| *x).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if mean(1) > mean(0) {
                1
            } else {
                0
            }
        }
        _ => {
            if mean_intra_distance(points, &assignments, 1) < mean_intra_distance(points, &assignments, 0) {
                1
            } else {
                0
            }
        }
    };

    Ok(ClusterReport {
        assignments,
        centroids,
        wcss: score,
        mean_silhouette,
        trojan_cluster,
        degenerate,
    })
}

/// Mean silhouette with Euclidean distance; members of singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], assignments: &[usize]) -> Result<f64, ClusterError> {
    if points.len() != assignments.len() {
        return Err(ClusterError::SizeMismatch {
            what: "assignments",
            expected: points.len(),
            found: assignments.len(),
        });
    }
    let clusters: std::collections::BTreeSet<usize> = assignments.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = assignments[i];
        let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = std::collections::BTreeMap::new();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let e = sums.entry(assignments[j]).or_insert((0.0, 0));
            e.0 += dist(p, q);
            e.1 += 1;
        }
        let a = match sums.get(&own) {
            Some(&(s, n)) if n > 0 => s / n as f64,
            _ => continue,
        };
        let b = sums
            .iter()
            .filter(|(&c, _)| c != own)
            .map(|(_, &(s, n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
