//! k-means over weighted resource distances, Dunn-index model selection,
//! capacity ordering and compaction of clusters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resources::{
    weighted_sq_distance, DistanceMatrix, NormalizedResourceVector, ResourceWeights,
};
use crate::seed;

/// Assignment of participants to `k` nonempty clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    k: usize,
    assignment: Vec<usize>,
}

impl Partition {
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidPartition(format!(
                "k must be at least 2, got {k}"
            )));
        }
        let mut sizes = vec![0usize; k];
        for &c in &assignment {
            if c >= k {
                return Err(Error::InvalidPartition(format!(
                    "cluster index {c} out of range for k={k}"
                )));
            }
            sizes[c] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!(
                "cluster {empty} has no members"
            )));
        }
        Ok(Self { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Rebuilds a partition from member lists, dropping none.
    fn from_clusters(clusters: &[Vec<usize>], n: usize) -> Result<Self> {
        let mut assignment = vec![usize::MAX; n];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                assignment[i] = c;
            }
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::InvalidPartition(
                "participant left unassigned".into(),
            ));
        }
        Self::new(clusters.len(), assignment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            max_iter: 300,
        }
    }
}

/// Outcome of the best k-means restart.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Vec<[f64; 3]>,
    /// Within-cluster sum of weighted squared distances.
    pub objective: f64,
    pub restart: usize,
    /// Objective after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

pub fn kmeans(
    points: &[NormalizedResourceVector],
    k: usize,
    w: &ResourceWeights,
    seed: u64,
) -> Result<Partition> {
    Ok(kmeans_with(points, k, w, seed, &KMeansOptions::default())?.partition)
}

/// Lloyd's algorithm with k-means++ seeding, best of `opts.restarts` by
/// objective (ties go to the earlier restart).
pub fn kmeans_with(
    points: &[NormalizedResourceVector],
    k: usize,
    w: &ResourceWeights,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<KMeansResult> {
    let n = points.len();
    if k < 2 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let xs: Vec<[f64; 3]> = points.iter().map(|p| p.components()).collect();
    let mut best: Option<KMeansResult> = None;
    for restart in 0..opts.restarts.max(1) {
        let run = lloyd(&xs, k, w, seed, restart, opts.max_iter);
        let better = match &best {
            None => true,
            Some(b) => run.objective.total_cmp(&b.objective).is_lt(),
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(best)
}

fn lloyd(
    xs: &[[f64; 3]],
    k: usize,
    w: &ResourceWeights,
    seed: u64,
    restart: usize,
    max_iter: usize,
) -> KMeansResult {
    let mut rng = seed::rng(seed, &[seed::KMEANS, k as u64, restart as u64]);
    let n = xs.len();
    let mut centroids = kmeans_plus_plus(xs, k, w, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = xs.iter().map(|x| nearest(x, &centroids, w).0).collect();
        repair_empty_clusters(xs, &mut next, &centroids, k, w);
        let changed = next != assignment;
        assignment = next;
        centroids = means(xs, &assignment, k);
        let objective = objective(xs, &assignment, &centroids, w);
        if let Some(&prev) = trace.last() {
            debug_assert!(
                objective <= prev + 1e-12,
                "k-means objective increased: {prev} -> {objective}"
            );
        }
        trace.push(objective);
        if !changed {
            break;
        }
    }
    KMeansResult {
        partition: Partition::new(k, assignment).expect("repair keeps every cluster nonempty"),
        centroids,
        objective: *trace.last().expect("at least one iteration"),
        restart,
        trace,
    }
}

fn kmeans_plus_plus(
    xs: &[[f64; 3]],
    k: usize,
    w: &ResourceWeights,
    rng: &mut impl Rng,
) -> Vec<[f64; 3]> {
    let n = xs.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = xs
        .iter()
        .map(|x| weighted_sq_distance(x, &xs[chosen[0]], w))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Guard against rounding landing on an already chosen point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // All remaining points coincide with a chosen centroid.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(pick);
        for (i, x) in xs.iter().enumerate() {
            d2[i] = d2[i].min(weighted_sq_distance(x, &xs[pick], w));
        }
    }
    chosen.iter().map(|&i| xs[i]).collect()
}

fn nearest(x: &[f64; 3], centroids: &[[f64; 3]], w: &ResourceWeights) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = weighted_sq_distance(x, centroid, w);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Moves, for every empty cluster, the point farthest from its current
/// centroid into that cluster. Donor clusters always keep one member.
fn repair_empty_clusters(
    xs: &[[f64; 3]],
    assignment: &mut [usize],
    centroids: &[[f64; 3]],
    k: usize,
    w: &ResourceWeights,
) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..xs.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .max_by(|&a, &b| {
                let da = weighted_sq_distance(&xs[a], &centroids[assignment[a]], w);
                let db = weighted_sq_distance(&xs[b], &centroids[assignment[b]], w);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a donor");
        assignment[donor] = empty;
    }
}

fn means(xs: &[[f64; 3]], assignment: &[usize], k: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (x, &c) in xs.iter().zip(assignment) {
        for d in 0..3 {
            sums[c][d] += x[d];
        }
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &cnt)| {
            let cnt = cnt.max(1) as f64;
            [s[0] / cnt, s[1] / cnt, s[2] / cnt]
        })
        .collect()
}

fn objective(
    xs: &[[f64; 3]],
    assignment: &[usize],
    centroids: &[[f64; 3]],
    w: &ResourceWeights,
) -> f64 {
    xs.iter()
        .zip(assignment)
        .map(|(x, &c)| weighted_sq_distance(x, &centroids[c], w))
        .sum()
}

/// Smallest pairwise distance between two disjoint member sets.
pub fn cluster_distance(cf: &[usize], cg: &[usize], s: &DistanceMatrix) -> Result<f64> {
    if cf.is_empty() || cg.is_empty() {
        return Err(Error::InvalidPartition(
            "cluster distance needs nonempty sets".into(),
        ));
    }
    if cf.iter().any(|i| cg.contains(i)) {
        return Err(Error::InvalidPartition("clusters overlap".into()));
    }
    let mut best = f64::INFINITY;
    for &i in cf {
        for &j in cg {
            best = best.min(s.get(i, j));
        }
    }
    Ok(best)
}

/// Largest pairwise distance inside a member set; 0 for a singleton.
pub fn cluster_diameter(cf: &[usize], s: &DistanceMatrix) -> f64 {
    let mut best: f64 = 0.0;
    for (a, &i) in cf.iter().enumerate() {
        for &j in &cf[a + 1..] {
            best = best.max(s.get(i, j));
        }
    }
    best
}

/// Minimum inter-cluster distance divided by the maximum cluster diameter.
pub fn dunn_index(p: &Partition, s: &DistanceMatrix) -> Result<f64> {
    if p.len() != s.len() {
        return Err(Error::Shape(format!(
            "partition covers {} participants, distance matrix {}",
            p.len(),
            s.len()
        )));
    }
    let clusters = p.clusters();
    let max_diameter = clusters
        .iter()
        .map(|c| cluster_diameter(c, s))
        .fold(0.0, f64::max);
    if max_diameter == 0.0 {
        return Err(Error::InfiniteSeparation);
    }
    let mut min_distance = f64::INFINITY;
    for f in 0..clusters.len() {
        for g in (f + 1)..clusters.len() {
            min_distance = min_distance.min(cluster_distance(&clusters[f], &clusters[g], s)?);
        }
    }
    Ok(min_distance / max_diameter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DunnPoint {
    pub k: usize,
    /// `None` when every cluster at this `k` has zero diameter.
    pub dunn_index: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    pub k: usize,
    pub partition: Partition,
    pub curve: Vec<DunnPoint>,
}

/// Largest `k` with `k * k <= n`.
pub fn k_max(n: usize) -> usize {
    let mut k = (n as f64).sqrt() as usize;
    while k * k > n {
        k -= 1;
    }
    while (k + 1) * (k + 1) <= n {
        k += 1;
    }
    k
}

/// Evaluates k = 2..=floor(sqrt(N)) and keeps the k with the largest
/// Dunn index; ties go to the smaller k.
pub fn optimal_clusters(
    points: &[NormalizedResourceVector],
    w: &ResourceWeights,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<ClusterSelection> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidPopulation(format!(
            "need at least 4 participants to select a cluster count, got {n}"
        )));
    }
    let s = DistanceMatrix::from_points(points, w);
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Partition)> = None;
    for k in 2..=k_max(n) {
        let partition = kmeans_with(points, k, w, seed, opts)?.partition;
        let di = match dunn_index(&partition, &s) {
            Ok(v) => Some(v),
            Err(Error::InfiniteSeparation) => None,
            Err(e) => return Err(e),
        };
        curve.push(DunnPoint { k, dunn_index: di });
        if let Some(v) = di {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, k, partition));
            }
        }
    }
    let (_, k, partition) = best.ok_or(Error::DegeneratePopulation { k_max: k_max(n) })?;
    Ok(ClusterSelection {
        k,
        partition,
        curve,
    })
}

/// Mean normalized vector of every cluster.
pub fn cluster_centroids(p: &Partition, points: &[NormalizedResourceVector]) -> Vec<[f64; 3]> {
    let xs: Vec<[f64; 3]> = points.iter().map(|v| v.components()).collect();
    means(&xs, p.assignment(), p.k())
}

/// Mean capacity score of each cluster.
pub fn cluster_capacity(
    p: &Partition,
    points: &[NormalizedResourceVector],
    w: &ResourceWeights,
) -> Vec<f64> {
    p.clusters()
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|&i| points[i].capacity_score(w))
                .sum::<f64>()
                / members.len() as f64
        })
        .collect()
}

/// Relabels clusters so that cluster 0 has the highest mean capacity.
pub fn order_by_capacity(
    p: &Partition,
    points: &[NormalizedResourceVector],
    w: &ResourceWeights,
) -> Partition {
    let capacity = cluster_capacity(p, points, w);
    let clusters = p.clusters();
    let mut order: Vec<usize> = (0..p.k()).collect();
    order.sort_by(|&a, &b| {
        capacity[b]
            .total_cmp(&capacity[a])
            .then(clusters[a][0].cmp(&clusters[b][0]))
    });
    let ordered: Vec<Vec<usize>> = order.iter().map(|&c| clusters[c].clone()).collect();
    Partition::from_clusters(&ordered, p.len()).expect("relabeling preserves membership")
}

/// Merges capacity-adjacent clusters until `m` remain. At every step the
/// adjacent pair with the closest centroids merges (earliest pair on ties).
///
/// The input must already be ordered by capacity; since a merged centroid
/// lies between its parts, the order survives every merge.
pub fn compact_clusters(
    p: &Partition,
    m: usize,
    points: &[NormalizedResourceVector],
    w: &ResourceWeights,
) -> Result<Partition> {
    if m < 2 || m >= p.k() {
        return Err(Error::InvalidCompaction { k: p.k(), m });
    }
    let mut clusters = p.clusters();
    while clusters.len() > m {
        let tmp = Partition::from_clusters(&clusters, p.len())?;
        let centroids = cluster_centroids(&tmp, points);
        let (merge_at, _) = (0..clusters.len() - 1)
            .map(|f| (f, weighted_sq_distance(&centroids[f], &centroids[f + 1], w)))
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            );
        let absorbed = clusters.remove(merge_at + 1);
        clusters[merge_at].extend(absorbed);
        clusters[merge_at].sort_unstable();
    }
    Partition::from_clusters(&clusters, p.len())
}
