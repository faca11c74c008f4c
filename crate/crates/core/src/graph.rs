//! Weighted kNN graph and its label-intersected fuzzy simplicial set.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EmbedConfig;
use crate::error::{AvError, Result};

/// Binary-search iterations for the bandwidth.
const CALIBRATION_ITERS: usize = 64;
const CALIBRATION_TOL: f64 = 1e-5;
/// Lower bound on sigma relative to the mean neighbor distance.
const MIN_SIGMA_SCALE: f64 = 1e-3;
/// Absolute lower bound, only reached when every neighbor distance is zero.
pub const MIN_SIGMA: f64 = 1e-12;
/// Edges lighter than this are dropped after label intersection.
pub const PRUNE_THRESHOLD: f64 = 1e-8;

/// Exact k nearest neighbors of every point, sorted by (distance, index).
#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl KnnIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn select_nearest<V: AsRef<[f64]>>(
    query: &[f64],
    reference: &[V],
    k: usize,
    exclude: Option<usize>,
) -> Vec<(f64, usize)> {
    let mut cand: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .filter(|&(j, _)| Some(j) != exclude)
        .map(|(j, r)| (euclidean(query, r.as_ref()), j))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    cand
}

fn check_dims<V: AsRef<[f64]>>(points: &[V], dim: usize, what: &str) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if p.as_ref().len() != dim {
            return Err(AvError::shape(format!(
                "{what} row {i} has dimension {}, expected {dim}",
                p.as_ref().len()
            )));
        }
    }
    Ok(())
}

/// Brute-force kNN over the point set itself; a point is never its own
/// neighbor.
pub fn knn_exact<V: AsRef<[f64]> + Sync>(points: &[V], k: usize) -> Result<KnnIndex> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(AvError::input(format!(
            "k_neighbors = {k} must satisfy 0 < k < n = {n}"
        )));
    }
    check_dims(points, points[0].as_ref().len(), "feature")?;
    let rows: Vec<Vec<(f64, usize)>> = (0..n)
        .into_par_iter()
        .map(|i| select_nearest(points[i].as_ref(), points, k, Some(i)))
        .collect();
    Ok(flatten(rows, k))
}

/// kNN of each query against a separate reference set.
pub fn knn_query<Q, V>(queries: &[Q], reference: &[V], k: usize) -> Result<KnnIndex>
where
    Q: AsRef<[f64]> + Sync,
    V: AsRef<[f64]> + Sync,
{
    if k == 0 || k > reference.len() {
        return Err(AvError::input(format!(
            "k_neighbors = {k} must satisfy 0 < k <= {} reference points",
            reference.len()
        )));
    }
    let dim = reference[0].as_ref().len();
    check_dims(reference, dim, "reference")?;
    check_dims(queries, dim, "query")?;
    let rows: Vec<Vec<(f64, usize)>> = queries
        .par_iter()
        .map(|q| select_nearest(q.as_ref(), reference, k, None))
        .collect();
    Ok(flatten(rows, k))
}

fn flatten(rows: Vec<Vec<(f64, usize)>>, k: usize) -> KnnIndex {
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut distances = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for (d, j) in row {
            indices.push(j);
            distances.push(d);
        }
    }
    KnnIndex { k, indices, distances }
}

/// Local connectivity offset and bandwidth of one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rho: f64,
    pub sigma: f64,
    /// True when the search result was raised to the sigma floor.
    pub floored: bool,
}

impl Calibration {
    /// Membership strength of a neighbor at distance `d`.
    #[inline]
    pub fn membership(&self, d: f64) -> f64 {
        let excess = d - self.rho;
        if excess <= 0.0 {
            1.0
        } else {
            (-excess / self.sigma).exp()
        }
    }
}

pub fn sigma_floor(distances: &[f64]) -> f64 {
    let mean = if distances.is_empty() {
        0.0
    } else {
        distances.iter().sum::<f64>() / distances.len() as f64
    };
    (MIN_SIGMA_SCALE * mean).max(MIN_SIGMA)
}

/// Solves for sigma with `sum_j exp(-max(0, d_j - rho) / sigma) = log2(k)`.
pub fn smooth_knn_calibrate(distances: &[f64], k: usize) -> Calibration {
    let rho = distances.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let target = (k as f64).log2();
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..CALIBRATION_ITERS {
        let psum: f64 = distances
            .iter()
            .map(|&d| {
                let excess = d - rho;
                if excess > 0.0 {
                    (-excess / mid).exp()
                } else {
                    1.0
                }
            })
            .sum();
        if (psum - target).abs() < CALIBRATION_TOL {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    let floor = sigma_floor(distances);
    if mid < floor {
        Calibration {
            rho,
            sigma: floor,
            floored: true,
        }
    } else {
        Calibration {
            rho,
            sigma: mid,
            floored: false,
        }
    }
}

pub fn calibrate_all(index: &KnnIndex) -> Vec<Calibration> {
    (0..index.len())
        .into_par_iter()
        .map(|i| smooth_knn_calibrate(index.distances(i), index.k()))
        .collect()
}

/// A weighted edge `i -> j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Directed memberships `w_{i->j}` for every kNN entry, in index order.
pub fn fuzzy_memberships(index: &KnnIndex, calibrations: &[Calibration]) -> Vec<Edge> {
    let mut out = Vec::with_capacity(index.len() * index.k());
    for (i, cal) in calibrations.iter().enumerate().take(index.len()) {
        for (&j, &d) in index.neighbors(i).iter().zip(index.distances(i)) {
            out.push(Edge {
                i,
                j,
                w: cal.membership(d),
            });
        }
    }
    out
}

/// Symmetric weighted graph over `n` points. Every undirected edge is stored
/// in both directions with bit-identical weights, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<Edge>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FuzzyGraph {
    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&(i, j)))
            .ok()
            .map(|p| self.edges[p].w)
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.edges.len() / 2
    }
}

/// Fuzzy union `a + b - a*b` of the two directed memberships of each pair.
pub fn symmetrize(n: usize, directed: &[Edge], calibrations: &[Calibration]) -> FuzzyGraph {
    let mut pairs: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for e in directed {
        if e.i == e.j || e.w <= 0.0 {
            continue;
        }
        let key = (e.i.min(e.j), e.i.max(e.j));
        let slot = pairs.entry(key).or_insert((0.0, 0.0));
        if e.i < e.j {
            slot.0 = e.w;
        } else {
            slot.1 = e.w;
        }
    }
    let mut edges = Vec::with_capacity(pairs.len() * 2);
    for ((i, j), (a, b)) in pairs {
        let w = fuzzy_union(a, b);
        if w > 0.0 {
            edges.push(Edge { i, j, w });
            edges.push(Edge { i: j, j: i, w });
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    FuzzyGraph {
        n,
        edges,
        rho: calibrations.iter().map(|c| c.rho).collect(),
        sigma: calibrations.iter().map(|c| c.sigma).collect(),
    }
}

#[inline]
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    a + b - a * b
}

/// Multiplier applied to an edge based on its endpoint labels.
pub fn label_factor(a: Option<&str>, b: Option<&str>, far_dist: f64, unknown_dist: f64) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) if x == y => 1.0,
        (Some(_), Some(_)) => (-far_dist).exp(),
        _ => (-unknown_dist).exp(),
    }
}

/// Down-weights edges joining different (or unknown) labels and prunes the
/// edges that fall below [`PRUNE_THRESHOLD`].
pub fn label_intersect<S: AsRef<str>>(
    graph: &FuzzyGraph,
    labels: &[Option<S>],
    far_dist: f64,
    unknown_dist: f64,
) -> Result<FuzzyGraph> {
    if labels.len() != graph.n {
        return Err(AvError::shape(format!(
            "{} labels for a graph over {} points",
            labels.len(),
            graph.n
        )));
    }
    let label = |i: usize| labels[i].as_ref().map(|s| s.as_ref());
    let edges = graph
        .edges
        .iter()
        .filter_map(|e| {
            let w = e.w * label_factor(label(e.i), label(e.j), far_dist, unknown_dist);
            (w >= PRUNE_THRESHOLD).then_some(Edge { w, ..*e })
        })
        .collect();
    Ok(FuzzyGraph { edges, ..graph.clone() })
}

/// kNN, calibration, fuzzy union and label intersection in one call.
pub fn build_graph<V, S>(points: &[V], labels: &[Option<S>], config: &EmbedConfig) -> Result<FuzzyGraph>
where
    V: AsRef<[f64]> + Sync,
    S: AsRef<str>,
{
    let index = knn_exact(points, config.k_neighbors)?;
    let cal = calibrate_all(&index);
    let directed = fuzzy_memberships(&index, &cal);
    let graph = symmetrize(points.len(), &directed, &cal);
    label_intersect(&graph, labels, config.far_dist, config.unknown_dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_knn() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let idx = knn_exact(&pts, 1).unwrap();
        assert_eq!(idx.neighbors(0), &[1]);
        assert_eq!(idx.neighbors(1), &[0]);
        assert_eq!(idx.neighbors(2), &[1]);
        assert_eq!(idx.distances(2), &[9.0]);
    }

    #[test]
    fn duplicates_keep_zero_distance_but_exclude_self() {
        let pts = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 1.0]];
        let idx = knn_exact(&pts, 2).unwrap();
        assert_eq!(idx.neighbors(0), &[1, 2]);
        assert_eq!(idx.neighbors(1), &[0, 2]);
        assert_eq!(idx.distances(1), &[0.0, 0.0]);
    }

    #[test]
    fn knn_preconditions() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(knn_exact(&pts, 2).is_err());
        assert!(knn_exact(&pts, 0).is_err());
        let ragged = vec![vec![0.0], vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(knn_exact(&ragged, 1), Err(AvError::Shape(_))));
    }

    #[test]
    fn calibration_closed_form() {
        // 1 + t + t^2 = log2(3) with t = exp(-1/sigma).
        let c = log2_3_minus_1();
        let t = (-1.0 + (1.0 + 4.0 * c).sqrt()) / 2.0;
        let sigma = -1.0 / t.ln();
        let cal = smooth_knn_calibrate(&[1.0, 2.0, 3.0], 3);
        assert_eq!(cal.rho, 1.0);
        assert!(!cal.floored);
        assert!((cal.sigma - sigma).abs() < 1e-4, "{} vs {sigma}", cal.sigma);
        assert!((cal.sigma - 1.133_193).abs() < 1e-4);
        assert!((cal.sigma - 1.1334).abs() < 1e-3);
    }

    fn log2_3_minus_1() -> f64 {
        3f64.log2() - 1.0
    }

    #[test]
    fn equal_distances_hit_the_floor() {
        let d = [0.7; 5];
        let cal = smooth_knn_calibrate(&d, 5);
        assert_eq!(cal.rho, 0.7);
        assert!(cal.floored);
        assert_eq!(cal.sigma, sigma_floor(&d));
        assert!(d.iter().all(|&x| cal.membership(x) == 1.0));
    }

    #[test]
    fn all_zero_distances() {
        let d = [0.0; 4];
        let cal = smooth_knn_calibrate(&d, 4);
        assert_eq!(cal.rho, 0.0);
        assert!(cal.floored);
        assert_eq!(cal.sigma, MIN_SIGMA);
        assert!(d.iter().all(|&x| cal.membership(x) == 1.0));
    }

    #[test]
    fn membership_values() {
        let cal = Calibration {
            rho: 0.5,
            sigma: 0.25,
            floored: false,
        };
        assert_eq!(cal.membership(0.5), 1.0);
        assert!((cal.membership(0.75) - (-1f64).exp()).abs() < 1e-15);
        assert!((cal.membership(0.75) - 0.367_879).abs() < 1e-6);
    }

    #[test]
    fn fuzzy_union_rules() {
        assert_eq!(fuzzy_union(0.5, 0.5), 0.75);
        assert_eq!(fuzzy_union(1.0, 0.3), 1.0);
        assert_eq!(fuzzy_union(0.3, 0.0), 0.3);
    }

    fn two_edge_graph(w: f64) -> FuzzyGraph {
        FuzzyGraph {
            n: 2,
            edges: vec![Edge { i: 0, j: 1, w }, Edge { i: 1, j: 0, w }],
            rho: vec![0.0; 2],
            sigma: vec![1.0; 2],
        }
    }

    #[test]
    fn label_intersection_rules() {
        let g = two_edge_graph(0.8);
        let same = label_intersect(&g, &[Some("happy"), Some("happy")], 5.0, 1.0).unwrap();
        assert_eq!(same.weight(0, 1), Some(0.8));
        let diff = label_intersect(&g, &[Some("happy"), Some("sad")], 5.0, 1.0).unwrap();
        assert!((diff.weight(0, 1).unwrap() - 0.005_390_357_599_268_374).abs() < 1e-15);
        let unk = label_intersect(&g, &[Some("happy"), None], 5.0, 1.0).unwrap();
        assert!((unk.weight(1, 0).unwrap() - 0.294_303_552_937_153_9).abs() < 1e-15);

        let tiny = two_edge_graph(1e-6);
        let pruned = label_intersect(&tiny, &[Some("a"), Some("b")], 5.0, 1.0).unwrap();
        assert!(pruned.edges.is_empty());
    }
}
