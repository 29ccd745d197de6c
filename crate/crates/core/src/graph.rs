//! K-nearest-neighbor graphs with Gaussian edge weights.
//!
//! Each point is connected to its `K` closest other points (squared
//! Euclidean distance, ties broken by ascending point index) with weight
//! `exp(-|p_i - p_j|^2)`. Voxels hold at most a few hundred points, so the
//! search is an exact all-pairs scan.

use crate::error::{PctError, Result};
use crate::pc_io::Point;

/// Default inception neighborhood sizes.
pub const DEFAULT_KS: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// Requested neighbor count (before clamping to `n - 1`).
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl Graph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors actually used per point: `min(k, n - 1)`.
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    /// Flattened edge list, grouped by target point then neighbor rank.
    pub fn edges(&self) -> EdgeList {
        let mut src = Vec::with_capacity(self.n() * self.degree());
        let mut dst = Vec::with_capacity(src.capacity());
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                src.push(j);
                dst.push(i);
            }
        }
        EdgeList {
            nodes: self.n(),
            src,
            dst,
        }
    }
}

/// Directed edges `src -> dst` over `nodes` points; message passing sums
/// contributions from `src` into `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// One graph per `K`, all over the same points.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub ks: Vec<usize>,
    pub graphs: Vec<Graph>,
}

#[inline]
pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For every point, its `kmax` nearest other points as `(index, squared distance)`
/// in ascending `(distance, index)` order.
fn ranked_neighbors(points: &[Point], kmax: usize) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    let keep = kmax.min(n.saturating_sub(1));
    let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(n);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            row.clear();
            row.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| (j, sq_dist(p, q))),
            );
            if keep == 0 {
                return Vec::new();
            }
            if keep < row.len() {
                row.select_nth_unstable_by(keep - 1, cmp);
            }
            let mut top = row[..keep].to_vec();
            top.sort_unstable_by(cmp);
            top
        })
        .collect()
}

fn graph_from_ranked(ranked: &[Vec<(usize, f64)>], k: usize) -> Graph {
    let mut neighbors = Vec::with_capacity(ranked.len());
    let mut weights = Vec::with_capacity(ranked.len());
    for row in ranked {
        let take = k.min(row.len());
        neighbors.push(row[..take].iter().map(|&(j, _)| j).collect());
        weights.push(row[..take].iter().map(|&(_, d)| (-d).exp()).collect());
    }
    Graph { k, neighbors, weights }
}

pub fn knn_graph(points: &[Point], k: usize) -> Result<Graph> {
    if points.is_empty() {
        return Err(PctError::Empty("knn_graph needs at least one point".into()));
    }
    if k == 0 {
        return Err(PctError::Config("neighbor count k must be at least 1".into()));
    }
    Ok(graph_from_ranked(&ranked_neighbors(points, k), k))
}

/// Builds the graph for every `K` in `ks` from a single all-pairs pass; each
/// graph is a prefix of the same ranked neighbor list, so smaller-K
/// neighborhoods nest inside larger ones.
pub fn build_graph_set(points: &[Point], ks: &[usize]) -> Result<GraphSet> {
    validate_ks(ks)?;
    if points.is_empty() {
        return Err(PctError::Empty("build_graph_set needs at least one point".into()));
    }
    let kmax = *ks.last().expect("validated non-empty");
    let ranked = ranked_neighbors(points, kmax);
    Ok(GraphSet {
        ks: ks.to_vec(),
        graphs: ks.iter().map(|&k| graph_from_ranked(&ranked, k)).collect(),
    })
}

pub fn validate_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks[0] == 0 {
        return Err(PctError::Config(format!("ks must be non-empty and positive, got {ks:?}")));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PctError::Config(format!("ks must be strictly increasing, got {ks:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_points_k1() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let g = knn_graph(&pts, 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
        assert!((g.weights[0][0] - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(g.weights[0][0], (-1.0f64).exp());
    }

    #[test]
    fn coincident_points_weight_one() {
        let pts = [[0.2, 0.3, 0.4], [0.2, 0.3, 0.4]];
        let g = knn_graph(&pts, 1).unwrap();
        assert_eq!(g.weights, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn ties_break_by_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let g = knn_graph(&pts, 2).unwrap();
        assert_eq!(g.neighbors[0], vec![1, 2]);
    }

    #[test]
    fn matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let g = knn_graph(&pts, 8).unwrap();
        for i in 0..pts.len() {
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all[..8].iter().map(|x| x.1).collect();
            assert_eq!(g.neighbors[i], expect);
        }
    }

    #[test]
    fn clamps_k_for_tiny_voxels() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let set = build_graph_set(&pts, &DEFAULT_KS).unwrap();
        assert!(set.graphs.iter().all(|g| g.degree() == 1));
        let single = knn_graph(&pts[..1], 4).unwrap();
        assert_eq!(single.neighbors, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn nesting_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point> = (0..32).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let set = build_graph_set(&pts, &[1, 4]).unwrap();
        for i in 0..pts.len() {
            assert!(set.graphs[0].neighbors[i].iter().all(|j| set.graphs[1].neighbors[i].contains(j)));
        }
        let shifted: Vec<Point> = pts.iter().map(|p| [p[0] + 5.0, p[1] + 5.0, p[2] + 5.0]).collect();
        let set2 = build_graph_set(&shifted, &[1, 4]).unwrap();
        for (a, b) in set.graphs.iter().zip(&set2.graphs) {
            assert_eq!(a.neighbors, b.neighbors);
            for (wa, wb) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
                assert!((wa - wb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(knn_graph(&[], 1), Err(PctError::Empty(_))));
        assert!(build_graph_set(&[[0.0; 3]], &[4, 1]).is_err());
        assert!(build_graph_set(&[[0.0; 3]], &[]).is_err());
    }
}
