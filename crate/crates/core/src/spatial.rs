//! Exact 2-D neighbor queries over micrometre-scale point sets.
//!
//! A balanced kd-tree provides k-nearest-neighbour and closed-ball radius
//! queries whose results are set-identical to a linear scan. Ties in kNN are
//! broken by ascending point id so every query is deterministic. The
//! brute-force scan lives here too and serves as the reference oracle in
//! tests.

use thiserror::Error;

/// A point in slide coordinates, in micrometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A query result: point id and Euclidean distance in micrometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist: f64,
}

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
}

/// Lexicographic order on (distance, id); total because distances are finite.
fn neighbor_lt(a: &Neighbor, b: &Neighbor) -> bool {
    (a.dist, a.id) < (b.dist, b.id)
}

fn sort_neighbors(out: &mut Vec<Neighbor>) {
    out.sort_by(|a, b| {
        a.dist
            .partial_cmp(&b.dist)
            .expect("finite distances")
            .then(a.id.cmp(&b.id))
    });
}

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        axis: u8,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over points with stable u32 ids (index into the input
/// list). Duplicate coordinates are allowed; queries never mutate the tree,
/// so concurrent reads are safe.
pub struct SpatialIndex {
    points: Vec<Point2>,
    // Permutation of point ids, partitioned per node.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl SpatialIndex {
    /// Builds the index. Rejects non-finite coordinates; an empty list yields
    /// an empty index for which every query returns no results.
    pub fn build(points: &[Point2]) -> Result<SpatialIndex, SpatialError> {
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(SpatialError::NonFinite(i));
            }
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        if !points.is_empty() {
            index.root = index.build_node(0, points.len());
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: u32) -> Point2 {
        self.points[id as usize]
    }

    fn build_node(&mut self, start: usize, len: usize) -> usize {
        if len <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, len });
            return self.nodes.len() - 1;
        }
        let slice = &mut self.order[start..start + len];
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for &id in slice.iter() {
            let p = self.points[id as usize];
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        let axis = if max_x - min_x >= max_y - min_y { 0u8 } else { 1u8 };
        let mid = len / 2;
        let points = &self.points;
        let key = |id: u32| {
            let p = points[id as usize];
            let c = if axis == 0 { p.x } else { p.y };
            (c, id)
        };
        slice.select_nth_unstable_by(mid, |&a, &b| {
            key(a).partial_cmp(&key(b)).expect("finite coordinates")
        });
        let split_value = key(slice[mid]).0;
        let left = self.build_node(start, mid);
        let right = self.build_node(start + mid, len - mid);
        self.nodes.push(Node::Split {
            axis,
            value: split_value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// The k nearest points to `query`, ascending by (distance, id).
    ///
    /// `exclude` drops one point id from consideration; pass the query
    /// point's own id to get neighbours of an indexed point. Fewer than `k`
    /// candidates yield a shorter list.
    pub fn knn(&self, query: Point2, k: usize, exclude: Option<u32>) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        // Max-"heap" kept as a sorted vec: small k makes insertion cheap.
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, exclude, &mut best);
        best
    }

    fn knn_rec(
        &self,
        node: usize,
        query: Point2,
        k: usize,
        exclude: Option<u32>,
        best: &mut Vec<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for &id in &self.order[start..start + len] {
                    if Some(id) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        id,
                        dist: self.points[id as usize].dist(&query),
                    };
                    if best.len() < k || neighbor_lt(&cand, best.last().unwrap()) {
                        let pos = best.partition_point(|n| neighbor_lt(n, &cand));
                        best.insert(pos, cand);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let q = if axis == 0 { query.x } else { query.y };
                let (near, far) = if q < value { (left, right) } else { (right, left) };
                self.knn_rec(near, query, k, exclude, best);
                // The far side can still hold equal-distance, lower-id
                // candidates, so prune only on strict excess.
                let plane_dist = (q - value).abs();
                if best.len() < k || plane_dist <= best.last().unwrap().dist {
                    self.knn_rec(far, query, k, exclude, best);
                }
            }
        }
    }

    /// All points within the closed ball of radius `eps` around `query`,
    /// sorted by (distance, id). A point at exactly `eps` is included.
    pub fn within_radius(&self, query: Point2, eps: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.radius_rec(self.root, query, eps, &mut out);
        }
        sort_neighbors(&mut out);
        out
    }

    fn radius_rec(&self, node: usize, query: Point2, eps: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, len } => {
                for &id in &self.order[start..start + len] {
                    let dist = self.points[id as usize].dist(&query);
                    if dist <= eps {
                        out.push(Neighbor { id, dist });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let q = if axis == 0 { query.x } else { query.y };
                if q - eps <= value {
                    self.radius_rec(left, query, eps, out);
                }
                if q + eps >= value {
                    self.radius_rec(right, query, eps, out);
                }
            }
        }
    }
}

/// Linear-scan k nearest neighbours; reference semantics for
/// [`SpatialIndex::knn`].
pub fn brute_force_knn(
    points: &[Point2],
    query: Point2,
    k: usize,
    exclude: Option<u32>,
) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i as u32) != exclude)
        .map(|(i, p)| Neighbor {
            id: i as u32,
            dist: p.dist(&query),
        })
        .collect();
    sort_neighbors(&mut all);
    all.truncate(k);
    all
}

/// Linear-scan closed-ball query; reference semantics for
/// [`SpatialIndex::within_radius`].
pub fn brute_force_radius(points: &[Point2], query: Point2, eps: f64) -> Vec<Neighbor> {
    let mut out: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(i, p)| Neighbor {
            id: i as u32,
            dist: p.dist(&query),
        })
        .filter(|n| n.dist <= eps)
        .collect();
    sort_neighbors(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<Point2> {
        (0..n)
            .map(|_| Point2::new(rng.random_range(0.0..side), rng.random_range(0.0..side)))
            .collect()
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = SpatialIndex::build(&[]).unwrap();
        assert!(index.knn(Point2::new(0.0, 0.0), 3, None).is_empty());
        assert!(index.within_radius(Point2::new(0.0, 0.0), 10.0).is_empty());
    }

    #[test]
    fn collinear_points_build() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 0.0),
            Point2::new(20.0, 0.0),
        ];
        let index = SpatialIndex::build(&pts).unwrap();
        assert_eq!(index.len(), 3);
    }

    #[test]
    fn non_finite_rejected() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(f64::NAN, 1.0)];
        assert!(matches!(
            SpatialIndex::build(&pts),
            Err(SpatialError::NonFinite(1))
        ));
    }

    #[test]
    fn knn_basic_with_self_exclusion() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(3.0, 0.0),
        ];
        let index = SpatialIndex::build(&pts).unwrap();
        let res = index.knn(pts[0], 2, Some(0));
        assert_eq!(res.len(), 2);
        assert_eq!(res[0].id, 1);
        assert_eq!(res[0].dist, 1.0);
        assert_eq!(res[1].id, 2);
        assert_eq!(res[1].dist, 3.0);
    }

    #[test]
    fn knn_k_larger_than_population() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)];
        let index = SpatialIndex::build(&pts).unwrap();
        assert_eq!(index.knn(Point2::new(0.5, 0.5), 10, None).len(), 2);
    }

    #[test]
    fn knn_ties_break_by_ascending_id() {
        // Four points at exactly unit distance from the origin.
        let pts = vec![
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(-1.0, 0.0),
            Point2::new(0.0, -1.0),
        ];
        let index = SpatialIndex::build(&pts).unwrap();
        let res = index.knn(Point2::new(0.0, 0.0), 2, None);
        assert_eq!(res.iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn radius_boundary_is_closed() {
        // 3-4-5 triangle puts the second point at exactly 5.0.
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(3.0, 4.0)];
        let index = SpatialIndex::build(&pts).unwrap();
        let res = index.within_radius(pts[0], 5.0);
        assert_eq!(res.len(), 2);
        assert_eq!(res[1].id, 1);
        assert_eq!(res[1].dist, 5.0);
    }

    #[test]
    fn radius_isolated_point() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(100.0, 0.0)];
        let index = SpatialIndex::build(&pts).unwrap();
        assert_eq!(index.within_radius(pts[0], 0.5).len(), 1); // itself only
    }

    #[test]
    fn knn_matches_brute_force_on_random_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..8 {
            let n = 200 + trial * 150;
            let pts = random_points(n, 1000.0, &mut rng);
            let index = SpatialIndex::build(&pts).unwrap();
            for _ in 0..100 {
                let q = Point2::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
                let fast = index.knn(q, 5, None);
                let slow = brute_force_knn(&pts, q, 5, None);
                assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn radius_matches_brute_force_on_random_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = random_points(1000, 1000.0, &mut rng);
        let index = SpatialIndex::build(&pts).unwrap();
        for _ in 0..100 {
            let q = Point2::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0));
            let fast = index.within_radius(q, 100.0);
            let slow = brute_force_radius(&pts, q, 100.0);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn duplicate_coordinates_are_distinct_ids() {
        let pts = vec![
            Point2::new(5.0, 5.0),
            Point2::new(5.0, 5.0),
            Point2::new(9.0, 5.0),
        ];
        let index = SpatialIndex::build(&pts).unwrap();
        let res = index.knn(pts[0], 2, Some(0));
        assert_eq!(res[0].id, 1);
        assert_eq!(res[0].dist, 0.0);
        assert_eq!(res[1].id, 2);
    }

    #[test]
    fn rotation_leaves_radius_sets_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_points(500, 800.0, &mut rng);
        let theta: f64 = 0.7123;
        let (s, c) = theta.sin_cos();
        let rot = |p: &Point2| Point2::new(c * p.x - s * p.y, s * p.x + c * p.y);
        let rotated: Vec<Point2> = pts.iter().map(rot).collect();
        let index = SpatialIndex::build(&pts).unwrap();
        let index_rot = SpatialIndex::build(&rotated).unwrap();
        for _ in 0..50 {
            let q = Point2::new(rng.random_range(0.0..800.0), rng.random_range(0.0..800.0));
            let a = index.within_radius(q, 90.0);
            let b = index_rot.within_radius(rot(&q), 90.0);
            let ids_a: Vec<u32> = a.iter().map(|n| n.id).collect();
            let ids_b: Vec<u32> = b.iter().map(|n| n.id).collect();
            assert_eq!(ids_a, ids_b);
            for (na, nb) in a.iter().zip(b.iter()) {
                assert!((na.dist - nb.dist).abs() <= 1e-9 * na.dist.max(1.0));
            }
        }
    }

    #[test]
    fn repeated_builds_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = random_points(700, 500.0, &mut rng);
        let a = SpatialIndex::build(&pts).unwrap();
        let b = SpatialIndex::build(&pts).unwrap();
        for _ in 0..40 {
            let q = Point2::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
            assert_eq!(a.knn(q, 7, None), b.knn(q, 7, None));
            assert_eq!(a.within_radius(q, 60.0), b.within_radius(q, 60.0));
        }
    }
}
