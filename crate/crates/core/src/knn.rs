//! Exact k-nearest-neighbour search over small fixed-dimension point sets.
//!
//! Results are ordered by `(squared distance, index)`, so equal distances
//! resolve to the smaller point index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over `D`-dimensional points.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<const D: usize> KdTree<D> {
    pub fn new(points: &[[f64; D]]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the axis of largest spread
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            for d in 0..D {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let axis = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] == 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query`, skipping `exclude` when given.
    /// Returns `(index, squared distance)` sorted ascending.
    pub fn nearest(&self, query: &[f64; D], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search(
        &self,
        node: usize,
        query: &[f64; D],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: dist2(&self.points[i], query),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, exclude, heap);
                // equal bounds may still hold a smaller index, so only prune strictly
                let bound = diff * diff;
                if heap.len() < k || bound <= heap.peek().expect("non-empty heap").dist2 {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let t = a[d] - b[d];
        s += t * t;
    }
    s
}

/// k nearest neighbours of every point (self excluded), as index lists.
pub fn knn_all<const D: usize>(points: &[[f64; D]], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tree.nearest(p, k, Some(i))
                .into_iter()
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute<const D: usize>(points: &[[f64; D]], q: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = (0..points.len())
            .filter(|&j| j != q)
            .map(|j| {
                let d: f64 = (0..D).map(|a| (points[j][a] - points[q][a]).powi(2)).sum();
                (d, j)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn matches_brute_force_3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let nn = knn_all(&pts, 8);
        for q in (0..pts.len()).step_by(7) {
            assert_eq!(nn[q], brute(&pts, q, 8));
        }
    }

    #[test]
    fn ties_resolve_to_smaller_index() {
        // integer grid: many equal distances
        let pts: Vec<[f64; 2]> = (0..100)
            .map(|i| [(i % 10) as f64, (i / 10) as f64])
            .collect();
        let nn = knn_all(&pts, 6);
        for (q, found) in nn.iter().enumerate() {
            assert_eq!(*found, brute(&pts, q, 6), "query {q}");
        }
    }

    #[test]
    fn duplicate_points_are_found() {
        let pts = vec![[0.0, 0.0, 0.0]; 5];
        let tree = KdTree::new(&pts);
        let res = tree.nearest(&pts[2], 3, Some(2));
        assert_eq!(res.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn k_larger_than_set() {
        let pts = vec![[0.0], [1.0], [3.0]];
        let nn = knn_all(&pts, 10);
        assert_eq!(nn[0], vec![1, 2]);
    }
}
