//! Exact k-nearest-neighbor search over a static point set.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug)]
struct Node {
    start: usize,
    end: usize,
    /// `usize::MAX` for leaves.
    split_dim: usize,
    split: f64,
    left: usize,
    right: usize,
}

/// k-d tree over row-major points of fixed dimension.
pub struct KdTree<'a> {
    points: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        let mut tree = Self {
            points,
            dim,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            split_dim: usize::MAX,
            split: 0.0,
            left: 0,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        // Split along the widest extent at the median.
        let (mut best_dim, mut best_extent) = (0, -1.0);
        for d in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.points[i * self.dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_extent {
                best_extent = hi - lo;
                best_dim = d;
            }
        }
        if best_extent <= 0.0 {
            return id;
        }
        let mid = (start + end) / 2;
        let (pts, dim) = (self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a * dim + best_dim]
                .total_cmp(&pts[b * dim + best_dim])
                .then(a.cmp(&b))
        });
        let split = pts[self.order[mid] * dim + best_dim];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        let node = &mut self.nodes[id];
        node.split_dim = best_dim;
        node.split = split;
        node.left = left;
        node.right = right;
        id
    }

    /// The `k` points nearest to `query`, optionally excluding one index,
    /// as (squared distance, index) sorted by distance then index.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, exclude, &mut heap);
        }
        let mut out: Vec<_> = heap.into_iter().map(|c| (c.dist2, c.index)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let n = self.nodes[node];
        if n.split_dim == usize::MAX {
            for &i in &self.order[n.start..n.end] {
                if Some(i) == exclude {
                    continue;
                }
                let dist2 = self
                    .point(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let c = Candidate { dist2, index: i };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(c);
                }
            }
            return;
        }
        let diff = query[n.split_dim] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, query, k, exclude, heap);
        // `<=` keeps equidistant points with lower indices reachable.
        if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
            self.search(far, query, k, exclude, heap);
        }
    }
}

/// Exact K-nearest-neighbor lists over 3D positions, self excluded, ties
/// broken by lower index. Row-major `n × k`.
pub fn knn_graph(positions: &[f64], k: usize) -> Vec<usize> {
    let n = positions.len() / 3;
    let tree = KdTree::new(positions, 3);
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let nn = tree.nearest(&positions[i * 3..i * 3 + 3], k, Some(i));
        out.extend(nn.into_iter().map(|(_, j)| j));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[f64], dim: usize, i: usize, k: usize) -> Vec<usize> {
        let n = points.len() / dim;
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let s = (0..dim)
                    .map(|c| (points[i * dim + c] - points[j * dim + c]).powi(2))
                    .sum::<f64>();
                (s, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, j)| j).collect()
    }

    #[test]
    fn collinear_tie_prefers_lower_index() {
        let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        let g = knn_graph(&pts, 1);
        assert_eq!(g, vec![1, 0, 1]);
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<f64> = (0..200 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = knn_graph(&pts, 5);
        for i in 0..200 {
            assert_eq!(&g[i * 5..i * 5 + 5], &brute_force(&pts, 3, i, 5)[..]);
        }
        let pts12: Vec<f64> = (0..300 * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tree = KdTree::new(&pts12, 12);
        for i in (0..300).step_by(7) {
            let nn: Vec<usize> = tree.nearest(&pts12[i * 12..i * 12 + 12], 9, Some(i)).into_iter().map(|x| x.1).collect();
            assert_eq!(nn, brute_force(&pts12, 12, i, 9));
        }
    }

    #[test]
    fn grid_interior_points_find_axis_neighbors() {
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                pts.extend_from_slice(&[x as f64, y as f64, 0.0]);
            }
        }
        let g = knn_graph(&pts, 4);
        for x in 1..5 {
            for y in 1..5 {
                let i = x * 6 + y;
                let mut nb = g[i * 4..i * 4 + 4].to_vec();
                nb.sort();
                assert_eq!(nb, vec![i - 6, i - 1, i + 1, i + 6]);
            }
        }
    }
}
