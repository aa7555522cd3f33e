//! Density-based hierarchical clustering with excess-of-mass extraction.

use std::collections::VecDeque;

use rayon::prelude::*;

use super::kdtree::KdTree;
use crate::scene::UNASSIGNED;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighborhood size for the core distance, counting the point itself.
    pub min_samples: usize,
}

/// A node of the condensed tree.
#[derive(Clone, Debug)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// λ = 1 / distance at which the cluster appears (0 for the root).
    pub birth: f64,
    /// Sorted point indices.
    pub members: Vec<usize>,
    pub stability: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    /// Cluster index per point in `0..n_clusters`, noise is `UNASSIGNED`.
    pub labels: Vec<u32>,
    pub n_clusters: usize,
    /// Condensed tree, root first, parents before children.
    pub clusters: Vec<CondensedCluster>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Length of the interval a point spends in a cluster. Equal endpoints give
/// zero even when both are infinite.
fn lambda_span(exit: f64, birth: f64) -> f64 {
    if exit == birth {
        0.0
    } else {
        exit - birth
    }
}

fn lambda_of(weight: f64) -> f64 {
    if weight > 0.0 {
        1.0 / weight
    } else {
        f64::INFINITY
    }
}

pub fn core_distances(points: &[f64], dim: usize, min_samples: usize) -> Vec<f64> {
    let n = points.len() / dim;
    let k = min_samples.saturating_sub(1).min(n.saturating_sub(1));
    if k == 0 {
        return vec![0.0; n];
    }
    let tree = KdTree::new(points, dim);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let nn = tree.nearest(&points[i * dim..(i + 1) * dim], k, Some(i));
            nn.last().map_or(0.0, |&(d2, _)| d2.sqrt())
        })
        .collect()
}

/// Minimum spanning tree of the mutual-reachability graph (dense Prim),
/// as (a, b, weight) in insertion order.
fn mst(points: &[f64], dim: usize, core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = core.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let pc = &points[current * dim..(current + 1) * dim];
        let cc = core[current];
        best.par_iter_mut()
            .zip(from.par_iter_mut())
            .enumerate()
            .for_each(|(j, (b, f))| {
                if in_tree[j] {
                    return;
                }
                let d = dist(pc, &points[j * dim..(j + 1) * dim]).max(cc).max(core[j]);
                if d < *b {
                    *b = d;
                    *f = current;
                }
            });
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    edges
}

struct Dendrogram {
    n: usize,
    /// Internal node `n + k` merges `children[k]` at `weight[k]`.
    children: Vec<(usize, usize)>,
    weight: Vec<f64>,
    size: Vec<usize>,
}

impl Dendrogram {
    fn size_of(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.size[node - self.n]
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.n {
                out.push(x);
            } else {
                let (l, r) = self.children[x - self.n];
                stack.push(l);
                stack.push(r);
            }
        }
    }
}

fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Dendrogram {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut d = Dendrogram {
        n,
        children: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        size: Vec::with_capacity(n),
    };
    for (a, b, w) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (na, nb) = (node_of[ra], node_of[rb]);
        let size = d.size_of(na) + d.size_of(nb);
        d.children.push((na, nb));
        d.weight.push(w);
        d.size.push(size);
        parent[rb] = ra;
        node_of[ra] = n + d.children.len() - 1;
    }
    d
}

fn condense(d: &Dendrogram, min_cluster_size: usize) -> Vec<CondensedCluster> {
    let n = d.n;
    let mut clusters = vec![CondensedCluster {
        parent: None,
        children: Vec::new(),
        birth: 0.0,
        members: Vec::new(),
        stability: 0.0,
        selected: false,
    }];
    // (point, exit λ) for points that leave each cluster as noise.
    let mut fallout: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
    let root = n + d.children.len() - 1;
    let mut queue = VecDeque::from([(root, 0usize)]);
    let mut buf = Vec::new();
    while let Some((node, c)) = queue.pop_front() {
        if node < n {
            fallout[c].push((node, clusters[c].birth));
            continue;
        }
        let (l, r) = d.children[node - n];
        let lambda = lambda_of(d.weight[node - n]);
        let big_l = d.size_of(l) >= min_cluster_size;
        let big_r = d.size_of(r) >= min_cluster_size;
        if big_l && big_r {
            for child in [l, r] {
                let id = clusters.len();
                clusters.push(CondensedCluster {
                    parent: Some(c),
                    children: Vec::new(),
                    birth: lambda,
                    members: Vec::new(),
                    stability: 0.0,
                    selected: false,
                });
                fallout.push(Vec::new());
                clusters[c].children.push(id);
                queue.push_back((child, id));
            }
            continue;
        }
        for (child, big) in [(l, big_l), (r, big_r)] {
            if big {
                queue.push_back((child, c));
            } else {
                buf.clear();
                d.leaves(child, &mut buf);
                fallout[c].extend(buf.iter().map(|&p| (p, lambda)));
            }
        }
    }

    // Children were created after their parents, so a reverse sweep sees
    // every child's members first.
    for c in (0..clusters.len()).rev() {
        let birth = clusters[c].birth;
        let mut exits = std::mem::take(&mut fallout[c]);
        for &ch in &clusters[c].children.clone() {
            let cb = clusters[ch].birth;
            exits.extend(clusters[ch].members.iter().map(|&p| (p, cb)));
        }
        exits.sort_by_key(|e| e.0);
        clusters[c].stability = exits.iter().map(|&(_, l)| lambda_span(l, birth)).sum();
        clusters[c].members = exits.into_iter().map(|e| e.0).collect();
    }
    clusters
}

fn select_eom(clusters: &mut [CondensedCluster]) {
    let nc = clusters.len();
    if nc == 1 {
        clusters[0].selected = true;
        return;
    }
    let mut subtree = vec![0.0; nc];
    for c in (1..nc).rev() {
        let child_sum: f64 = clusters[c].children.iter().map(|&ch| subtree[ch]).sum();
        if clusters[c].children.is_empty() || clusters[c].stability >= child_sum {
            clusters[c].selected = true;
            subtree[c] = clusters[c].stability;
            let mut stack = clusters[c].children.clone();
            while let Some(x) = stack.pop() {
                clusters[x].selected = false;
                stack.extend(clusters[x].children.iter().copied());
            }
        } else {
            subtree[c] = child_sum;
        }
    }
}

/// Clusters row-major `points` of dimension `dim`.
///
/// The core distance of a point is the distance to its `min_samples`-th
/// nearest neighbor with the point itself counted as the first. When the
/// condensed tree never splits, all points form a single cluster.
pub fn hdbscan(points: &[f64], dim: usize, params: HdbscanParams) -> Hierarchy {
    let n = points.len() / dim;
    if n == 0 {
        return Hierarchy {
            labels: Vec::new(),
            n_clusters: 0,
            clusters: Vec::new(),
        };
    }
    if n == 1 {
        let ok = params.min_cluster_size <= 1;
        return Hierarchy {
            labels: vec![if ok { 0 } else { UNASSIGNED }],
            n_clusters: ok as usize,
            clusters: Vec::new(),
        };
    }
    let core = core_distances(points, dim, params.min_samples);
    let edges = mst(points, dim, &core);
    let dendrogram = single_linkage(n, edges);
    let mut clusters = condense(&dendrogram, params.min_cluster_size.max(2));
    select_eom(&mut clusters);

    let mut labels = vec![UNASSIGNED; n];
    let mut n_clusters = 0;
    for c in &clusters {
        if c.selected {
            for &p in &c.members {
                labels[p] = n_clusters;
            }
            n_clusters += 1;
        }
    }
    Hierarchy {
        labels,
        n_clusters: n_clusters as usize,
        clusters,
    }
}
