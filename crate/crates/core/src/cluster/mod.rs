//! Grouping Gaussians in a joint position / color / semantic space.

pub mod hdbscan;
pub mod kdtree;
pub mod pca;

use std::collections::HashMap;

pub use hdbscan::{hdbscan, CondensedCluster, HdbscanParams, Hierarchy};
pub use kdtree::{knn_graph, KdTree};
pub use pca::{pca_reduce, Pca};

use crate::eval::{group_aabb, Aabb};
use crate::scene::{Scene, UNASSIGNED};

/// Dimension of the reduced semantic subspace.
pub const SEMANTIC_DIM: usize = 6;
pub const UNION_DIM: usize = 3 + 3 + SEMANTIC_DIM;

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    /// `None` selects `max(20, 0.2% of N)`.
    pub min_cluster_size: Option<usize>,
    pub min_samples: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            min_cluster_size: None,
            min_samples: 10,
        }
    }
}

impl ClusterConfig {
    pub fn min_cluster_size_for(&self, n: usize) -> usize {
        self.min_cluster_size
            .unwrap_or_else(|| 20.max((0.002 * n as f64).ceil() as usize))
    }
}

/// Per-dimension z-score over rows. Constant columns become zero.
pub fn zscore(data: &mut [f64], dim: usize) {
    let n = data.len() / dim;
    if n == 0 {
        return;
    }
    for c in 0..dim {
        let mean = (0..n).map(|r| data[r * dim + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (data[r * dim + c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) { 1.0 / sd } else { 0.0 };
        for r in 0..n {
            data[r * dim + c] = (data[r * dim + c] - mean) * scale;
        }
    }
}

/// Row-major `N × 12` union-space coordinates of a scene.
#[derive(Clone, Debug)]
pub struct UnionSpace {
    pub points: Vec<f64>,
    pub rank_deficient: Option<usize>,
}

pub fn union_space(scene: &Scene) -> UnionSpace {
    let n = scene.len();
    let mut pos: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.position.map(f64::from)).collect();
    let mut app: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.color_f64()).collect();
    let pca = pca_reduce(&scene.idsf.features_f64(), n, scene.idsf.dim(), SEMANTIC_DIM);
    let mut sem = pca.projected;
    zscore(&mut pos, 3);
    zscore(&mut app, 3);
    zscore(&mut sem, SEMANTIC_DIM);
    let mut points = Vec::with_capacity(n * UNION_DIM);
    for i in 0..n {
        points.extend_from_slice(&pos[i * 3..i * 3 + 3]);
        points.extend_from_slice(&app[i * 3..i * 3 + 3]);
        points.extend_from_slice(&sem[i * SEMANTIC_DIM..(i + 1) * SEMANTIC_DIM]);
    }
    UnionSpace {
        points,
        rank_deficient: pca.rank_deficient,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<u32>,
    pub n_groups: usize,
    pub members: Vec<Vec<usize>>,
    /// `n_groups × D`, each row the unit-normalized mean feature.
    pub mean_feature: Vec<f64>,
    pub feature_dim: usize,
    pub bbox3d: Vec<Aabb>,
}

impl ClusterResult {
    /// Summarizes the groups encoded by `labels`.
    pub fn from_labels(scene: &Scene, labels: Vec<u32>) -> Self {
        let n_groups = labels
            .iter()
            .filter(|&&l| l != UNASSIGNED)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        let mut members = vec![Vec::new(); n_groups];
        for (i, &l) in labels.iter().enumerate() {
            if l != UNASSIGNED {
                members[l as usize].push(i);
            }
        }
        let d = scene.idsf.dim();
        let mut mean_feature = vec![0.0; n_groups * d];
        for (g, m) in members.iter().enumerate() {
            let row = &mut mean_feature[g * d..(g + 1) * d];
            for &i in m {
                for (r, v) in row.iter_mut().zip(scene.idsf.feature(i)) {
                    *r += f64::from(*v);
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let bbox3d = members
            .iter()
            .map(|m| group_aabb(scene, m).unwrap_or_default())
            .collect();
        Self {
            labels,
            n_groups,
            members,
            mean_feature,
            feature_dim: d,
            bbox3d,
        }
    }

    pub fn mean(&self, group: usize) -> &[f64] {
        &self.mean_feature[group * self.feature_dim..(group + 1) * self.feature_dim]
    }
}

/// Renumbers clusters by decreasing size, ties by lower original id.
pub fn relabel_by_size(labels: &[u32], n_clusters: usize) -> Vec<u32> {
    let mut counts = vec![0usize; n_clusters];
    for &l in labels {
        if l != UNASSIGNED {
            counts[l as usize] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut map = vec![0u32; n_clusters];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new as u32;
    }
    labels
        .iter()
        .map(|&l| if l == UNASSIGNED { l } else { map[l as usize] })
        .collect()
}

/// Clusters the scene in union space and writes the labels into its
/// semantic field. If nothing survives as a cluster the previous labels are
/// kept and the returned result has zero groups.
pub fn cluster_scene(scene: &mut Scene, cfg: &ClusterConfig) -> ClusterResult {
    let n = scene.len();
    let space = union_space(scene);
    if let Some(r) = space.rank_deficient {
        log::warn!("cluster: semantic features have rank {r}; reduced subspace zero-padded");
    }
    let params = HdbscanParams {
        min_cluster_size: cfg.min_cluster_size_for(n),
        min_samples: cfg.min_samples,
    };
    let h = if n >= params.min_cluster_size {
        hdbscan(&space.points, UNION_DIM, params)
    } else {
        Hierarchy {
            labels: vec![UNASSIGNED; n],
            n_clusters: 0,
            clusters: Vec::new(),
        }
    };
    if h.n_clusters == 0 {
        log::warn!("cluster: no clusters found among {n} Gaussians; labels unchanged");
        let mut r = ClusterResult::from_labels(scene, vec![UNASSIGNED; n]);
        r.n_groups = 0;
        return r;
    }
    let labels = relabel_by_size(&h.labels, h.n_clusters);
    scene.idsf.labels_mut().copy_from_slice(&labels);
    ClusterResult::from_labels(scene, labels)
}

/// Adjusted Rand index between two labelings. Each distinct value,
/// including `UNASSIGNED`, is one class.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut table: HashMap<(u32, u32), f64> = HashMap::new();
    let mut rows: HashMap<u32, f64> = HashMap::new();
    let mut cols: HashMap<u32, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = rows.values().map(|&v| c2(v)).sum();
    let sb: f64 = cols.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(v < 0.0);
    }

    fn object_scene(rng: &mut ChaCha8Rng, objects: usize, per: usize, same_features: bool) -> (Scene, Vec<u32>) {
        let mut gaussians = Vec::new();
        let mut truth = Vec::new();
        let palette = [[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9], [0.9, 0.9, 0.1]];
        for o in 0..objects {
            let angle = o as f64 * std::f64::consts::TAU / objects.max(1) as f64;
            let c = [2.0 * angle.cos(), 2.0 * angle.sin(), 0.0];
            for _ in 0..per {
                let p = c.map(|v| v + rng.random_range(-0.3..0.3));
                let col = palette[o % 4].map(|v: f64| v + rng.random_range(-0.05..0.05));
                gaussians.push(Gaussian::new(p, [1.0, 0.0, 0.0, 0.0], [0.05; 3], 0.8, col));
                truth.push(o as u32);
            }
        }
        let mut scene = Scene::new(gaussians, 8);
        for (i, &t) in truth.iter().enumerate() {
            for (k, v) in scene.idsf.feature_mut(i).iter_mut().enumerate() {
                *v = if same_features {
                    0.3
                } else {
                    (if k == t as usize { 1.0 } else { 0.0 }) + rng.random_range(-0.05..0.05)
                };
            }
        }
        (scene, truth)
    }

    fn purity(labels: &[u32], truth: &[u32], objects: usize) -> f64 {
        (0..objects as u32)
            .map(|o| {
                let mut counts: HashMap<u32, usize> = HashMap::new();
                let mut total = 0;
                for (l, t) in labels.iter().zip(truth) {
                    if *t == o {
                        *counts.entry(*l).or_default() += 1;
                        total += 1;
                    }
                }
                *counts.values().max().unwrap() as f64 / total as f64
            })
            .fold(1.0, f64::min)
    }

    #[test]
    fn four_objects_give_four_pure_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut scene, truth) = object_scene(&mut rng, 4, 150, false);
        let r = cluster_scene(&mut scene, &ClusterConfig::default());
        assert_eq!(r.n_groups, 4);
        assert!(purity(&r.labels, &truth, 4) >= 0.95);
        assert_eq!(scene.idsf.labels(), &r.labels[..]);
        for g in 0..r.n_groups {
            let norm: f64 = r.mean(g).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let sizes: Vec<usize> = r.members.iter().map(Vec::len).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        let again = cluster_scene(&mut scene, &ClusterConfig::default());
        assert_eq!(again, r);
    }

    #[test]
    fn identical_features_still_separate_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut scene, truth) = object_scene(&mut rng, 3, 150, true);
        let r = cluster_scene(&mut scene, &ClusterConfig::default());
        assert_eq!(r.n_groups, 3);
        assert!(purity(&r.labels, &truth, 3) >= 0.95);
    }

    #[test]
    fn single_object_is_one_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut scene, _) = object_scene(&mut rng, 1, 200, false);
        let r = cluster_scene(&mut scene, &ClusterConfig::default());
        assert_eq!(r.n_groups, 1);
    }

    proptest! {
        #[test]
        fn zscore_is_idempotent(data in prop::collection::vec(-50.0f64..50.0, 30..90)) {
            let dim = 3;
            let len = data.len() / dim * dim;
            let mut once = data[..len].to_vec();
            zscore(&mut once, dim);
            let mut twice = once.clone();
            zscore(&mut twice, dim);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
