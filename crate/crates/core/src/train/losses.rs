//! Feature smoothing over spatial neighbors and the 2D-3D contrastive loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::cluster::ClusterResult;
use crate::distill::InstanceMasks;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either side is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Adds `scale · ∂cos(a, b)/∂a` to `out`.
fn cosine_grad(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let c = dot(a, b) / (na * nb);
    for k in 0..a.len() {
        out[k] += scale * (b[k] / (na * nb) - c * a[k] / (na * na));
    }
}

/// `T` distinct indices drawn uniformly from `0..n`, sorted.
pub fn sample_gaussians(n: usize, t: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut s = sample(rng, n, t.min(n)).into_vec();
    s.sort_unstable();
    s
}

/// Mean of `1 − cos(f_i, f_j)` over the sampled `i` and their `k`
/// neighbors, with its gradient (`N × dim`). Zero when `N ≤ k`.
pub fn smoothing_loss(features: &[f64], dim: usize, knn: &[usize], k: usize, samples: &[usize]) -> (f64, Vec<f64>) {
    let n = features.len() / dim;
    let mut grad = vec![0.0; features.len()];
    if n <= k || samples.is_empty() || k == 0 {
        log::warn!("smoothing: {n} Gaussians with k = {k}; skipped");
        return (0.0, grad);
    }
    let denom = (samples.len() * k) as f64;
    let mut loss = 0.0;
    for &i in samples {
        let fi = &features[i * dim..(i + 1) * dim];
        for &j in &knn[i * k..(i + 1) * k] {
            let fj = &features[j * dim..(j + 1) * dim];
            loss += 1.0 - cosine(fi, fj);
            cosine_grad(fi, fj, -1.0 / denom, &mut grad[i * dim..(i + 1) * dim]);
            cosine_grad(fj, fi, -1.0 / denom, &mut grad[j * dim..(j + 1) * dim]);
        }
    }
    (loss / denom, grad)
}

/// Where a contrastive member feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Gaussian(usize),
    Pixel(usize),
}

/// Joint 3D/2D feature sets per group with their positive and negative
/// group sets. Means are unit-norm and treated as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveGroups {
    pub dim: usize,
    pub members: Vec<Vec<(Source, Vec<f64>)>>,
    pub means: Vec<Vec<f64>>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

fn subsample<T: Copy>(items: &[T], cap: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut idx = sample(rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// Collects each group's member features (3D from `features`, 2D from the
/// rendered `pixel_features` under the group's mask), at most `cap` per
/// side, and splits the other groups by mean cosine against `threshold`.
pub fn build_contrastive_groups(
    cluster: &ClusterResult,
    features: &[f64],
    pixel_features: &[f64],
    masks: &InstanceMasks,
    threshold: f64,
    cap: usize,
    rng: &mut impl Rng,
) -> ContrastiveGroups {
    let dim = cluster.feature_dim;
    let ng = cluster.n_groups;
    let mut members = Vec::with_capacity(ng);
    for g in 0..ng {
        let mut set: Vec<(Source, Vec<f64>)> = subsample(&cluster.members[g], cap, rng)
            .into_iter()
            .map(|i| (Source::Gaussian(i), features[i * dim..(i + 1) * dim].to_vec()))
            .collect();
        if let Some(m) = masks.masks.iter().find(|m| m.group as usize == g) {
            let pix: Vec<usize> = (0..m.mask.len()).filter(|&p| m.mask[p]).collect();
            set.extend(
                subsample(&pix, cap, rng)
                    .into_iter()
                    .map(|p| (Source::Pixel(p), pixel_features[p * dim..(p + 1) * dim].to_vec())),
            );
        }
        members.push(set);
    }
    let means: Vec<Vec<f64>> = members
        .iter()
        .map(|set| {
            let mut m = vec![0.0; dim];
            for (_, f) in set {
                m.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
            let n = norm(&m);
            if n > 0.0 {
                m.iter_mut().for_each(|v| *v /= n);
            }
            m
        })
        .collect();
    let mut positives = vec![Vec::new(); ng];
    let mut negatives = vec![Vec::new(); ng];
    for i in 0..ng {
        for j in 0..ng {
            if i == j || cosine(&means[i], &means[j]) > threshold {
                positives[i].push(j);
            } else {
                negatives[i].push(j);
            }
        }
    }
    ContrastiveGroups {
        dim,
        members,
        means,
        positives,
        negatives,
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Anchors that had at least one negative.
    pub anchors: usize,
    /// Gradient per member, aligned with [`ContrastiveGroups::members`].
    pub grads: Vec<Vec<Vec<f64>>>,
}

/// For each anchor group with negatives, the mean over its members `x` of
/// `−log(Σ_pos exp(cos(x, m)/τ) / Σ_neg exp(cos(x, m)/τ))`, averaged over
/// those anchors.
pub fn contrastive_loss(groups: &ContrastiveGroups, tau: f64) -> ContrastiveLoss {
    let mut grads: Vec<Vec<Vec<f64>>> = groups
        .members
        .iter()
        .map(|set| set.iter().map(|_| vec![0.0; groups.dim]).collect())
        .collect();
    let anchors: Vec<usize> = (0..groups.members.len())
        .filter(|&i| !groups.negatives[i].is_empty() && !groups.members[i].is_empty())
        .collect();
    if anchors.is_empty() {
        return ContrastiveLoss { value: 0.0, anchors: 0, grads };
    }
    let na = anchors.len() as f64;
    let mut value = 0.0;
    for &i in &anchors {
        let m = groups.members[i].len() as f64;
        for (j, (_, x)) in groups.members[i].iter().enumerate() {
            // Log-sum-exp over each set, with softmax weights for the gradient.
            let side = |set: &[usize]| {
                let s: Vec<f64> = set.iter().map(|&g| cosine(x, &groups.means[g]) / tau).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                let w: Vec<f64> = s.iter().map(|v| (v - mx).exp() / z).collect();
                (mx + z.ln(), w)
            };
            let (lp, wp) = side(&groups.positives[i]);
            let (ln, wn) = side(&groups.negatives[i]);
            value += -(lp - ln) / (m * na);
            let g = &mut grads[i][j];
            for (&gi, w) in groups.positives[i].iter().zip(&wp) {
                cosine_grad(x, &groups.means[gi], -w / (tau * m * na), g);
            }
            for (&gi, w) in groups.negatives[i].iter().zip(&wn) {
                cosine_grad(x, &groups.means[gi], w / (tau * m * na), g);
            }
        }
    }
    ContrastiveLoss {
        value,
        anchors: anchors.len(),
        grads,
    }
}
