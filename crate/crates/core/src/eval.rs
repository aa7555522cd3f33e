//! Queries against a clustered scene and the segmentation / detection
//! metrics used to score them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cluster::ClusterResult;
use crate::distill::Head;
use crate::error::{Error, Result};
use crate::io::write_pgm;
use crate::raster::render_id_map;
use crate::scene::{Camera, Scene, UNASSIGNED};

/// World-axis aligned box.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn volume(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).max(0.0)).product()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| 0.5 * (self.min[k] + self.max[k]))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Box around a set of Gaussians: member centers padded by three times their
/// largest scale. Members farther from the centroid than the median distance
/// plus three median absolute deviations are dropped first.
pub fn group_aabb(scene: &Scene, members: &[usize]) -> Option<Aabb> {
    if members.is_empty() {
        return None;
    }
    let centers: Vec<[f64; 3]> = members
        .iter()
        .map(|&i| scene.gaussians[i].position.map(f64::from))
        .collect();
    let n = centers.len() as f64;
    let centroid = [0, 1, 2].map(|k| centers.iter().map(|c| c[k]).sum::<f64>() / n);
    let dist: Vec<f64> = centers
        .iter()
        .map(|c| (0..3).map(|k| (c[k] - centroid[k]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let med = median(&mut dist.clone());
    let mad = median(&mut dist.iter().map(|d| (d - med).abs()).collect::<Vec<_>>());
    let limit = med + 3.0 * mad;

    let mut b = Aabb {
        min: [f64::INFINITY; 3],
        max: [f64::NEG_INFINITY; 3],
    };
    for ((&i, c), &d) in members.iter().zip(&centers).zip(&dist) {
        if d > limit {
            continue;
        }
        let pad = 3.0 * scene.gaussians[i].scale().into_iter().fold(0.0, f64::max);
        for k in 0..3 {
            b.min[k] = b.min[k].min(c[k] - pad);
            b.max[k] = b.max[k].max(c[k] + pad);
        }
    }
    Some(b)
}

pub fn iou3d(a: &Aabb, b: &Aabb) -> f64 {
    let inter: f64 = (0..3)
        .map(|k| (a.max[k].min(b.max[k]) - a.min[k].max(b.min[k])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Intersection over union of two binary masks. Two empty masks score 1.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask sizes {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean mask IoU over queries.
pub fn seg_miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted masks for {} queries",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += mask_iou(p, g)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Fraction of ground-truth boxes matched by their query's prediction at
/// IoU ≥ `threshold`. A missing prediction counts as a miss.
pub fn detection_recall(preds: &[Option<Aabb>], gts: &[Aabb], threshold: f64) -> f64 {
    assert_eq!(preds.len(), gts.len());
    if gts.is_empty() {
        return 0.0;
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.is_some_and(|p| iou3d(&p, g) >= threshold))
        .count();
    hits as f64 / gts.len() as f64
}

/// Box of one group, or `EmptyGroup` when it has no members.
pub fn group_box(cluster: &ClusterResult, scene: &Scene, group: u32) -> Result<Aabb> {
    cluster
        .members
        .get(group as usize)
        .and_then(|m| group_aabb(scene, m))
        .ok_or(Error::EmptyGroup(group))
}

/// Winner of a query with the score of every group. `group_id` is `None`
/// when there is nothing to choose from.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub group_id: Option<u32>,
    pub scores: Vec<f64>,
}

impl QueryResult {
    fn from_scores(scores: Vec<f64>) -> Self {
        let mut best: Option<usize> = None;
        for (g, &s) in scores.iter().enumerate() {
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(g);
            }
        }
        Self {
            group_id: best.map(|g| g as u32),
            scores,
        }
    }

    /// Pixels of `id_map` that carry the winning group.
    pub fn mask(&self, id_map: &[u32]) -> Vec<bool> {
        match self.group_id {
            Some(g) => id_map.iter().map(|&v| v == g).collect(),
            None => vec![false; id_map.len()],
        }
    }

    pub fn aabb(&self, cluster: &ClusterResult, scene: &Scene) -> Option<Aabb> {
        self.group_id.and_then(|g| group_box(cluster, scene, g).ok())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Each group's mean member feature mapped through the head into teacher
/// space, unit norm.
pub fn projected_means(scene: &Scene, cluster: &ClusterResult, head: &Head) -> Vec<Vec<f64>> {
    let d = scene.idsf.dim();
    cluster
        .members
        .iter()
        .map(|m| {
            let mut mean = vec![0.0; d];
            for &i in m {
                mean.iter_mut()
                    .zip(scene.idsf.feature(i))
                    .for_each(|(a, &b)| *a += f64::from(b));
            }
            let n = m.len().max(1) as f64;
            mean.iter_mut().for_each(|v| *v /= n);
            unit(head.apply(&mean))
        })
        .collect()
}

/// Cosine relevancy of every group against a query embedding.
pub fn score_groups(means: &[Vec<f64>], query: &[f64]) -> Result<QueryResult> {
    let q = unit(query.to_vec());
    let mut scores = Vec::with_capacity(means.len());
    for m in means {
        if m.len() != q.len() {
            return Err(Error::ShapeMismatch(format!(
                "query of dimension {} against group features of dimension {}",
                q.len(),
                m.len()
            )));
        }
        scores.push(m.iter().zip(&q).map(|(a, b)| a * b).sum());
    }
    Ok(QueryResult::from_scores(scores))
}

/// Selects the group most relevant to a text embedding.
pub fn query_text(scene: &Scene, cluster: &ClusterResult, head: &Head, text: &[f64]) -> Result<QueryResult> {
    score_groups(&projected_means(scene, cluster, head), text)
}

pub const CLICK_RADIUS: i64 = 5;

/// Group under a clicked pixel. Unlabeled pixels snap to the nearest labeled
/// pixel within [`CLICK_RADIUS`]; ties go to the first in row-major order.
pub fn click_select(scene: &Scene, cam: &Camera, u: i64, v: i64) -> Result<QueryResult> {
    let (w, h) = (cam.width, cam.height);
    if u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
        return Err(Error::OutOfBounds { u, v, width: w, height: h });
    }
    let (ids, _) = render_id_map(scene, cam);
    Ok(click_on_map(&ids, w, h, u, v, scene.idsf.n_groups()))
}

fn click_on_map(ids: &[u32], w: usize, h: usize, u: i64, v: i64, n_groups: usize) -> QueryResult {
    let mut best: Option<(i64, u32)> = None;
    for y in (v - CLICK_RADIUS).max(0)..=(v + CLICK_RADIUS).min(h as i64 - 1) {
        for x in (u - CLICK_RADIUS).max(0)..=(u + CLICK_RADIUS).min(w as i64 - 1) {
            let id = ids[y as usize * w + x as usize];
            let d2 = (x - u).pow(2) + (y - v).pow(2);
            if id == UNASSIGNED || d2 > CLICK_RADIUS * CLICK_RADIUS {
                continue;
            }
            if best.is_none_or(|(b, _)| d2 < b) {
                best = Some((d2, id));
            }
        }
    }
    let group_id = best.map(|(_, g)| g);
    let scores = (0..n_groups)
        .map(|g| if Some(g as u32) == group_id { 1.0 } else { 0.0 })
        .collect();
    QueryResult { group_id, scores }
}

/// Agreement of predicted ids across views. For every ground-truth object
/// and every pair of views that both show it, the histograms of predicted
/// ids over its pixels are intersected; unassigned pixels never match. The
/// result is the mean intersection, or 1 when no object is seen twice.
pub fn cross_view_consistency(pred: &[Vec<u32>], gt: &[Vec<u32>], n_objects: usize) -> f64 {
    use std::collections::BTreeMap;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for o in 0..n_objects as u32 {
        let hists: Vec<BTreeMap<u32, f64>> = pred
            .iter()
            .zip(gt)
            .filter_map(|(p, g)| {
                let mut hist = BTreeMap::new();
                let mut n = 0usize;
                for (&pi, &gi) in p.iter().zip(g) {
                    if gi == o {
                        n += 1;
                        if pi != UNASSIGNED {
                            *hist.entry(pi).or_insert(0.0) += 1.0;
                        }
                    }
                }
                (n > 0).then(|| {
                    hist.values_mut().for_each(|c| *c /= n as f64);
                    hist
                })
            })
            .collect();
        for a in 0..hists.len() {
            for b in 0..a {
                total += hists[a]
                    .iter()
                    .map(|(k, va)| hists[b].get(k).map_or(0.0, |vb| va.min(*vb)))
                    .sum::<f64>();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

/// For each object, the fraction of its majority group's members that
/// belong to it. Zero for objects with no clustered Gaussian.
pub fn cluster_purity(labels: &[u32], object_ids: &[u32], n_objects: usize, n_groups: usize) -> Vec<f64> {
    let mut counts = vec![vec![0usize; n_groups]; n_objects];
    let mut size = vec![0usize; n_groups];
    for (&l, &o) in labels.iter().zip(object_ids) {
        if l == UNASSIGNED || l as usize >= n_groups {
            continue;
        }
        size[l as usize] += 1;
        if (o as usize) < n_objects {
            counts[o as usize][l as usize] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            let mut best = 0;
            for g in 1..n_groups {
                if row[g] > row[best] {
                    best = g;
                }
            }
            if n_groups == 0 || row[best] == 0 {
                0.0
            } else {
                row[best] as f64 / size[best] as f64
            }
        })
        .collect()
}

/// One scored query for the report.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub name: String,
    pub result: QueryResult,
    /// Mean mask IoU over the evaluated views.
    pub mask_iou: f64,
    pub box_iou: f64,
    pub aabb: Option<Aabb>,
}

fn fmt_box(b: &Aabb) -> String {
    format!(
        "{} {} {} {} {} {}",
        b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
    )
}

/// Text report: one block per query followed by `key=value` summary lines.
pub fn format_report(records: &[QueryRecord], summary: &[(String, f64)]) -> String {
    let mut out = String::new();
    for r in records {
        let group = r.result.group_id.map_or("none".to_string(), |g| g.to_string());
        let scores: Vec<String> = r.result.scores.iter().map(|s| format!("{s:.6}")).collect();
        let _ = writeln!(out, "query {}", r.name);
        let _ = writeln!(out, "  group {group}");
        let _ = writeln!(out, "  scores {}", scores.join(" "));
        let _ = writeln!(out, "  mask_iou {:.6}", r.mask_iou);
        let _ = writeln!(out, "  box_iou {:.6}", r.box_iou);
        let _ = writeln!(out, "  box {}", r.aabb.as_ref().map_or("none".to_string(), fmt_box));
    }
    for (k, v) in summary {
        let _ = writeln!(out, "{k}={v:.6}");
    }
    out
}

/// Writes `report.txt`, `boxes.txt` and one PGM mask per query and view.
pub fn export(
    dir: impl AsRef<Path>,
    records: &[QueryRecord],
    summary: &[(String, f64)],
    masks: &[Vec<Vec<bool>>],
    width: usize,
    height: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), format_report(records, summary))?;
    let mut boxes = String::new();
    for r in records {
        if let Some(b) = &r.aabb {
            let _ = writeln!(boxes, "{} {}", r.name, fmt_box(b));
        }
    }
    fs::write(dir.join("boxes.txt"), boxes)?;
    for (r, views) in records.iter().zip(masks) {
        for (v, m) in views.iter().enumerate() {
            let gray: Vec<f64> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_pgm(dir.join(format!("mask_{}_{v}.pgm", r.name)), width, height, &gray)?;
        }
    }
    Ok(())
}
