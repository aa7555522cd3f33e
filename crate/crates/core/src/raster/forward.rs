use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use super::{
    id_argmax, Background, Payload, RenderOutput, Splat, ALPHA_MAX, ALPHA_MIN, DENSE_ID_LIMIT,
    TILE, T_MIN,
};
use crate::scene::UNASSIGNED;

/// Per-tile sorted splat lists and per-pixel traversal results saved by the
/// forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) tiles_x: usize,
    pub(crate) tile_offsets: Vec<usize>,
    pub(crate) tile_list: Vec<u32>,
    /// Number of list entries up to and including the last contributor.
    pub(crate) n_contrib: Vec<u32>,
    pub(crate) final_t: Vec<f64>,
    pub(crate) fingerprint: u64,
}

impl ForwardState {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }
}

pub(crate) fn fingerprint(splats: &[Splat]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    splats.len().hash(&mut h);
    for s in splats {
        for v in [s.mean[0], s.mean[1], s.cov[0], s.cov[1], s.cov[2], s.depth, s.opacity] {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Pixel radius beyond which a splat's alpha is below the skip threshold.
fn cutoff_radius(s: &Splat) -> Option<f64> {
    if s.opacity < ALPHA_MIN {
        return None;
    }
    let [a, b, c] = s.cov;
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    Some((2.0 * lambda_max * (255.0 * s.opacity).ln()).max(0.0).sqrt() + 1.0)
}

pub(crate) struct Binning {
    pub tiles_x: usize,
    pub offsets: Vec<usize>,
    pub list: Vec<u32>,
}

pub(crate) fn bin_splats(splats: &[Splat], conics: &[Option<[f64; 3]>], width: usize, height: usize) -> Binning {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut keys: Vec<(u32, f64, u32)> = Vec::new();
    for (i, s) in splats.iter().enumerate() {
        if conics[i].is_none() {
            continue;
        }
        let Some(r) = cutoff_radius(s) else { continue };
        let x0 = (s.mean[0] - r).ceil().max(0.0);
        let x1 = (s.mean[0] + r).floor().min(width as f64 - 1.0);
        let y0 = (s.mean[1] - r).ceil().max(0.0);
        let y1 = (s.mean[1] + r).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                keys.push(((ty * tiles_x + tx) as u32, s.depth, i as u32));
            }
        }
    }
    // Equivalent to a stable per-tile depth sort of index-ordered lists.
    keys.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    let n_tiles = tiles_x * tiles_y;
    let mut offsets = vec![0usize; n_tiles + 1];
    for k in &keys {
        offsets[k.0 as usize + 1] += 1;
    }
    for t in 0..n_tiles {
        offsets[t + 1] += offsets[t];
    }
    Binning {
        tiles_x,
        offsets,
        list: keys.into_iter().map(|k| k.2).collect(),
    }
}

struct TileOut {
    color: Vec<f64>,
    feature: Vec<f64>,
    ids: Vec<f64>,
    id_map: Vec<u32>,
    depth: Vec<f64>,
    final_t: Vec<f64>,
    coverage: Vec<f64>,
    n_contrib: Vec<u32>,
}

/// Composites `splats` front to back per 16×16 tile.
pub fn rasterize(
    splats: &[Splat],
    payload: &Payload,
    width: usize,
    height: usize,
    bg: &Background,
) -> (RenderOutput, ForwardState) {
    let conics: Vec<_> = splats.iter().map(Splat::conic).collect();
    let bins = bin_splats(splats, &conics, width, height);
    let tiles_x = bins.tiles_x;
    let n_tiles = bins.offsets.len() - 1;

    let feat_dim = payload.features.map(|(_, d)| d).unwrap_or(0);
    let n_groups = payload.labels.map(|(_, g)| g).unwrap_or(0);
    let dense_ids = payload.labels.is_some() && n_groups <= DENSE_ID_LIMIT;
    let id_ch = if dense_ids { n_groups + 1 } else { 0 };

    let tiles: Vec<TileOut> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let list = &bins.list[bins.offsets[t]..bins.offsets[t + 1]];
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let tw = TILE.min(width - tx * TILE);
            let th = TILE.min(height - ty * TILE);
            let np = tw * th;
            let mut out = TileOut {
                color: vec![0.0; if payload.colors.is_some() { np * 3 } else { 0 }],
                feature: vec![0.0; np * feat_dim],
                ids: vec![0.0; np * id_ch],
                id_map: vec![UNASSIGNED; if payload.labels.is_some() { np } else { 0 }],
                depth: vec![0.0; if payload.depth { np } else { 0 }],
                final_t: vec![1.0; np],
                coverage: vec![0.0; np],
                n_contrib: vec![0; np],
            };
            let mut sparse: Vec<(u32, f64)> = Vec::new();
            for ly in 0..th {
                for lx in 0..tw {
                    let lp = ly * tw + lx;
                    let px = (tx * TILE + lx) as f64;
                    let py = (ty * TILE + ly) as f64;
                    let mut t_acc = 1.0;
                    let mut cover = 0.0;
                    let mut last = 0u32;
                    sparse.clear();
                    for (k, &si) in list.iter().enumerate() {
                        let si = si as usize;
                        let s = &splats[si];
                        let [ca, cb, cc] = conics[si].unwrap();
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                        if power > 0.0 {
                            continue;
                        }
                        let alpha = (s.opacity * power.exp()).min(ALPHA_MAX);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        let w = alpha * t_acc;
                        if let Some(colors) = payload.colors {
                            for c in 0..3 {
                                out.color[lp * 3 + c] += w * colors[si][c];
                            }
                        }
                        if let Some((f, d)) = payload.features {
                            let src = &f[si * d..(si + 1) * d];
                            let dst = &mut out.feature[lp * d..(lp + 1) * d];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += w * v;
                            }
                        }
                        if let Some((labels, g)) = payload.labels {
                            let ch = if labels[si] == UNASSIGNED { g } else { labels[si] as usize };
                            if dense_ids {
                                out.ids[lp * id_ch + ch] += w;
                            } else {
                                accumulate_sparse(&mut sparse, ch as u32, w);
                            }
                        }
                        if payload.depth {
                            out.depth[lp] += w * s.depth;
                        }
                        cover += w;
                        t_acc *= 1.0 - alpha;
                        last = k as u32 + 1;
                        if t_acc < T_MIN {
                            break;
                        }
                    }
                    if payload.colors.is_some() {
                        for c in 0..3 {
                            out.color[lp * 3 + c] += t_acc * bg.color[c];
                        }
                    }
                    if payload.depth {
                        out.depth[lp] += t_acc * bg.far;
                    }
                    if payload.labels.is_some() {
                        if dense_ids {
                            let w = &mut out.ids[lp * id_ch..(lp + 1) * id_ch];
                            w[n_groups] += t_acc;
                            out.id_map[lp] = id_argmax(w);
                        } else {
                            accumulate_sparse(&mut sparse, n_groups as u32, t_acc);
                            out.id_map[lp] = sparse_argmax(&sparse, n_groups as u32);
                        }
                    }
                    out.final_t[lp] = t_acc;
                    out.coverage[lp] = cover;
                    out.n_contrib[lp] = last;
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput::blank(width, height, payload, bg);
    let n = width * height;
    let mut n_contrib = vec![0u32; n];
    for (t, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let tw = TILE.min(width - tx * TILE);
        let th = TILE.min(height - ty * TILE);
        for ly in 0..th {
            for lx in 0..tw {
                let lp = ly * tw + lx;
                let p = (ty * TILE + ly) * width + tx * TILE + lx;
                if let Some(c) = output.color.as_mut() {
                    c[p * 3..p * 3 + 3].copy_from_slice(&tile.color[lp * 3..lp * 3 + 3]);
                }
                if let Some(f) = output.feature.as_mut() {
                    f[p * feat_dim..(p + 1) * feat_dim]
                        .copy_from_slice(&tile.feature[lp * feat_dim..(lp + 1) * feat_dim]);
                }
                if let Some(w) = output.id_weights.as_mut() {
                    w[p * id_ch..(p + 1) * id_ch].copy_from_slice(&tile.ids[lp * id_ch..(lp + 1) * id_ch]);
                }
                if let Some(m) = output.id_map.as_mut() {
                    m[p] = tile.id_map[lp];
                }
                if let Some(d) = output.depth.as_mut() {
                    d[p] = tile.depth[lp];
                }
                output.final_transmittance[p] = tile.final_t[lp];
                output.coverage[p] = tile.coverage[lp];
                n_contrib[p] = tile.n_contrib[lp];
            }
        }
    }

    let state = ForwardState {
        width,
        height,
        tiles_x,
        tile_offsets: bins.offsets,
        tile_list: bins.list,
        n_contrib,
        final_t: output.final_transmittance.clone(),
        fingerprint: fingerprint(splats),
    };
    (output, state)
}

fn accumulate_sparse(acc: &mut Vec<(u32, f64)>, ch: u32, w: f64) {
    match acc.iter_mut().find(|(c, _)| *c == ch) {
        Some(e) => e.1 += w,
        None => acc.push((ch, w)),
    }
}

fn sparse_argmax(acc: &[(u32, f64)], unassigned_ch: u32) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for &(c, w) in acc {
        best = match best {
            Some((bc, bw)) if bw > w || (bw == w && bc < c) => Some((bc, bw)),
            _ => Some((c, w)),
        };
    }
    match best {
        Some((c, _)) if c != unassigned_ch => c,
        _ => UNASSIGNED,
    }
}
