//! Per-pixel reference compositor.
//!
//! No tiles and no bounding-radius culling: every pixel walks the full
//! global depth order. It applies the same per-splat alpha rules and the same
//! transmittance cutoff as the tile renderer.

use super::{id_argmax, Background, Payload, RenderOutput, Splat, ALPHA_MAX, ALPHA_MIN, T_MIN};
use crate::scene::UNASSIGNED;

pub fn rasterize_oracle(
    splats: &[Splat],
    payload: &Payload,
    width: usize,
    height: usize,
    bg: &Background,
) -> RenderOutput {
    rasterize_oracle_with(splats, payload, width, height, bg, true)
}

/// The reference compositor with the transmittance cutoff optionally
/// disabled, i.e. every splat composited regardless of remaining light.
pub fn rasterize_oracle_with(
    splats: &[Splat],
    payload: &Payload,
    width: usize,
    height: usize,
    bg: &Background,
    early_exit: bool,
) -> RenderOutput {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));

    let mut out = RenderOutput::blank(width, height, payload, bg);
    let n_groups = payload.labels.map(|(_, g)| g).unwrap_or(0);
    let feat_dim = payload.features.map(|(_, d)| d).unwrap_or(0);
    let mut ids = vec![0.0; n_groups + 1];
    let mut feat = vec![0.0; feat_dim];

    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let mut t = 1.0f64;
            let mut color = [0.0; 3];
            let mut depth = 0.0;
            let mut cover = 0.0;
            ids.iter_mut().for_each(|v| *v = 0.0);
            feat.iter_mut().for_each(|v| *v = 0.0);
            for &i in &order {
                let s = &splats[i];
                let [a, b, c] = s.cov;
                let det = a * c - b * b;
                if !(det > 0.0) || !(a > 0.0) {
                    continue;
                }
                let inv = 1.0 / det;
                let (ka, kb, kc) = (c * inv, -b * inv, a * inv);
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let power = -0.5 * (ka * dx * dx + kc * dy * dy) - kb * dx * dy;
                if power > 0.0 {
                    continue;
                }
                let alpha = f64::min(s.opacity * power.exp(), ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let w = t * alpha;
                if let Some(cs) = payload.colors {
                    for ch in 0..3 {
                        color[ch] += w * cs[i][ch];
                    }
                }
                if let Some((f, d)) = payload.features {
                    for j in 0..d {
                        feat[j] += w * f[i * d + j];
                    }
                }
                if let Some((labels, g)) = payload.labels {
                    let ch = if labels[i] == UNASSIGNED { g } else { labels[i] as usize };
                    ids[ch] += w;
                }
                depth += w * s.depth;
                cover += w;
                t *= 1.0 - alpha;
                if early_exit && t < T_MIN {
                    break;
                }
            }
            if let Some(c) = out.color.as_mut() {
                for ch in 0..3 {
                    c[p * 3 + ch] = color[ch] + t * bg.color[ch];
                }
            }
            if let Some(f) = out.feature.as_mut() {
                f[p * feat_dim..(p + 1) * feat_dim].copy_from_slice(&feat);
            }
            if payload.labels.is_some() {
                ids[n_groups] += t;
                if let Some(w) = out.id_weights.as_mut() {
                    w[p * (n_groups + 1)..(p + 1) * (n_groups + 1)].copy_from_slice(&ids);
                }
                out.id_map.as_mut().unwrap()[p] = id_argmax(&ids);
            }
            if let Some(d) = out.depth.as_mut() {
                d[p] = depth + t * bg.far;
            }
            out.final_transmittance[p] = t;
            out.coverage[p] = cover;
        }
    }
    out
}
