use rayon::prelude::*;

use super::forward::{fingerprint, ForwardState};
use super::{Payload, Splat, ALPHA_MAX, ALPHA_MIN, TILE};
use crate::error::{Error, Result};

/// Per-pixel loss gradients with respect to the rendered buffers.
#[derive(Clone, Copy, Debug, Default)]
pub struct Upstream<'a> {
    /// H×W×3
    pub color: Option<&'a [f64]>,
    /// H×W×dim, same dim as the payload features
    pub feature: Option<&'a [f64]>,
    /// Background color used by the forward pass.
    pub background: [f64; 3],
}

/// Gradients per splat, aligned with the splat slice given to the pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub d_color: Vec<[f64; 3]>,
    /// splats × dim
    pub d_feature: Vec<f64>,
    pub feature_dim: usize,
    /// With respect to the splat opacity (not its logit).
    pub d_opacity: Vec<f64>,
    pub d_mean: Vec<[f64; 2]>,
    /// With respect to the (xx, xy, yy) covariance entries.
    pub d_cov: Vec<[f64; 3]>,
}

impl RenderGrads {
    fn zeros(n: usize, dim: usize) -> Self {
        Self {
            d_color: vec![[0.0; 3]; n],
            d_feature: vec![0.0; n * dim],
            feature_dim: dim,
            d_opacity: vec![0.0; n],
            d_mean: vec![[0.0; 2]; n],
            d_cov: vec![[0.0; 3]; n],
        }
    }
}

struct Contribution {
    entry: usize,
    alpha: f64,
    t_before: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

struct TileGrads {
    color: Vec<[f64; 3]>,
    feature: Vec<f64>,
    opacity: Vec<f64>,
    mean: Vec<[f64; 2]>,
    conic: Vec<[f64; 3]>,
}

/// Exact reverse-mode pass through the compositing of [`super::rasterize`].
///
/// Each pixel's front-to-back traversal is replayed up to its last
/// contributor and then unwound back to front. Per-tile partial sums are
/// reduced in tile order, so results do not depend on thread scheduling.
pub fn rasterize_backward(
    splats: &[Splat],
    payload: &Payload,
    state: &ForwardState,
    upstream: &Upstream,
) -> Result<RenderGrads> {
    if fingerprint(splats) != state.fingerprint {
        return Err(Error::StaleState);
    }
    let (width, height) = (state.width, state.height);
    let n_pix = width * height;
    let feat_dim = payload.features.map(|(_, d)| d).unwrap_or(0);
    if let Some(c) = upstream.color {
        if c.len() != n_pix * 3 || payload.colors.is_none() {
            return Err(Error::ShapeMismatch("color upstream gradient".into()));
        }
    }
    if let Some(f) = upstream.feature {
        if f.len() != n_pix * feat_dim || payload.features.is_none() {
            return Err(Error::ShapeMismatch("feature upstream gradient".into()));
        }
    }
    let conics: Vec<_> = splats.iter().map(Splat::conic).collect();
    let n_tiles = state.tile_offsets.len() - 1;
    let tiles_x = state.tiles_x;

    let tile_grads: Vec<TileGrads> = (0..n_tiles)
        .into_par_iter()
        .map(|t| {
            let list = &state.tile_list[state.tile_offsets[t]..state.tile_offsets[t + 1]];
            let len = list.len();
            let mut g = TileGrads {
                color: vec![[0.0; 3]; len],
                feature: vec![0.0; len * feat_dim],
                opacity: vec![0.0; len],
                mean: vec![[0.0; 2]; len],
                conic: vec![[0.0; 3]; len],
            };
            if len == 0 {
                return g;
            }
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let tw = TILE.min(width - tx * TILE);
            let th = TILE.min(height - ty * TILE);
            let mut contribs: Vec<Contribution> = Vec::new();
            for ly in 0..th {
                for lx in 0..tw {
                    let (x, y) = (tx * TILE + lx, ty * TILE + ly);
                    let p = y * width + x;
                    let n_contrib = state.n_contrib[p] as usize;
                    if n_contrib == 0 {
                        continue;
                    }
                    let up_c = upstream.color.map(|c| &c[p * 3..p * 3 + 3]);
                    let up_f = upstream.feature.map(|f| &f[p * feat_dim..(p + 1) * feat_dim]);

                    // Replay the forward traversal.
                    contribs.clear();
                    let mut t_acc = 1.0;
                    for (k, &si) in list[..n_contrib].iter().enumerate() {
                        let si = si as usize;
                        let s = &splats[si];
                        let [ca, cb, cc] = conics[si].unwrap();
                        let dx = x as f64 - s.mean[0];
                        let dy = y as f64 - s.mean[1];
                        let power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                        if power > 0.0 {
                            continue;
                        }
                        let raw = s.opacity * power.exp();
                        let alpha = raw.min(ALPHA_MAX);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        contribs.push(Contribution {
                            entry: k,
                            alpha,
                            t_before: t_acc,
                            clamped: raw > ALPHA_MAX,
                            dx,
                            dy,
                        });
                        t_acc *= 1.0 - alpha;
                    }

                    // Unwind back to front. `behind` is the upstream-weighted
                    // value of everything composited after the current splat,
                    // background included.
                    let mut behind = match up_c {
                        Some(u) => t_acc * (0..3).map(|c| upstream.background[c] * u[c]).sum::<f64>(),
                        None => 0.0,
                    };
                    for c in contribs.iter().rev() {
                        let si = list[c.entry] as usize;
                        let w = c.alpha * c.t_before;
                        let mut own = 0.0;
                        if let (Some(u), Some(colors)) = (up_c, payload.colors) {
                            let gc = &mut g.color[c.entry];
                            for ch in 0..3 {
                                gc[ch] += w * u[ch];
                                own += colors[si][ch] * u[ch];
                            }
                        }
                        if let (Some(u), Some((f, d))) = (up_f, payload.features) {
                            let src = &f[si * d..(si + 1) * d];
                            let dst = &mut g.feature[c.entry * d..(c.entry + 1) * d];
                            for ((o, uv), fv) in dst.iter_mut().zip(u).zip(src) {
                                *o += w * uv;
                                own += fv * uv;
                            }
                        }
                        let d_alpha = c.t_before * own - behind / (1.0 - c.alpha);
                        behind += w * own;
                        if c.clamped {
                            continue;
                        }
                        let s = &splats[si];
                        let gauss = c.alpha / s.opacity;
                        g.opacity[c.entry] += d_alpha * gauss;
                        let d_power = d_alpha * c.alpha;
                        let [ca, cb, cc] = conics[si].unwrap();
                        let gm = &mut g.mean[c.entry];
                        gm[0] += d_power * (ca * c.dx + cb * c.dy);
                        gm[1] += d_power * (cb * c.dx + cc * c.dy);
                        let gk = &mut g.conic[c.entry];
                        gk[0] += d_power * (-0.5 * c.dx * c.dx);
                        gk[1] += d_power * (-c.dx * c.dy);
                        gk[2] += d_power * (-0.5 * c.dy * c.dy);
                    }
                }
            }
            g
        })
        .collect();

    let mut out = RenderGrads::zeros(splats.len(), feat_dim);
    let mut d_conic = vec![[0.0f64; 3]; splats.len()];
    for (t, tg) in tile_grads.into_iter().enumerate() {
        let list = &state.tile_list[state.tile_offsets[t]..state.tile_offsets[t + 1]];
        for (k, &si) in list.iter().enumerate() {
            let si = si as usize;
            for c in 0..3 {
                out.d_color[si][c] += tg.color[k][c];
                d_conic[si][c] += tg.conic[k][c];
            }
            for j in 0..feat_dim {
                out.d_feature[si * feat_dim + j] += tg.feature[k * feat_dim + j];
            }
            out.d_opacity[si] += tg.opacity[k];
            out.d_mean[si][0] += tg.mean[k][0];
            out.d_mean[si][1] += tg.mean[k][1];
        }
    }
    // Conic = Σ⁻¹, so dΣ = -K dK K with dK the symmetric conic gradient.
    for (si, gk) in d_conic.iter().enumerate() {
        let Some([ka, kb, kc]) = conics[si] else { continue };
        let (ga, gb, gc) = (gk[0], 0.5 * gk[1], gk[2]);
        // M = dK K
        let m00 = ga * ka + gb * kb;
        let m01 = ga * kb + gb * kc;
        let m10 = gb * ka + gc * kb;
        let m11 = gb * kb + gc * kc;
        let s00 = -(ka * m00 + kb * m10);
        let s01 = -(ka * m01 + kb * m11);
        let s11 = -(kb * m01 + kc * m11);
        out.d_cov[si] = [s00, 2.0 * s01, s11];
    }
    Ok(out)
}
