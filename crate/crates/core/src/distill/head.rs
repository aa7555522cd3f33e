//! Maps rendered semantic features into teacher space: a two-layer
//! projection head applied per pixel and a strided convolution down to
//! teacher resolution.

use rand::Rng;
use rayon::prelude::*;

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::raster::{rasterize, rasterize_backward, Background, ForwardState, Payload, ProjectedScene, Upstream};
use crate::rng::Rng as StreamRng;
use crate::scene::{Camera, Scene};

/// `f ↦ W2 tanh(W1 f + b1) + b2`, parameters packed as `[W1 | b1 | W2 | b2]`
/// with row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub params: Vec<f64>,
}

fn uniform_init(rng: &mut StreamRng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    out.iter_mut().for_each(|w| *w = rng.random_range(-a..a));
}

impl Head {
    pub fn new(d_in: usize, d_out: usize, rng: &mut StreamRng) -> Self {
        let hidden = 2 * d_out;
        let mut h = Self {
            d_in,
            hidden,
            d_out,
            params: vec![0.0; hidden * d_in + hidden + d_out * hidden + d_out],
        };
        let (o1, o2) = (h.hidden * d_in, h.hidden * d_in + hidden);
        uniform_init(rng, &mut h.params[..o1], d_in, hidden);
        uniform_init(rng, &mut h.params[o2..o2 + d_out * hidden], hidden, d_out);
        h
    }

    fn offsets(&self) -> [usize; 4] {
        let a = self.hidden * self.d_in;
        let b = a + self.hidden;
        let c = b + self.d_out * self.hidden;
        [0, a, b, c]
    }

    pub fn w1(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[0]..o[1]]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[1]..o[2]]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[2]..o[3]]
    }

    pub fn b2(&self) -> &[f64] {
        let o = self.offsets();
        &self.params[o[3]..]
    }

    /// `W1 f` for every row of a row-major `n × d_in` table.
    pub fn first_layer(&self, features: &[f64]) -> Vec<f64> {
        let (d, hd) = (self.d_in, self.hidden);
        let w1 = self.w1();
        let mut out = vec![0.0; features.len() / d * hd];
        out.par_chunks_mut(hd)
            .zip(features.par_chunks(d))
            .for_each(|(o, f)| {
                for (k, v) in o.iter_mut().enumerate() {
                    *v = w1[k * d..(k + 1) * d].iter().zip(f).map(|(a, b)| a * b).sum();
                }
            });
        out
    }

    /// Second stage from first-layer activations: returns `tanh(u + b1)` and
    /// the output, both row-major.
    pub fn finish(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hd, d_out) = (self.hidden, self.d_out);
        let (b1, w2, b2) = (self.b1(), self.w2(), self.b2());
        let rows = u.len() / hd;
        let mut z = vec![0.0; rows * hd];
        let mut out = vec![0.0; rows * d_out];
        z.par_chunks_mut(hd)
            .zip(out.par_chunks_mut(d_out))
            .zip(u.par_chunks(hd))
            .for_each(|((z, o), u)| {
                for k in 0..hd {
                    z[k] = (u[k] + b1[k]).tanh();
                }
                for (j, v) in o.iter_mut().enumerate() {
                    *v = b2[j] + w2[j * hd..(j + 1) * hd].iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        (z, out)
    }

    /// The full head on one vector.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.finish(&self.first_layer(f)).1
    }

    /// Backward through [`Head::finish`]: accumulates gradients for `b1`,
    /// `W2` and `b2` into `grad` and returns the gradient with respect to
    /// `u`. `W1` is handled by the caller, which knows what `u` was made of.
    pub fn finish_backward(&self, z: &[f64], d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (hd, dd) = (self.hidden, self.d_out);
        let w2 = self.w2();
        let rows = z.len() / hd;
        let mut du = vec![0.0; rows * hd];
        du.par_chunks_mut(hd)
            .zip(z.par_chunks(hd))
            .zip(d_out.par_chunks(dd))
            .for_each(|((du, z), g)| {
                for k in 0..hd {
                    let dz: f64 = (0..dd).map(|j| w2[j * hd + k] * g[j]).sum();
                    du[k] = dz * (1.0 - z[k] * z[k]);
                }
            });
        // Parameter sums are reduced over fixed row blocks in order.
        const BLOCK: usize = 256;
        let partials: Vec<Vec<f64>> = (0..rows.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![0.0; hd + dd * hd + dd];
                for r in b * BLOCK..((b + 1) * BLOCK).min(rows) {
                    let (zr, gr, dur) = (&z[r * hd..(r + 1) * hd], &d_out[r * dd..(r + 1) * dd], &du[r * hd..(r + 1) * hd]);
                    for k in 0..hd {
                        acc[k] += dur[k];
                    }
                    for j in 0..dd {
                        if gr[j] == 0.0 {
                            continue;
                        }
                        let row = &mut acc[hd + j * hd..hd + (j + 1) * hd];
                        row.iter_mut().zip(zr).for_each(|(a, z)| *a += gr[j] * z);
                        acc[hd + dd * hd + j] += gr[j];
                    }
                }
                acc
            })
            .collect();
        let o = self.offsets();
        for p in partials {
            grad[o[1]..].iter_mut().zip(&p).for_each(|(g, v)| *g += v);
        }
        du
    }

    /// Adds `W1`'s gradient for rows `u_i = W1 f_i` and returns `∂/∂f_i`.
    pub fn first_layer_backward(&self, features: &[f64], du: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (d, hd) = (self.d_in, self.hidden);
        let w1 = self.w1();
        let rows = features.len() / d;
        let mut df = vec![0.0; rows * d];
        df.par_chunks_mut(d).zip(du.par_chunks(hd)).for_each(|(df, du)| {
            for k in 0..hd {
                if du[k] != 0.0 {
                    df.iter_mut().zip(&w1[k * d..(k + 1) * d]).for_each(|(a, w)| *a += du[k] * w);
                }
            }
        });
        let gw1 = &mut grad[..hd * d];
        for r in 0..rows {
            let (f, u) = (&features[r * d..(r + 1) * d], &du[r * hd..(r + 1) * hd]);
            for k in 0..hd {
                if u[k] != 0.0 {
                    gw1[k * d..(k + 1) * d].iter_mut().zip(f).for_each(|(g, x)| *g += u[k] * x);
                }
            }
        }
        df
    }
}

/// Convolution with kernel size equal to its stride, mapping a `H × W × D`
/// map to `H/s × W/s × D`. Weights are stored `[ky][kx][out][in]`, followed
/// by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsampler {
    pub dim: usize,
    pub stride: usize,
    pub params: Vec<f64>,
}

impl Downsampler {
    /// Starts as plain average pooling.
    pub fn average(dim: usize, stride: usize) -> Self {
        let mut params = vec![0.0; stride * stride * dim * dim + dim];
        let w = 1.0 / (stride * stride) as f64;
        for k in 0..stride * stride {
            for o in 0..dim {
                params[(k * dim + o) * dim + o] = w;
            }
        }
        Self { dim, stride, params }
    }

    fn weight(&self, ky: usize, kx: usize) -> &[f64] {
        let (d, s) = (self.dim, self.stride);
        let k = ky * s + kx;
        &self.params[k * d * d..(k + 1) * d * d]
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let (d, s) = (self.dim, self.stride);
        if f.dim != d || f.width % s != 0 || f.height % s != 0 {
            return Err(Error::ShapeMismatch(format!(
                "downsampler expects dim {d} and sides divisible by {s}, got {}×{}×{}",
                f.width, f.height, f.dim
            )));
        }
        let (tw, th) = (f.width / s, f.height / s);
        let bias = &self.params[s * s * d * d..];
        let mut out = FeatureMap::zeros(tw, th, d);
        out.data.par_chunks_mut(d).enumerate().for_each(|(t, o)| {
            let (tx, ty) = (t % tw, t / tw);
            o.copy_from_slice(bias);
            for ky in 0..s {
                for kx in 0..s {
                    let x = f.pixel(tx * s + kx, ty * s + ky);
                    let w = self.weight(ky, kx);
                    for (oi, ov) in o.iter_mut().enumerate() {
                        *ov += w[oi * d..(oi + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        });
        Ok(out)
    }

    /// Returns the input gradient and adds the parameter gradient to `grad`.
    pub fn backward(&self, f: &FeatureMap, d_out: &FeatureMap, grad: &mut [f64]) -> FeatureMap {
        let (d, s) = (self.dim, self.stride);
        let tw = d_out.width;
        let mut df = FeatureMap::zeros(f.width, f.height, d);
        // Each output cell owns an s×s block of input pixels.
        let blocks: Vec<Vec<f64>> = (0..d_out.width * d_out.height)
            .into_par_iter()
            .map(|t| {
                let (tx, ty) = (t % tw, t / tw);
                let g = d_out.pixel(tx, ty);
                let mut block = vec![0.0; s * s * d];
                for ky in 0..s {
                    for kx in 0..s {
                        let w = self.weight(ky, kx);
                        let dst = &mut block[(ky * s + kx) * d..(ky * s + kx + 1) * d];
                        for (o, &go) in g.iter().enumerate() {
                            if go != 0.0 {
                                dst.iter_mut().zip(&w[o * d..(o + 1) * d]).for_each(|(a, w)| *a += go * w);
                            }
                        }
                    }
                }
                block
            })
            .collect();
        for (t, block) in blocks.iter().enumerate() {
            let (tx, ty) = (t % tw, t / tw);
            for ky in 0..s {
                for kx in 0..s {
                    df.pixel_mut(tx * s + kx, ty * s + ky)
                        .copy_from_slice(&block[(ky * s + kx) * d..(ky * s + kx + 1) * d]);
                }
            }
        }
        let rows = d_out.height;
        let partials: Vec<Vec<f64>> = (0..rows)
            .into_par_iter()
            .map(|ty| {
                let mut acc = vec![0.0; self.params.len()];
                for tx in 0..tw {
                    let g = d_out.pixel(tx, ty);
                    for ky in 0..s {
                        for kx in 0..s {
                            let x = f.pixel(tx * s + kx, ty * s + ky);
                            let base = (ky * s + kx) * d * d;
                            for (o, &go) in g.iter().enumerate() {
                                if go != 0.0 {
                                    acc[base + o * d..base + (o + 1) * d]
                                        .iter_mut()
                                        .zip(x)
                                        .for_each(|(a, xv)| *a += go * xv);
                                }
                            }
                        }
                    }
                    let b = s * s * d * d;
                    acc[b..].iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
                acc
            })
            .collect();
        for p in partials {
            grad.iter_mut().zip(&p).for_each(|(g, v)| *g += v);
        }
        df
    }
}

/// A full-resolution render of head outputs plus what the backward pass
/// needs.
pub struct FeatureRender {
    pub proj: ProjectedScene,
    pub state: ForwardState,
    /// Per visible splat `W1 f`.
    pub payload: Vec<f64>,
    /// Per pixel `tanh(u + b1)`.
    pub hidden: Vec<f64>,
    /// Head output per pixel.
    pub features: FeatureMap,
    pub id_map: Option<Vec<u32>>,
}

/// Renders `W1 f` through the compositor and finishes the head per pixel.
/// Because the first layer is linear this equals applying the head to the
/// blended features. Instance ids come from the same traversal when asked.
pub fn render_features(scene: &Scene, cam: &Camera, head: &Head, with_ids: bool) -> FeatureRender {
    let proj = ProjectedScene::project(scene, cam);
    let feats = proj.features(scene);
    let payload = head.first_layer(&feats);
    let labels = with_ids.then(|| proj.labels(scene));
    let p = Payload {
        colors: None,
        features: Some((&payload, head.hidden)),
        labels: labels.as_deref().map(|l| (l, scene.idsf.n_groups())),
        depth: false,
    };
    let bg = Background { color: [0.0; 3], far: cam.far };
    let (out, state) = rasterize(&proj.splats, &p, cam.width, cam.height, &bg);
    let u = out.feature.unwrap();
    let (hidden, f) = head.finish(&u);
    FeatureRender {
        proj,
        state,
        payload,
        hidden,
        features: FeatureMap {
            width: cam.width,
            height: cam.height,
            dim: head.d_out,
            data: f,
        },
        id_map: out.id_map,
    }
}

/// Gradients of a scalar loss through [`render_features`]: returns the
/// per-Gaussian feature gradient (`N × D`, zero for culled Gaussians) and
/// adds the head's parameter gradient to `head_grad`.
pub fn render_features_backward(
    scene: &Scene,
    head: &Head,
    render: &FeatureRender,
    d_features: &FeatureMap,
    head_grad: &mut [f64],
) -> Result<Vec<f64>> {
    let du = head.finish_backward(&render.hidden, &d_features.data, head_grad);
    let p = Payload {
        colors: None,
        features: Some((&render.payload, head.hidden)),
        labels: None,
        depth: false,
    };
    let up = Upstream {
        color: None,
        feature: Some(&du),
        background: [0.0; 3],
    };
    let g = rasterize_backward(&render.proj.splats, &p, &render.state, &up)?;
    let feats = render.proj.features(scene);
    let df_visible = head.first_layer_backward(&feats, &g.d_feature, head_grad);
    let d = scene.idsf.dim();
    let mut df = vec![0.0; scene.len() * d];
    for (k, &i) in render.proj.source.iter().enumerate() {
        df[i * d..(i + 1) * d].copy_from_slice(&df_visible[k * d..(k + 1) * d]);
    }
    Ok(df)
}
