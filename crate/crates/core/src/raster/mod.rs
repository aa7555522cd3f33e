//! Front-to-back alpha compositing of projected Gaussians.
//!
//! The tile renderer ([`rasterize`]) bins splats into 16×16 tiles, sorts
//! each tile's list by depth and composites color, arbitrary per-splat
//! feature vectors, blended one-hot instance ids and depth in a single
//! traversal. [`rasterize_backward`] re-traverses the same lists to produce
//! exact gradients. [`oracle::rasterize_oracle`] is a per-pixel reference
//! used to validate both.

mod backward;
mod forward;
pub mod oracle;

use crate::error::Result;
use crate::scene::{project_gaussian, Camera, Scene, UNASSIGNED};

pub use backward::{rasterize_backward, RenderGrads, Upstream};
pub use forward::{rasterize, ForwardState};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;
/// Above this many groups the id channels are accumulated sparsely and the
/// dense `id_weights` buffer is not materialized.
pub const DENSE_ID_LIMIT: usize = 512;

/// A screen-space splat ready for compositing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub mean: [f64; 2],
    /// (xx, xy, yy), px²
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

impl Splat {
    /// Inverse covariance (xx, xy, yy); `None` when not positive definite.
    pub fn conic(&self) -> Option<[f64; 3]> {
        let [a, b, c] = self.cov;
        let det = a * c - b * b;
        if !(det > 0.0) || !(a > 0.0) {
            return None;
        }
        let inv = 1.0 / det;
        Some([c * inv, -b * inv, a * inv])
    }
}

/// Per-splat values composited alongside the transmittance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Payload<'a> {
    /// One RGB triple per splat.
    pub colors: Option<&'a [[f64; 3]]>,
    /// Row-major `splats × dim` feature vectors.
    pub features: Option<(&'a [f64], usize)>,
    /// Group label per splat and the group count.
    pub labels: Option<(&'a [u32], usize)>,
    pub depth: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    pub color: [f64; 3],
    pub far: f64,
}

impl Default for Background {
    fn default() -> Self {
        Self {
            color: [0.0; 3],
            far: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub feature: bool,
    pub id: bool,
    pub depth: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        color: true,
        feature: true,
        id: true,
        depth: true,
    };
    pub const COLOR: Channels = Channels {
        color: true,
        feature: false,
        id: false,
        depth: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// H×W×3
    pub color: Option<Vec<f64>>,
    /// H×W×feature_dim
    pub feature: Option<Vec<f64>>,
    pub feature_dim: usize,
    /// H×W×(n_groups + 1); the last channel collects unassigned splats and
    /// the residual transmittance.
    pub id_weights: Option<Vec<f64>>,
    /// Winning group per pixel, `UNASSIGNED` where the last channel wins.
    pub id_map: Option<Vec<u32>>,
    pub n_groups: usize,
    pub depth: Option<Vec<f64>>,
    pub final_transmittance: Vec<f64>,
    /// Sum of blending weights per pixel.
    pub coverage: Vec<f64>,
}

impl RenderOutput {
    pub(crate) fn blank(width: usize, height: usize, payload: &Payload, bg: &Background) -> Self {
        let n = width * height;
        let n_groups = payload.labels.map(|(_, g)| g).unwrap_or(0);
        let dense_ids = payload.labels.is_some() && n_groups <= DENSE_ID_LIMIT;
        let mut id_weights = dense_ids.then(|| vec![0.0; n * (n_groups + 1)]);
        if let Some(w) = id_weights.as_mut() {
            for p in 0..n {
                w[p * (n_groups + 1) + n_groups] = 1.0;
            }
        }
        Self {
            width,
            height,
            color: payload
                .colors
                .map(|_| (0..n).flat_map(|_| bg.color).collect()),
            feature: payload.features.map(|(_, d)| vec![0.0; n * d]),
            feature_dim: payload.features.map(|(_, d)| d).unwrap_or(0),
            id_weights,
            id_map: payload.labels.map(|_| vec![UNASSIGNED; n]),
            n_groups,
            depth: payload.depth.then(|| vec![bg.far; n]),
            final_transmittance: vec![1.0; n],
            coverage: vec![0.0; n],
        }
    }
}

/// Argmax over id channels with lower-index tie-breaking; the last channel
/// maps to `UNASSIGNED`.
pub fn id_argmax(weights: &[f64]) -> u32 {
    let mut best = 0;
    for (k, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = k;
        }
    }
    if best + 1 == weights.len() {
        UNASSIGNED
    } else {
        best as u32
    }
}

/// Which (pixel, splat) pairs pass the alpha threshold, are clamped, or sit
/// past the transmittance cutoff. The render is smooth in the splat
/// parameters only while this stays fixed.
pub fn active_signature(splats: &[Splat], w: usize, h: usize) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth));
    let (mut active, mut clamped, mut exits) = (0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            for &i in &order {
                let sp = &splats[i];
                let Some([a, b, c]) = sp.conic() else { continue };
                let (dx, dy) = (x as f64 - sp.mean[0], y as f64 - sp.mean[1]);
                let power: f64 = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
                let raw = sp.opacity * power.exp();
                if power > 0.0 || raw < ALPHA_MIN {
                    continue;
                }
                active += 1;
                clamped += (raw > ALPHA_MAX) as usize;
                t *= 1.0 - raw.min(ALPHA_MAX);
                if t < T_MIN {
                    exits += 1;
                    break;
                }
            }
        }
    }
    (active, clamped, exits)
}

/// Screen-space splats for every Gaussian in front of the camera, with the
/// index of the Gaussian each came from.
#[derive(Clone, Debug, Default)]
pub struct ProjectedScene {
    pub splats: Vec<Splat>,
    pub source: Vec<usize>,
}

impl ProjectedScene {
    pub fn project(scene: &Scene, cam: &Camera) -> Self {
        let mut out = Self::default();
        for (i, g) in scene.gaussians.iter().enumerate() {
            if let Ok(sp) = project_gaussian(g, cam) {
                out.splats.push(Splat {
                    mean: sp.mean,
                    cov: sp.cov,
                    depth: sp.depth,
                    opacity: g.opacity(),
                });
                out.source.push(i);
            }
        }
        out
    }

    pub fn colors(&self, scene: &Scene) -> Vec<[f64; 3]> {
        self.source.iter().map(|&i| scene.gaussians[i].color_f64()).collect()
    }

    pub fn features(&self, scene: &Scene) -> Vec<f64> {
        let d = scene.idsf.dim();
        let mut out = Vec::with_capacity(self.source.len() * d);
        for &i in &self.source {
            out.extend(scene.idsf.feature(i).iter().map(|&v| v as f64));
        }
        out
    }

    /// Gathers any per-Gaussian row-major table onto the visible splats.
    pub fn gather(&self, table: &[f64], dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.source.len() * dim);
        for &i in &self.source {
            out.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        out
    }

    pub fn labels(&self, scene: &Scene) -> Vec<u32> {
        self.source.iter().map(|&i| scene.idsf.labels()[i]).collect()
    }
}

/// Owned per-splat buffers for a scene, so a [`Payload`] can borrow them.
struct SceneBuffers {
    colors: Vec<[f64; 3]>,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl SceneBuffers {
    fn new(proj: &ProjectedScene, scene: &Scene, channels: Channels) -> Self {
        Self {
            colors: if channels.color { proj.colors(scene) } else { Vec::new() },
            features: if channels.feature { proj.features(scene) } else { Vec::new() },
            labels: if channels.id { proj.labels(scene) } else { Vec::new() },
        }
    }

    fn payload(&self, scene: &Scene, channels: Channels) -> Payload<'_> {
        Payload {
            colors: channels.color.then_some(&self.colors[..]),
            features: channels
                .feature
                .then_some((&self.features[..], scene.idsf.dim())),
            labels: channels
                .id
                .then_some((&self.labels[..], scene.idsf.n_groups())),
            depth: channels.depth,
        }
    }
}

fn background_for(cam: &Camera) -> Background {
    Background {
        color: [0.0; 3],
        far: cam.far,
    }
}

/// Renders the requested channels of a scene from one camera.
pub fn render(scene: &Scene, cam: &Camera, channels: Channels) -> (RenderOutput, ForwardState) {
    let proj = ProjectedScene::project(scene, cam);
    let bufs = SceneBuffers::new(&proj, scene, channels);
    rasterize(
        &proj.splats,
        &bufs.payload(scene, channels),
        cam.width,
        cam.height,
        &background_for(cam),
    )
}

/// Same contract as [`render`], computed by the per-pixel reference.
pub fn render_oracle(scene: &Scene, cam: &Camera, channels: Channels) -> RenderOutput {
    let proj = ProjectedScene::project(scene, cam);
    let bufs = SceneBuffers::new(&proj, scene, channels);
    oracle::rasterize_oracle(
        &proj.splats,
        &bufs.payload(scene, channels),
        cam.width,
        cam.height,
        &background_for(cam),
    )
}

/// Blended instance ids for a scene: the id map and, when dense, the
/// per-channel weights.
pub fn render_id_map(scene: &Scene, cam: &Camera) -> (Vec<u32>, Option<Vec<f64>>) {
    let channels = Channels {
        color: false,
        feature: false,
        id: true,
        depth: false,
    };
    let (out, _) = render(scene, cam, channels);
    (out.id_map.unwrap(), out.id_weights)
}

/// Gradients of a scene render with respect to the visible splats; `proj`
/// must be the projection the forward pass used.
pub fn render_backward(
    scene: &Scene,
    proj: &ProjectedScene,
    state: &ForwardState,
    upstream: &Upstream,
) -> Result<RenderGrads> {
    let colors = upstream.color.map(|_| proj.colors(scene));
    let features = upstream.feature.map(|_| proj.features(scene));
    let payload = Payload {
        colors: colors.as_deref(),
        features: features.as_deref().map(|f| (f, scene.idsf.dim())),
        labels: None,
        depth: false,
    };
    rasterize_backward(&proj.splats, &payload, state, upstream)
}
