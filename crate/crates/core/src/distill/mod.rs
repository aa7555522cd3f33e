//! Supervision of the semantic field from a 2D teacher at pixel and
//! instance level.

pub mod head;
pub mod teacher;

pub use head::{render_features, render_features_backward, Downsampler, FeatureRender, Head};
pub use teacher::{FileTeacher, Patch, SyntheticTeacher, Teacher, NO_CLASS};

use crate::error::{Error, Result};
use crate::scene::UNASSIGNED;

/// Row-major `height × width × dim` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let p = y * self.width + x;
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let p = y * self.width + x;
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    fn check_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if (self.width, self.height, self.dim) != (other.width, other.height, other.dim) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}×{}×{} vs {}×{}×{}",
                self.height, self.width, self.dim, other.height, other.width, other.dim
            )));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all entries.
pub fn pixel_distill_loss(predicted: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    predicted.check_shape(target, "pixel distillation")?;
    let n = predicted.data.len().max(1) as f64;
    Ok(predicted.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Instance-level targets: a piecewise-constant map and the pixels any mask
/// covers.
#[derive(Clone, Debug)]
pub struct InstanceFeatures {
    pub map: FeatureMap,
    pub covered: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct MultilevelLoss {
    pub total: f64,
    pub pixel: f64,
    pub instance: f64,
    /// Gradient with respect to the downsampled prediction.
    pub d_downsampled: FeatureMap,
    /// Gradient with respect to the full-resolution prediction.
    pub d_full: FeatureMap,
}

/// Pixel term at teacher resolution plus `gamma` times the instance term,
/// a mean over covered full-resolution pixels.
pub fn multilevel_loss(
    downsampled: &FeatureMap,
    pixel_target: &FeatureMap,
    full: &FeatureMap,
    instance: &InstanceFeatures,
    gamma: f64,
) -> Result<MultilevelLoss> {
    downsampled.check_shape(pixel_target, "pixel distillation")?;
    full.check_shape(&instance.map, "instance distillation")?;
    let n_pix = downsampled.data.len().max(1) as f64;
    let mut d_down = FeatureMap::zeros(downsampled.width, downsampled.height, downsampled.dim);
    let mut pixel = 0.0;
    for ((g, a), b) in d_down.data.iter_mut().zip(&downsampled.data).zip(&pixel_target.data) {
        pixel += (a - b).abs();
        *g = sign(a - b) / n_pix;
    }
    pixel /= n_pix;

    let d = full.dim;
    let n_cov = instance.covered.iter().filter(|&&c| c).count();
    let mut d_full = FeatureMap::zeros(full.width, full.height, d);
    let mut inst = 0.0;
    if n_cov > 0 {
        let denom = (n_cov * d) as f64;
        for (p, _) in instance.covered.iter().enumerate().filter(|(_, &c)| c) {
            let r = p * d..(p + 1) * d;
            for ((g, a), b) in d_full.data[r.clone()].iter_mut().zip(&full.data[r.clone()]).zip(&instance.map.data[r]) {
                inst += (a - b).abs();
                *g = gamma * sign(a - b) / denom;
            }
        }
        inst /= denom;
    }
    Ok(MultilevelLoss {
        total: pixel + gamma * inst,
        pixel,
        instance: inst,
        d_downsampled: d_down,
        d_full,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub group: u32,
    pub mask: Vec<bool>,
    /// `[x0, y0, x1, y1)` bounds of the mask.
    pub bbox: [usize; 4],
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMasks {
    pub width: usize,
    pub height: usize,
    pub masks: Vec<InstanceMask>,
}

impl InstanceMasks {
    pub fn covered(&self) -> Vec<bool> {
        let mut c = vec![false; self.width * self.height];
        for m in &self.masks {
            c.iter_mut().zip(&m.mask).for_each(|(c, &v)| *c |= v);
        }
        c
    }
}

/// 3×3 erosion (`erode = true`) or dilation. Outside the frame counts as
/// set for erosion and unset for dilation, so frame edges are not eaten.
fn morph(mask: &[bool], w: usize, h: usize, erode: bool) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut v = erode;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    let m = mask[yy * w + xx];
                    if erode {
                        v &= m;
                    } else {
                        v |= m;
                    }
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Per-group masks from an id map, cleaned by a 3×3 opening then closing.
/// Pixels the closing adds are kept only if they are labeled and no other
/// mask claims them; masks smaller than `min_area` are dropped.
pub fn extract_masks(id_map: &[u32], width: usize, height: usize, min_area: usize) -> InstanceMasks {
    let mut groups: Vec<u32> = id_map.iter().copied().filter(|&g| g != UNASSIGNED).collect();
    groups.sort_unstable();
    groups.dedup();
    let refined: Vec<(u32, Vec<bool>)> = groups
        .iter()
        .map(|&g| {
            let raw: Vec<bool> = id_map.iter().map(|&v| v == g).collect();
            let opened = morph(&morph(&raw, width, height, true), width, height, false);
            let closed = morph(&morph(&opened, width, height, false), width, height, true);
            (g, closed)
        })
        .collect();
    let mut claims = vec![0u32; width * height];
    for (_, m) in &refined {
        claims.iter_mut().zip(m).for_each(|(c, &v)| *c += v as u32);
    }
    let mut masks = Vec::new();
    for (g, mut m) in refined {
        for p in 0..m.len() {
            if m[p] && (id_map[p] == UNASSIGNED || (claims[p] > 1 && id_map[p] != g)) {
                m[p] = false;
            }
        }
        let area = m.iter().filter(|&&v| v).count();
        if area == 0 || area < min_area {
            continue;
        }
        let mut bbox = [width, height, 0, 0];
        for (p, _) in m.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (p % width, p / width);
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x + 1), bbox[3].max(y + 1)];
        }
        masks.push(InstanceMask { group: g, mask: m, bbox, area });
    }
    InstanceMasks { width, height, masks }
}

/// Embeds each masked crop of `image` with the teacher and paints the
/// embedding over its mask.
pub fn instance_feature_map(
    image: &[f64],
    masks: &InstanceMasks,
    teacher: &dyn Teacher,
    view: usize,
) -> InstanceFeatures {
    let (w, h) = (masks.width, masks.height);
    let dim = teacher.dim();
    let mut map = FeatureMap::zeros(w, h, dim);
    let covered = masks.covered();
    for m in &masks.masks {
        let [x0, y0, x1, y1] = m.bbox;
        let (cw, ch) = (x1 - x0, y1 - y0);
        let mut rgb = vec![0.0; cw * ch * 3];
        let mut crop_mask = vec![false; cw * ch];
        for y in y0..y1 {
            for x in x0..x1 {
                let (p, c) = (y * w + x, (y - y0) * cw + (x - x0));
                if m.mask[p] {
                    crop_mask[c] = true;
                    rgb[c * 3..c * 3 + 3].copy_from_slice(&image[p * 3..p * 3 + 3]);
                }
            }
        }
        let e = teacher.embed(&Patch {
            view,
            x0,
            y0,
            width: cw,
            height: ch,
            rgb: &rgb,
            mask: &crop_mask,
        });
        for (p, _) in m.mask.iter().enumerate().filter(|(_, &v)| v) {
            map.data[p * dim..(p + 1) * dim].copy_from_slice(&e);
        }
    }
    InstanceFeatures { map, covered }
}

#[cfg(test)]
mod tests;
