//! Sources of 2D supervision: a dense per-view feature map, an encoder for
//! masked image crops, and a vocabulary of query embeddings.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::io::Tensor;
use crate::rng::{purpose, SeedStream};

/// A masked crop of a training view.
pub struct Patch<'a> {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// `height × width × 3`, zero outside the mask.
    pub rgb: &'a [f64],
    pub mask: &'a [bool],
}

pub trait Teacher: Send + Sync {
    /// Embedding dimension.
    fn dim(&self) -> usize;
    fn n_views(&self) -> usize;
    /// Dense features of a training view at teacher resolution.
    fn pixel_features(&self, view: usize) -> Result<&FeatureMap>;
    /// Unit embedding of a masked crop, or zero when it shows nothing.
    fn embed(&self, patch: &Patch) -> Vec<f64>;
    /// Named query embeddings, unit norm.
    fn vocabulary(&self) -> &[(String, Vec<f64>)];

    fn query(&self, name: &str) -> Result<&[f64]> {
        self.vocabulary()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| &e[..])
            .ok_or_else(|| Error::UnknownQuery {
                name: name.to_string(),
                valid: self.vocabulary().iter().map(|(n, _)| n.clone()).collect(),
            })
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Adds isotropic noise with expected squared norm `sigma²` and renormalizes.
fn corrupt(v: &mut [f64], sigma: f64, rng: &mut impl rand::Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma / (v.len() as f64).sqrt()).unwrap();
        v.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    normalize(v);
}

/// Teacher built from known per-pixel classes.
///
/// The dense map is the class embedding of each pixel (zero on background),
/// box-blurred over 3×3 pixels, average-pooled by `stride`, perturbed and
/// renormalized. Crops embed to the class covering most of their masked
/// pixels; background does not count.
pub struct SyntheticTeacher {
    width: usize,
    height: usize,
    class_maps: Vec<Vec<u32>>,
    embeddings: Vec<Vec<f64>>,
    vocabulary: Vec<(String, Vec<f64>)>,
    maps: Vec<FeatureMap>,
    sigma: f64,
    seeds: SeedStream,
}

/// Marks pixels that show no class.
pub const NO_CLASS: u32 = u32::MAX;

impl SyntheticTeacher {
    pub fn new(
        width: usize,
        height: usize,
        class_maps: Vec<Vec<u32>>,
        names: Vec<String>,
        embeddings: Vec<Vec<f64>>,
        stride: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if stride == 0 || width % stride != 0 || height % stride != 0 {
            return Err(Error::Config(format!(
                "image {width}×{height} not divisible by teacher stride {stride}"
            )));
        }
        if names.len() != embeddings.len() {
            return Err(Error::ShapeMismatch("class names vs embeddings".into()));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        let seeds = SeedStream::new(seed);
        let maps = class_maps
            .iter()
            .enumerate()
            .map(|(v, cm)| {
                let mut rng = seeds.stream(purpose::TEACHER_PIXEL, v as u64);
                dense_map(cm, width, height, &embeddings, dim, stride, sigma, &mut rng)
            })
            .collect();
        let vocabulary = names.into_iter().zip(embeddings.iter().cloned()).collect();
        Ok(Self {
            width,
            height,
            class_maps,
            embeddings,
            vocabulary,
            maps,
            sigma,
            seeds,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_map(
    classes: &[u32],
    width: usize,
    height: usize,
    embeddings: &[Vec<f64>],
    dim: usize,
    stride: usize,
    sigma: f64,
    rng: &mut impl rand::Rng,
) -> FeatureMap {
    let mut full = vec![0.0; width * height * dim];
    for (p, &c) in classes.iter().enumerate() {
        if c != NO_CLASS {
            full[p * dim..(p + 1) * dim].copy_from_slice(&embeddings[c as usize]);
        }
    }
    let mut blurred = vec![0.0; width * height * dim];
    for y in 0..height {
        for x in 0..width {
            let out = &mut blurred[(y * width + x) * dim..(y * width + x + 1) * dim];
            let mut count = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(height) {
                for xx in x.saturating_sub(1)..(x + 2).min(width) {
                    count += 1.0;
                    let src = &full[(yy * width + xx) * dim..(yy * width + xx + 1) * dim];
                    out.iter_mut().zip(src).for_each(|(o, s)| *o += s);
                }
            }
            out.iter_mut().for_each(|o| *o /= count);
        }
    }
    let (tw, th) = (width / stride, height / stride);
    let mut map = FeatureMap::zeros(tw, th, dim);
    let inv = 1.0 / (stride * stride) as f64;
    for ty in 0..th {
        for tx in 0..tw {
            let out = map.pixel_mut(tx, ty);
            for ky in 0..stride {
                for kx in 0..stride {
                    let p = (ty * stride + ky) * width + tx * stride + kx;
                    out.iter_mut()
                        .zip(&blurred[p * dim..(p + 1) * dim])
                        .for_each(|(o, s)| *o += s * inv);
                }
            }
            if out.iter().map(|v| v * v).sum::<f64>() > 1e-18 {
                corrupt(out, sigma, rng);
            } else {
                out.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    map
}

impl Teacher for SyntheticTeacher {
    fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    fn n_views(&self) -> usize {
        self.maps.len()
    }

    fn pixel_features(&self, view: usize) -> Result<&FeatureMap> {
        self.maps
            .get(view)
            .ok_or_else(|| Error::InvalidData(format!("teacher has no view {view}")))
    }

    fn embed(&self, patch: &Patch) -> Vec<f64> {
        let dim = self.dim();
        let Some(classes) = self.class_maps.get(patch.view) else {
            return vec![0.0; dim];
        };
        let mut counts: Vec<usize> = vec![0; self.embeddings.len()];
        for j in 0..patch.height {
            for i in 0..patch.width {
                if !patch.mask[j * patch.width + i] {
                    continue;
                }
                let (x, y) = (patch.x0 + i, patch.y0 + j);
                if x >= self.width || y >= self.height {
                    continue;
                }
                let c = classes[y * self.width + x];
                if c != NO_CLASS {
                    counts[c as usize] += 1;
                }
            }
        }
        let mut best = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = k;
            }
        }
        if counts.get(best).is_none_or(|&c| c == 0) {
            return vec![0.0; dim];
        }
        let key = [patch.view, patch.x0, patch.y0, patch.width, patch.height]
            .iter()
            .fold(0u64, |k, &v| k.wrapping_mul(0x100_0000_01b3) ^ v as u64);
        let mut rng = self.seeds.stream(purpose::TEACHER_EMBED, key);
        let mut e = self.embeddings[best].clone();
        corrupt(&mut e, self.sigma, &mut rng);
        e
    }

    fn vocabulary(&self) -> &[(String, Vec<f64>)] {
        &self.vocabulary
    }
}

/// Teacher read from a directory of tensors: `view_NNN.tnsr` dense maps of
/// shape `H_t × W_t × D_t`, `vocab.tnsr` of shape `classes × D_t` and
/// `vocab.txt` with one class name per line. Crops embed to the normalized
/// mean of the dense map under the mask.
pub struct FileTeacher {
    maps: Vec<FeatureMap>,
    vocabulary: Vec<(String, Vec<f64>)>,
    image_width: usize,
    image_height: usize,
}

impl FileTeacher {
    pub fn load(dir: &Path, image_width: usize, image_height: usize) -> Result<Self> {
        let names = fs::read_to_string(dir.join("vocab.txt"))?;
        let vocab = Tensor::load(&dir.join("vocab.tnsr"))?;
        let dims = vocab.dims_usize();
        if dims.len() != 2 {
            return Err(Error::ShapeMismatch("vocabulary tensor must be 2D".into()));
        }
        let data = vocab.as_f64()?;
        let names: Vec<String> = names.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if names.len() != dims[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} names for {} embeddings",
                names.len(),
                dims[0]
            )));
        }
        let vocabulary = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let mut e = data[i * dims[1]..(i + 1) * dims[1]].to_vec();
                normalize(&mut e);
                (n, e)
            })
            .collect();
        let mut maps = Vec::new();
        loop {
            let path = dir.join(format!("view_{:03}.tnsr", maps.len()));
            if !path.exists() {
                break;
            }
            let t = Tensor::load(&path)?;
            let d = t.dims_usize();
            if d.len() != 3 || d[2] != dims[1] {
                return Err(Error::ShapeMismatch(format!("{} has shape {d:?}", path.display())));
            }
            maps.push(FeatureMap {
                width: d[1],
                height: d[0],
                dim: d[2],
                data: t.as_f64()?,
            });
        }
        Ok(Self {
            maps,
            vocabulary,
            image_width,
            image_height,
        })
    }
}

impl Teacher for FileTeacher {
    fn dim(&self) -> usize {
        self.vocabulary.first().map_or(0, |(_, e)| e.len())
    }

    fn n_views(&self) -> usize {
        self.maps.len()
    }

    fn pixel_features(&self, view: usize) -> Result<&FeatureMap> {
        self.maps
            .get(view)
            .ok_or_else(|| Error::InvalidData(format!("teacher has no view {view}")))
    }

    fn embed(&self, patch: &Patch) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        let Some(map) = self.maps.get(patch.view) else {
            return out;
        };
        for j in 0..patch.height {
            for i in 0..patch.width {
                if !patch.mask[j * patch.width + i] {
                    continue;
                }
                let tx = (patch.x0 + i) * map.width / self.image_width;
                let ty = (patch.y0 + j) * map.height / self.image_height;
                out.iter_mut().zip(map.pixel(tx, ty)).for_each(|(o, v)| *o += v);
            }
        }
        normalize(&mut out);
        out
    }

    fn vocabulary(&self) -> &[(String, Vec<f64>)] {
        &self.vocabulary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, k: usize) -> Vec<f64> {
        (0..dim).map(|i| (i == k) as u32 as f64).collect()
    }

    fn disc_map(w: usize, h: usize) -> Vec<u32> {
        (0..w * h)
            .map(|p| {
                let (x, y) = ((p % w) as f64 - 15.5, (p / w) as f64 - 15.5);
                if x * x + y * y < 100.0 {
                    0
                } else {
                    NO_CLASS
                }
            })
            .collect()
    }

    #[test]
    fn noise_free_single_object_is_constant() {
        let t = SyntheticTeacher::new(32, 32, vec![disc_map(32, 32)], vec!["a".into()], vec![basis(8, 2)], 2, 0.0, 1).unwrap();
        let m = t.pixel_features(0).unwrap();
        let mut object_px = 0;
        for ty in 0..16 {
            for tx in 0..16 {
                let v = m.pixel(tx, ty);
                if v.iter().any(|x| *x != 0.0) {
                    object_px += 1;
                    for (a, b) in v.iter().zip(basis(8, 2)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(object_px > 50);
        let mask = vec![true; 32 * 32];
        let rgb = vec![0.5; 32 * 32 * 3];
        let e = t.embed(&Patch { view: 0, x0: 0, y0: 0, width: 32, height: 32, rgb: &rgb, mask: &mask });
        assert_eq!(e, basis(8, 2));
        let corner = vec![true; 4];
        let e = t.embed(&Patch { view: 0, x0: 0, y0: 0, width: 2, height: 2, rgb: &rgb[..12], mask: &corner });
        assert!(e.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noisy_features_stay_close_to_class() {
        let (w, h) = (256, 256);
        let classes = vec![vec![0u32; w * h]];
        let mut e = vec![1.0; 32];
        normalize(&mut e);
        let t = SyntheticTeacher::new(w, h, classes, vec!["a".into()], vec![e.clone()], 2, 0.1, 7).unwrap();
        let m = t.pixel_features(0).unwrap();
        let n = m.width * m.height;
        assert!(n >= 10_000);
        let mean_cos = (0..n)
            .map(|p| m.data[p * 32..(p + 1) * 32].iter().zip(&e).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        assert!(mean_cos >= 0.95, "{mean_cos}");
    }

    #[test]
    fn unknown_query_lists_vocabulary() {
        let t = SyntheticTeacher::new(16, 16, vec![], vec!["cup".into(), "book".into()], vec![basis(4, 0), basis(4, 1)], 2, 0.0, 1).unwrap();
        match t.query("lamp") {
            Err(Error::UnknownQuery { valid, .. }) => assert_eq!(valid, vec!["cup", "book"]),
            _ => panic!("expected unknown query"),
        }
        assert_eq!(t.query("book").unwrap(), &basis(4, 1)[..]);
    }
}
