//! Synthetic multi-object benchmark: blob-cloud objects on a disc, ring
//! cameras, rendered images, ground-truth instance maps, class embeddings
//! and a teacher built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::distill::SyntheticTeacher;
use crate::error::{Error, Result};
use crate::eval::Aabb;
use crate::io::{load_scene, save_scene, write_ppm, Tensor};
use crate::raster::{render, render_oracle, Channels};
use crate::rng::{purpose, SeedStream};
use crate::scene::{normalize_quat, quat_to_matrix, Camera, Gaussian, Image, Scene, SemanticField, UNASSIGNED};

pub const MAX_PLACEMENT_TRIES: usize = 1000;

const PALETTE: [[f64; 3]; 16] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.30, 0.15],
    [0.60, 0.60, 0.60],
    [0.50, 0.85, 0.50],
    [0.45, 0.20, 0.60],
    [0.95, 0.65, 0.70],
    [0.15, 0.45, 0.40],
    [0.70, 0.70, 0.30],
    [0.30, 0.30, 0.30],
    [0.95, 0.95, 0.85],
];

const NAMES: [&str; 16] = [
    "chair", "lamp", "mug", "plant", "book", "clock", "vase", "shoe", "ball", "bottle", "cup", "hat", "bowl", "box",
    "fan", "kettle",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_objects: usize,
    pub gaussians_per_object: usize,
    /// Radius of the disc object centers are drawn from.
    pub placement_radius: f64,
    /// RMS distance of an object's Gaussians from its center.
    pub object_radius: f64,
    pub palette: Vec<[f64; 3]>,
    pub embedding_dim: usize,
    pub n_train_views: usize,
    pub n_test_views: usize,
    pub image_size: usize,
    pub teacher_stride: usize,
    pub teacher_sigma: f64,
    /// Halves the separation and gives the first two objects one color.
    pub hard_mode: bool,
    pub camera_distance: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_objects: 4,
            gaussians_per_object: 200,
            placement_radius: 1.0,
            object_radius: 0.15,
            palette: PALETTE.to_vec(),
            embedding_dim: 32,
            n_train_views: 24,
            n_test_views: 6,
            image_size: 128,
            teacher_stride: 2,
            teacher_sigma: 0.0,
            hard_mode: false,
            camera_distance: 3.2,
            seed: 42,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=16).contains(&self.n_objects) && self.n_objects != 1 {
            return bad(format!("n_objects must be in 1..=16, got {}", self.n_objects));
        }
        if !(50..=500).contains(&self.gaussians_per_object) {
            return bad(format!("gaussians_per_object must be in 50..=500, got {}", self.gaussians_per_object));
        }
        if self.palette.len() < self.n_objects {
            return bad(format!("palette has {} colors for {} objects", self.palette.len(), self.n_objects));
        }
        if self.embedding_dim < self.n_objects || self.embedding_dim > 512 {
            return bad(format!(
                "embedding_dim {} must be in n_objects..=512",
                self.embedding_dim
            ));
        }
        if self.image_size < 16 || self.teacher_stride == 0 || self.image_size % self.teacher_stride != 0 {
            return bad(format!(
                "image_size {} must be at least 16 and divisible by teacher_stride {}",
                self.image_size, self.teacher_stride
            ));
        }
        if self.n_train_views == 0 {
            return bad("n_train_views must be at least 1".into());
        }
        let positive = [
            ("placement_radius", self.placement_radius),
            ("object_radius", self.object_radius),
            ("camera_distance", self.camera_distance),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
            return bad(format!("{k} must be positive"));
        }
        if !(self.teacher_sigma >= 0.0) {
            return bad("teacher_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Minimum distance between object centers.
    pub fn separation(&self) -> f64 {
        if self.hard_mode {
            2.0 * self.object_radius
        } else {
            4.0 * self.object_radius
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_objects" => self.n_objects = parse(key, value)?,
            "gaussians_per_object" => self.gaussians_per_object = parse(key, value)?,
            "placement_radius" => self.placement_radius = parse(key, value)?,
            "object_radius" => self.object_radius = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "n_train_views" => self.n_train_views = parse(key, value)?,
            "n_test_views" => self.n_test_views = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "teacher_stride" => self.teacher_stride = parse(key, value)?,
            "teacher_sigma" => self.teacher_sigma = parse(key, value)?,
            "hard_mode" => self.hard_mode = parse(key, value)?,
            "camera_distance" => self.camera_distance = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "palette" => {
                self.palette = value
                    .split(';')
                    .filter(|c| !c.trim().is_empty())
                    .map(|c| {
                        let v: Vec<f64> = c.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?;
                        <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("palette entry '{c}' is not r,g,b")))
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines, readable back through [`SynthSpec::set`].
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let palette: Vec<String> = self
            .palette
            .iter()
            .map(|c| format!("{},{},{}", c[0], c[1], c[2]))
            .collect();
        let _ = writeln!(s, "n_objects={}", self.n_objects);
        let _ = writeln!(s, "gaussians_per_object={}", self.gaussians_per_object);
        let _ = writeln!(s, "placement_radius={}", self.placement_radius);
        let _ = writeln!(s, "object_radius={}", self.object_radius);
        let _ = writeln!(s, "palette={}", palette.join(";"));
        let _ = writeln!(s, "embedding_dim={}", self.embedding_dim);
        let _ = writeln!(s, "n_train_views={}", self.n_train_views);
        let _ = writeln!(s, "n_test_views={}", self.n_test_views);
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "teacher_stride={}", self.teacher_stride);
        let _ = writeln!(s, "teacher_sigma={}", self.teacher_sigma);
        let _ = writeln!(s, "hard_mode={}", self.hard_mode);
        let _ = writeln!(s, "camera_distance={}", self.camera_distance);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", n + 1)))?;
            if !spec.set(k.trim(), v)? {
                return Err(Error::Config(format!("manifest line {}: unknown key '{}'", n + 1, k.trim())));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// True object per Gaussian.
    pub object_ids: Vec<u32>,
    pub class_names: Vec<String>,
    /// Unit class embeddings, one per object.
    pub embeddings: Vec<Vec<f64>>,
    pub boxes: Vec<Aabb>,
    pub object_radius: f64,
    /// Per training view, the true object per pixel (`UNASSIGNED` on
    /// background).
    pub train_id_maps: Vec<Vec<u32>>,
    pub test_cameras: Vec<Camera>,
    pub test_images: Vec<Vec<f64>>,
    pub test_id_maps: Vec<Vec<u32>>,
}

impl GroundTruth {
    pub fn n_objects(&self) -> usize {
        self.class_names.len()
    }

    /// Teacher over the training views.
    pub fn teacher(&self, spec: &SynthSpec) -> Result<SyntheticTeacher> {
        SyntheticTeacher::new(
            spec.image_size,
            spec.image_size,
            self.train_id_maps.clone(),
            self.class_names.clone(),
            self.embeddings.clone(),
            spec.teacher_stride,
            spec.teacher_sigma,
            spec.seed,
        )
    }
}

fn random_rotation(rng: &mut crate::rng::Rng) -> [f64; 4] {
    normalize_quat([0; 4].map(|_| rng.sample(StandardNormal)))
}

fn ring_camera(spec: &SynthSpec, azimuth: f64, elevation: f64) -> Camera {
    let d = spec.camera_distance;
    let eye = [
        d * elevation.cos() * azimuth.cos(),
        d * elevation.cos() * azimuth.sin(),
        d * elevation.sin(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], spec.image_size, spec.image_size, 0.9)
}

/// Gram-Schmidt over random Gaussian vectors.
fn class_embeddings(n: usize, dim: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Box around member centers grown by three times each member's largest
/// scale.
pub fn blob_box(scene: &Scene, members: impl Iterator<Item = usize>) -> Aabb {
    let mut b = Aabb {
        min: [f64::INFINITY; 3],
        max: [f64::NEG_INFINITY; 3],
    };
    for i in members {
        let g = &scene.gaussians[i];
        let pad = 3.0 * g.scale().iter().cloned().fold(0.0, f64::max);
        for k in 0..3 {
            let p = g.position[k] as f64;
            b.min[k] = b.min[k].min(p - pad);
            b.max[k] = b.max[k].max(p + pad);
        }
    }
    b
}

fn id_maps(scene: &Scene, object_ids: &[u32], cams: &[Camera]) -> Vec<Vec<u32>> {
    let mut labeled = scene.clone();
    labeled.idsf = SemanticField::from_parts(0, Vec::new(), object_ids.to_vec()).expect("empty features");
    let channels = Channels {
        color: false,
        feature: false,
        id: true,
        depth: false,
    };
    cams.par_iter()
        .map(|c| render_oracle(&labeled, c, channels).id_map.expect("ids requested"))
        .collect()
}

/// Builds the ground-truth scene and everything known about it.
pub fn generate(spec: &SynthSpec) -> Result<(Scene, GroundTruth)> {
    spec.validate()?;
    let seeds = SeedStream::new(spec.seed);
    let mut place = seeds.stream(purpose::SYNTH_PLACEMENT, 0);
    let sep = spec.separation();
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(spec.n_objects);
    let mut tries = 0;
    while centers.len() < spec.n_objects {
        if tries == MAX_PLACEMENT_TRIES {
            return Err(Error::InfeasiblePlacement {
                objects: spec.n_objects,
                tries,
            });
        }
        tries += 1;
        let r = spec.placement_radius * place.random::<f64>().sqrt();
        let t = place.random_range(0.0..std::f64::consts::TAU);
        let c = [r * t.cos(), r * t.sin(), 0.0];
        let ok = centers
            .iter()
            .all(|o| ((o[0] - c[0]).powi(2) + (o[1] - c[1]).powi(2)).sqrt() >= sep);
        if ok {
            centers.push(c);
        }
    }

    let mut gaussians = Vec::with_capacity(spec.n_objects * spec.gaussians_per_object);
    let mut object_ids = Vec::with_capacity(gaussians.capacity());
    for (o, c) in centers.iter().enumerate() {
        let mut rng = seeds.stream(purpose::SYNTH_OBJECT, o as u64);
        let base = if spec.hard_mode && o == 1 { spec.palette[0] } else { spec.palette[o] };
        // Anisotropic axes with RMS radius equal to object_radius.
        let raw: [f64; 3] = [0; 3].map(|_| rng.random_range(0.7..1.3));
        let s = spec.object_radius / raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let axes = raw.map(|v| v * s);
        let rot: Matrix3<f64> = quat_to_matrix(random_rotation(&mut rng));
        for _ in 0..spec.gaussians_per_object {
            let z = Vector3::from([0; 3].map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-2.5, 2.5)));
            let local = Vector3::new(axes[0] * z[0], axes[1] * z[1], axes[2] * z[2]);
            let p = rot * local + Vector3::from(*c);
            let scale = [0; 3].map(|_| spec.object_radius * rng.random_range(0.15..0.3));
            let color = base.map(|b| (b * rng.random_range(0.9..1.1)).clamp(0.0, 1.0));
            let opacity = rng.random_range(0.75..0.95);
            gaussians.push(Gaussian::new([p.x, p.y, p.z], random_rotation(&mut rng), scale, opacity, color));
            object_ids.push(o as u32);
        }
    }

    let mut scene = Scene::new(gaussians, 0);
    let step = std::f64::consts::TAU / spec.n_train_views as f64;
    scene.cameras = (0..spec.n_train_views)
        .map(|k| ring_camera(spec, k as f64 * step, 30f64.to_radians()))
        .collect();
    let test_step = std::f64::consts::TAU / spec.n_test_views.max(1) as f64;
    let test_cameras: Vec<Camera> = (0..spec.n_test_views)
        .map(|k| ring_camera(spec, (k as f64 + 0.37) * test_step, 40f64.to_radians()))
        .collect();
    let render_color = |c: &Camera| render(&scene, c, Channels::COLOR).0.color.expect("color requested");
    let train_images: Vec<Vec<f64>> = scene.cameras.iter().map(render_color).collect();
    let test_images: Vec<Vec<f64>> = test_cameras.iter().map(render_color).collect();
    scene.train_images = train_images
        .iter()
        .map(|im| Image::from_f64(spec.image_size, spec.image_size, im))
        .collect();

    let mut emb_rng = seeds.stream(purpose::SYNTH_EMBEDDING, 0);
    let embeddings = class_embeddings(spec.n_objects, spec.embedding_dim, &mut emb_rng);
    let boxes = (0..spec.n_objects)
        .map(|o| blob_box(&scene, (0..scene.len()).filter(|&i| object_ids[i] == o as u32)))
        .collect();
    let train_id_maps = id_maps(&scene, &object_ids, &scene.cameras);
    let test_id_maps = id_maps(&scene, &object_ids, &test_cameras);
    let truth = GroundTruth {
        object_ids,
        class_names: NAMES.iter().take(spec.n_objects).map(|s| s.to_string()).collect(),
        embeddings,
        boxes,
        object_radius: spec.object_radius,
        train_id_maps,
        test_cameras,
        test_images,
        test_id_maps,
    };
    Ok((scene, truth))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Position noise as a fraction of the object radius.
    pub position_sigma: f64,
    pub color_sigma: f64,
    /// Opacity every Gaussian is reset to, if any.
    pub opacity: Option<f64>,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            position_sigma: 0.05,
            color_sigma: 0.05,
            opacity: Some(0.5),
            seed: 42,
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self {
            position_sigma: 0.0,
            color_sigma: 0.0,
            opacity: None,
            seed: 0,
        }
    }
}

/// Training start state: jittered positions and colors, reset opacities
/// and an empty semantic field.
pub fn perturb_for_training(scene: &Scene, truth: &GroundTruth, cfg: &PerturbConfig) -> Scene {
    let mut out = scene.clone();
    let mut rng = SeedStream::new(cfg.seed).stream(purpose::PERTURB, 0);
    let sp = cfg.position_sigma * truth.object_radius;
    for g in &mut out.gaussians {
        for k in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            g.position[k] = (g.position[k] as f64 + sp * z) as f32;
        }
        for k in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            g.color[k] = (g.color[k] as f64 + cfg.color_sigma * z).clamp(0.0, 1.0) as f32;
        }
        if let Some(o) = cfg.opacity {
            g.opacity_logit = crate::scene::logit(o) as f32;
        }
    }
    out.idsf = SemanticField::new(out.len(), scene.idsf.dim());
    out
}

fn camera_row(c: &Camera) -> Vec<f64> {
    let mut r = vec![c.fx, c.fy, c.cx, c.cy];
    for i in 0..3 {
        for j in 0..3 {
            r.push(c.rotation[(i, j)]);
        }
    }
    r.extend(c.translation.iter());
    r.extend([c.width as f64, c.height as f64, c.near, c.far]);
    r
}

fn camera_from_row(r: &[f64]) -> Camera {
    Camera {
        fx: r[0],
        fy: r[1],
        cx: r[2],
        cy: r[3],
        rotation: Matrix3::from_row_slice(&r[4..13]),
        translation: Vector3::new(r[13], r[14], r[15]),
        width: r[16] as usize,
        height: r[17] as usize,
        near: r[18],
        far: r[19],
    }
}

const CAMERA_ROW: usize = 20;

fn ids_tensor(maps: &[Vec<u32>], size: usize) -> Result<Tensor> {
    let data = maps
        .iter()
        .flatten()
        .map(|&v| if v == UNASSIGNED { -1 } else { v as i64 })
        .collect();
    Tensor::i64(&[maps.len(), size, size], data)
}

fn ids_from_tensor(t: &Tensor, size: usize) -> Result<Vec<Vec<u32>>> {
    let d = t.dims_usize();
    if d.len() != 3 || d[1] != size || d[2] != size {
        return Err(Error::ShapeMismatch(format!("id maps of shape {d:?} for {size}px images")));
    }
    Ok(t.as_i64()?
        .chunks(size * size)
        .map(|c| c.iter().map(|&v| if v < 0 { UNASSIGNED } else { v as u32 }).collect())
        .collect())
}

/// Writes a benchmark directory: the manifest, the training start scene,
/// the ground-truth scene, ground-truth tensors, the vocabulary and PPM
/// previews of every view.
pub fn write_benchmark(dir: impl AsRef<Path>, spec: &SynthSpec, truth_scene: &Scene, truth: &GroundTruth, start: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::write(dir.join("manifest.txt"), spec.to_manifest())?;
    save_scene(start, dir.join("scene.idsf"))?;
    save_scene(truth_scene, dir.join("truth.idsf"))?;
    let n = spec.image_size;
    Tensor::i64(&[truth.object_ids.len()], truth.object_ids.iter().map(|&v| v as i64).collect())?
        .save(dir.join("gt_object_ids.tnsr"))?;
    ids_tensor(&truth.train_id_maps, n)?.save(dir.join("gt_train_ids.tnsr"))?;
    ids_tensor(&truth.test_id_maps, n)?.save(dir.join("gt_test_ids.tnsr"))?;
    Tensor::f64(
        &[truth.test_cameras.len(), CAMERA_ROW],
        truth.test_cameras.iter().flat_map(camera_row).collect(),
    )?
    .save(dir.join("test_cameras.tnsr"))?;
    Tensor::f32(
        &[truth.test_images.len(), n, n, 3],
        truth.test_images.iter().flatten().map(|&v| v as f32).collect(),
    )?
    .save(dir.join("test_images.tnsr"))?;
    Tensor::f64(
        &[truth.boxes.len(), 6],
        truth.boxes.iter().flat_map(|b| b.min.into_iter().chain(b.max)).collect(),
    )?
    .save(dir.join("gt_boxes.tnsr"))?;
    fs::write(dir.join("vocab.txt"), truth.class_names.join("\n") + "\n")?;
    Tensor::f64(
        &[truth.embeddings.len(), spec.embedding_dim],
        truth.embeddings.iter().flatten().copied().collect(),
    )?
    .save(dir.join("vocab.tnsr"))?;
    for (v, im) in truth_scene.train_images.iter().enumerate() {
        write_ppm(dir.join(format!("images/train_{v:03}.ppm")), n, n, &im.to_f64())?;
    }
    for (v, im) in truth.test_images.iter().enumerate() {
        write_ppm(dir.join(format!("images/test_{v:03}.ppm")), n, n, im)?;
    }
    Ok(())
}

/// A benchmark directory read back into memory.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: SynthSpec,
    pub start: Scene,
    pub truth_scene: Scene,
    pub truth: GroundTruth,
}

pub fn read_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let spec = SynthSpec::from_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let start = load_scene(dir.join("scene.idsf"))?;
    let truth_scene = load_scene(dir.join("truth.idsf"))?;
    let n = spec.image_size;
    let object_ids: Vec<u32> = Tensor::load(dir.join("gt_object_ids.tnsr"))?
        .as_i64()?
        .iter()
        .map(|&v| v as u32)
        .collect();
    if object_ids.len() != start.len() {
        return Err(Error::ShapeMismatch("object ids vs scene size".into()));
    }
    let train_id_maps = ids_from_tensor(&Tensor::load(dir.join("gt_train_ids.tnsr"))?, n)?;
    let test_id_maps = ids_from_tensor(&Tensor::load(dir.join("gt_test_ids.tnsr"))?, n)?;
    let cams = Tensor::load(dir.join("test_cameras.tnsr"))?;
    if cams.dims_usize().get(1) != Some(&CAMERA_ROW) {
        return Err(Error::ShapeMismatch("test camera rows".into()));
    }
    let test_cameras: Vec<Camera> = cams.as_f64()?.chunks(CAMERA_ROW).map(camera_from_row).collect();
    let test_images: Vec<Vec<f64>> = Tensor::load(dir.join("test_images.tnsr"))?
        .as_f64()?
        .chunks(n * n * 3)
        .map(<[f64]>::to_vec)
        .collect();
    let boxes: Vec<Aabb> = Tensor::load(dir.join("gt_boxes.tnsr"))?
        .as_f64()?
        .chunks(6)
        .map(|r| Aabb {
            min: [r[0], r[1], r[2]],
            max: [r[3], r[4], r[5]],
        })
        .collect();
    let class_names: Vec<String> = fs::read_to_string(dir.join("vocab.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let embeddings: Vec<Vec<f64>> = Tensor::load(dir.join("vocab.tnsr"))?
        .as_f64()?
        .chunks(spec.embedding_dim)
        .map(<[f64]>::to_vec)
        .collect();
    if class_names.len() != spec.n_objects || embeddings.len() != spec.n_objects || boxes.len() != spec.n_objects {
        return Err(Error::ShapeMismatch("vocabulary or boxes do not match n_objects".into()));
    }
    if test_cameras.len() != test_images.len() || test_cameras.len() != test_id_maps.len() {
        return Err(Error::ShapeMismatch("test views are inconsistent".into()));
    }
    Ok(Benchmark {
        truth: GroundTruth {
            object_ids,
            class_names,
            embeddings,
            boxes,
            object_radius: spec.object_radius,
            train_id_maps,
            test_cameras,
            test_images,
            test_id_maps,
        },
        spec,
        start,
        truth_scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            gaussians_per_object: 60,
            n_train_views: 6,
            n_test_views: 2,
            image_size: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn single_object_shares_id_and_box() {
        let spec = SynthSpec {
            n_objects: 1,
            ..small()
        };
        let (scene, truth) = generate(&spec).unwrap();
        assert!(truth.object_ids.iter().all(|&o| o == 0));
        assert_eq!(truth.boxes[0], blob_box(&scene, 0..scene.len()));
        scene.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a.gaussians, b.gaussians);
        assert_eq!(a.train_images, b.train_images);
        assert_eq!(ta, tb);
    }

    #[test]
    fn default_spec_shows_all_objects() {
        let spec = SynthSpec::default();
        let (scene, truth) = generate(&spec).unwrap();
        scene.validate().unwrap();
        let full = truth
            .train_id_maps
            .iter()
            .filter(|m| {
                let mut seen: Vec<u32> = m.iter().copied().filter(|&v| v != UNASSIGNED).collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len() >= 4
            })
            .count();
        assert!(full >= 20, "only {full} views show all objects");
        for i in 0..truth.embeddings.len() {
            for j in 0..i {
                let c: f64 = truth.embeddings[i].iter().zip(&truth.embeddings[j]).map(|(a, b)| a * b).sum();
                assert!(c.abs() <= 0.2);
            }
        }
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let spec = SynthSpec {
            n_objects: 16,
            placement_radius: 0.2,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::InfeasiblePlacement { .. })));
    }

    #[test]
    fn perturbation_cases() {
        let (scene, truth) = generate(&small()).unwrap();
        let same = perturb_for_training(&scene, &truth, &PerturbConfig::none());
        assert_eq!(same.gaussians, scene.gaussians);
        assert!(same.idsf.labels().iter().all(|&l| l == UNASSIGNED));
        let a = perturb_for_training(&scene, &truth, &PerturbConfig::default());
        let b = perturb_for_training(&scene, &truth, &PerturbConfig::default());
        assert_eq!(a.gaussians, b.gaussians);
        assert_ne!(a.gaussians, scene.gaussians);
        assert!(a.gaussians.iter().all(|g| (g.opacity() - 0.5).abs() < 1e-6));
    }

    #[test]
    fn hard_mode_shares_a_color() {
        let spec = SynthSpec {
            hard_mode: true,
            ..small()
        };
        assert_eq!(spec.separation(), 2.0 * spec.object_radius);
        let (scene, truth) = generate(&spec).unwrap();
        let mean = |o: u32| {
            let idx: Vec<usize> = (0..scene.len()).filter(|&i| truth.object_ids[i] == o).collect();
            let mut m = [0.0; 3];
            for &i in &idx {
                for k in 0..3 {
                    m[k] += scene.gaussians[i].color[k] as f64 / idx.len() as f64;
                }
            }
            m
        };
        let (a, b) = (mean(0), mean(1));
        assert!((0..3).all(|k| (a[k] - b[k]).abs() < 0.03));
    }

    #[test]
    fn benchmark_round_trip() {
        let spec = small();
        let (scene, truth) = generate(&spec).unwrap();
        let start = perturb_for_training(&scene, &truth, &PerturbConfig::default());
        let dir = tempfile::tempdir().unwrap();
        write_benchmark(dir.path(), &spec, &scene, &truth, &start).unwrap();
        let b = read_benchmark(dir.path()).unwrap();
        assert_eq!(b.spec, spec);
        assert_eq!(b.start.gaussians, start.gaussians);
        assert_eq!(b.truth.train_id_maps, truth.train_id_maps);
        assert_eq!(b.truth.test_id_maps, truth.test_id_maps);
        assert_eq!(b.truth.test_cameras, truth.test_cameras);
        assert_eq!(b.truth.class_names, truth.class_names);
        assert_eq!(b.truth.embeddings, truth.embeddings);
        assert_eq!(b.truth.boxes, truth.boxes);
        for (x, y) in b.truth.test_images.iter().zip(&truth.test_images) {
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-6));
        }
    }
}
