//! Two-phase optimization: photometric reconstruction of the Gaussians,
//! then bootstrapped semantic training that alternates clustering with
//! distillation, smoothing and contrastive updates.

pub mod adam;
pub mod losses;
pub mod recon;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;

pub use adam::Adam;
pub use losses::{
    build_contrastive_groups, contrastive_loss, cosine, sample_gaussians, smoothing_loss, ContrastiveGroups,
    ContrastiveLoss, Source,
};
pub use recon::{psnr, reconstruction_loss, ssim, ReconLoss};

use crate::cluster::{cluster_scene, knn_graph, ClusterConfig, ClusterResult};
use crate::distill::{
    extract_masks, instance_feature_map, multilevel_loss, render_features, render_features_backward, Downsampler,
    Head, Teacher,
};
use crate::error::{Error, Result};
use crate::io::{load_scene, save_scene, Tensor};
use crate::raster::{rasterize, render, render_backward, Background, Channels, Payload, ProjectedScene, Upstream};
use crate::rng::{purpose, SeedStream};
use crate::scene::{project_backward, sigmoid, Scene, UNASSIGNED};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    /// Weight of the structural term in the reconstruction loss.
    pub lambda_ssim: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    /// Weight of the instance-level distillation term.
    pub gamma: f64,
    pub tau: f64,
    pub knn_k: usize,
    /// Fraction of Gaussians sampled for smoothing.
    pub t_frac: f64,
    pub sparse_loss_every: usize,
    pub recluster_every: usize,
    pub lr_gauss: f64,
    pub lr_head: f64,
    pub pos_sim_threshold: f64,
    /// Semantic feature dimension D.
    pub feature_dim: usize,
    pub min_mask_area: usize,
    /// Members kept per side and group in the contrastive loss.
    pub contrastive_cap: usize,
    pub cluster: ClusterConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_iters: 30_000,
            phase2_iters: 7_000,
            lambda_ssim: 0.2,
            lambda_s: 0.1,
            lambda_c: 0.05,
            gamma: 0.3,
            tau: 0.1,
            knn_k: 5,
            t_frac: 0.001,
            sparse_loss_every: 10,
            recluster_every: 500,
            lr_gauss: 0.0025,
            lr_head: 0.0001,
            pos_sim_threshold: 0.9,
            feature_dim: 128,
            min_mask_area: 16,
            contrastive_cap: 256,
            cluster: ClusterConfig::default(),
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

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("phase1_iters", self.phase1_iters),
            ("phase2_iters", self.phase2_iters),
            ("sparse_loss_every", self.sparse_loss_every),
            ("recluster_every", self.recluster_every),
            ("knn_k", self.knn_k),
            ("feature_dim", self.feature_dim),
            ("contrastive_cap", self.contrastive_cap),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        let weights = [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
            ("gamma", self.gamma),
            ("lr_gauss", self.lr_gauss),
            ("lr_head", self.lr_head),
        ];
        if let Some((k, _)) = weights.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("{k} must be a finite non-negative number")));
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::Config("lambda_ssim must be at most 1".into()));
        }
        if !(self.t_frac > 0.0 && self.t_frac <= 1.0) {
            return Err(Error::Config("t_frac must be in (0, 1]".into()));
        }
        if self.cluster.min_samples < 1 {
            return Err(Error::Config("min_samples must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets one field by name. Returns `false` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "phase1_iters" => self.phase1_iters = parse(key, value)?,
            "phase2_iters" => self.phase2_iters = parse(key, value)?,
            "lambda_ssim" => self.lambda_ssim = parse(key, value)?,
            "lambda_s" => self.lambda_s = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "t_frac" => self.t_frac = parse(key, value)?,
            "sparse_loss_every" => self.sparse_loss_every = parse(key, value)?,
            "recluster_every" => self.recluster_every = parse(key, value)?,
            "lr_gauss" => self.lr_gauss = parse(key, value)?,
            "lr_head" => self.lr_head = parse(key, value)?,
            "pos_sim_threshold" => self.pos_sim_threshold = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "min_mask_area" => self.min_mask_area = parse(key, value)?,
            "contrastive_cap" => self.contrastive_cap = parse(key, value)?,
            "min_cluster_size" => {
                self.cluster.min_cluster_size = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "min_samples" => self.cluster.min_samples = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Number of Gaussians sampled for smoothing in an `n`-Gaussian scene.
    pub fn smoothing_samples(&self, n: usize) -> usize {
        ((self.t_frac * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

/// Line-delimited `key=value` training records.
pub struct MetricsLog<'a> {
    out: Option<&'a mut dyn Write>,
}

impl<'a> MetricsLog<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        Self { out: Some(out) }
    }

    pub fn none() -> Self {
        Self { out: None }
    }

    fn record(&mut self, line: std::fmt::Arguments) -> Result<()> {
        if let Some(o) = self.out.as_mut() {
            writeln!(o, "{line}")?;
        }
        Ok(())
    }
}

/// Values per Gaussian in the packed geometry/appearance vector.
pub const GAUSS_PARAMS: usize = 14;

/// `[position | rotation | log_scale | opacity_logit | color]` per Gaussian.
pub fn pack_gaussians(scene: &Scene) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.len() * GAUSS_PARAMS);
    for g in &scene.gaussians {
        out.extend(g.position.iter().map(|&v| v as f64));
        out.extend(g.rotation.iter().map(|&v| v as f64));
        out.extend(g.log_scale.iter().map(|&v| v as f64));
        out.push(g.opacity_logit as f64);
        out.extend(g.color.iter().map(|&v| v as f64));
    }
    out
}

/// Writes packed parameters back, renormalizing rotations and clamping
/// colors to [0, 1] in both places.
pub fn unpack_gaussians(params: &mut [f64], scene: &mut Scene) {
    for (p, g) in params.chunks_exact_mut(GAUSS_PARAMS).zip(scene.gaussians.iter_mut()) {
        let n = (p[3] * p[3] + p[4] * p[4] + p[5] * p[5] + p[6] * p[6]).sqrt();
        if n > 0.0 {
            p[3..7].iter_mut().for_each(|v| *v /= n);
        } else {
            p[3..7].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
        p[11..14].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        for k in 0..3 {
            g.position[k] = p[k] as f32;
            g.log_scale[k] = p[7 + k] as f32;
            g.color[k] = p[11 + k] as f32;
        }
        for k in 0..4 {
            g.rotation[k] = p[3 + k] as f32;
        }
        g.opacity_logit = p[10] as f32;
    }
}

/// Reconstruction loss of one view and its gradient with respect to the
/// packed Gaussian parameters.
pub fn reconstruction_step(scene: &Scene, view: usize, lambda: f64) -> Result<(ReconLoss, Vec<f64>)> {
    let cam = &scene.cameras[view];
    let proj = ProjectedScene::project(scene, cam);
    let colors = proj.colors(scene);
    let payload = Payload {
        colors: Some(&colors),
        ..Default::default()
    };
    let bg = Background {
        color: [0.0; 3],
        far: cam.far,
    };
    let (out, state) = rasterize(&proj.splats, &payload, cam.width, cam.height, &bg);
    let target = scene.train_images[view].to_f64();
    let loss = reconstruction_loss(out.color.as_ref().unwrap(), &target, cam.width, cam.height, lambda)?;
    let up = Upstream {
        color: Some(&loss.grad),
        feature: None,
        background: bg.color,
    };
    let rg = render_backward(scene, &proj, &state, &up)?;
    let mut grad = vec![0.0; scene.len() * GAUSS_PARAMS];
    for (k, &i) in proj.source.iter().enumerate() {
        let g = &scene.gaussians[i];
        let gg = project_backward(&g.geometry(), cam, rg.d_mean[k], rg.d_cov[k]);
        let row = &mut grad[i * GAUSS_PARAMS..(i + 1) * GAUSS_PARAMS];
        row[0..3].copy_from_slice(&gg.position);
        row[3..7].copy_from_slice(&gg.rotation);
        row[7..10].copy_from_slice(&gg.log_scale);
        let o = sigmoid(g.opacity_logit as f64);
        row[10] = rg.d_opacity[k] * o * (1.0 - o);
        row[11..14].copy_from_slice(&rg.d_color[k]);
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct Phase1Report {
    pub losses: Vec<f64>,
    pub skipped_updates: u64,
    pub optimizer: Adam,
}

/// Fits geometry and appearance to the training images, one random view
/// per step.
pub fn phase1_reconstruct(scene: &mut Scene, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<Phase1Report> {
    cfg.validate()?;
    scene.validate()?;
    if scene.train_images.is_empty() {
        return Err(Error::InvalidData("phase 1 needs training images".into()));
    }
    let mut params = pack_gaussians(scene);
    let mut opt = Adam::new(params.len());
    let mut views = SeedStream::new(cfg.seed).stream(purpose::VIEW_SCHEDULE, 0);
    let mut losses = Vec::with_capacity(cfg.phase1_iters);
    for it in 0..cfg.phase1_iters {
        let start = Instant::now();
        let v = views.random_range(0..scene.cameras.len());
        let (loss, grad) = reconstruction_step(scene, v, cfg.lambda_ssim)?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence(format!("phase 1 loss is {} at iteration {it}", loss.total)));
        }
        opt.update(&mut params, &grad, cfg.lr_gauss);
        unpack_gaussians(&mut params, scene);
        losses.push(loss.total);
        log.record(format_args!(
            "phase=1 iter={it} view={v} l_r={:.6e} l1={:.6e} ssim={:.6} ms={:.2}",
            loss.total,
            loss.l1,
            loss.ssim,
            start.elapsed().as_secs_f64() * 1e3
        ))?;
    }
    Ok(Phase1Report {
        losses,
        skipped_updates: opt.skipped,
        optimizer: opt,
    })
}

/// PSNR of a render against a reference image.
pub fn render_psnr(scene: &Scene, cam: &crate::scene::Camera, reference: &[f64]) -> f64 {
    let (out, _) = render(scene, cam, Channels::COLOR);
    psnr(out.color.as_ref().unwrap(), reference)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub iter: usize,
    pub view: usize,
    pub l_f: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
    pub n_groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterPass {
    pub iter: usize,
    pub n_groups: usize,
}

/// Optimizer state of the semantic phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOptimizer {
    pub features: Adam,
    pub head: Adam,
    pub down: Adam,
}

/// Unit-sphere features drawn from the seed.
pub fn init_features(scene: &mut Scene, dim: usize, seed: u64) {
    let mut rng = SeedStream::new(seed).stream(purpose::FEATURE_INIT, 0);
    let n = scene.len();
    let mut feats = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let mut f: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        f.iter_mut().for_each(|v| *v /= norm);
        feats.extend(f.into_iter().map(|v| v as f32));
    }
    scene.idsf = crate::scene::SemanticField::from_parts(dim, feats, vec![UNASSIGNED; n]).expect("sizes agree");
}

/// State of the semantic phase: the head, the downsampler, their
/// optimizers and the current grouping. Geometry is never touched.
pub struct Bootstrap<'t> {
    pub cfg: TrainConfig,
    teacher: &'t dyn Teacher,
    pub head: Head,
    pub down: Downsampler,
    pub optimizer: SemanticOptimizer,
    features: Vec<f64>,
    knn: Vec<usize>,
    pub cluster: Option<ClusterResult>,
    pub history: Vec<ClusterPass>,
    views: crate::rng::Rng,
    smooth_rng: crate::rng::Rng,
    contrast_rng: crate::rng::Rng,
}

impl<'t> Bootstrap<'t> {
    /// Uses the scene's current features; call [`init_features`] first for
    /// a fresh start.
    pub fn new(scene: &Scene, teacher: &'t dyn Teacher, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        if teacher.n_views() != scene.cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "teacher has {} views, scene {}",
                teacher.n_views(),
                scene.cameras.len()
            )));
        }
        if scene.train_images.len() != scene.cameras.len() || scene.cameras.is_empty() {
            return Err(Error::InvalidData("phase 2 needs one training image per camera".into()));
        }
        let cam = &scene.cameras[0];
        let tmap = teacher.pixel_features(0)?;
        if cam.width % tmap.width != 0 || cam.width / tmap.width != cam.height / tmap.height.max(1) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} is not an integer multiple of teacher {}x{}",
                cam.width, cam.height, tmap.width, tmap.height
            )));
        }
        let stride = cam.width / tmap.width;
        let seeds = SeedStream::new(cfg.seed);
        let head = Head::new(scene.idsf.dim(), teacher.dim(), &mut seeds.stream(purpose::HEAD_INIT, 0));
        let down = Downsampler::average(teacher.dim(), stride);
        let positions: Vec<f64> = scene
            .gaussians
            .iter()
            .flat_map(|g| g.position.map(|v| v as f64))
            .collect();
        let knn = if scene.len() > cfg.knn_k {
            knn_graph(&positions, cfg.knn_k)
        } else {
            Vec::new()
        };
        Ok(Self {
            optimizer: SemanticOptimizer {
                features: Adam::new(scene.len() * scene.idsf.dim()),
                head: Adam::new(head.params.len()),
                down: Adam::new(down.params.len()),
            },
            features: scene.idsf.features_f64(),
            head,
            down,
            knn,
            cluster: None,
            history: Vec::new(),
            views: seeds.stream(purpose::VIEW_SCHEDULE, 1),
            smooth_rng: seeds.stream(purpose::SMOOTHING_SAMPLE, 0),
            contrast_rng: seeds.stream(purpose::CONTRASTIVE_SAMPLE, 0),
            teacher,
            cfg,
        })
    }

    /// Clusters the scene; an empty result keeps the previous grouping.
    pub fn recluster(&mut self, scene: &mut Scene, iter: usize) -> usize {
        let r = cluster_scene(scene, &self.cfg.cluster);
        if r.n_groups > 0 {
            self.cluster = Some(r);
        } else if let Some(prev) = &self.cluster {
            scene.idsf.labels_mut().copy_from_slice(&prev.labels);
        }
        let n = self.cluster.as_ref().map_or(0, |c| c.n_groups);
        self.history.push(ClusterPass { iter, n_groups: n });
        n
    }

    /// One semantic step on a random training view.
    pub fn step(&mut self, scene: &mut Scene, iter: usize) -> Result<StepLosses> {
        let cfg = &self.cfg;
        let v = self.views.random_range(0..scene.cameras.len());
        let cam = &scene.cameras[v];
        let (w, h) = (cam.width, cam.height);
        let d = scene.idsf.dim();

        let fr = render_features(scene, cam, &self.head, true);
        let fhat = self.down.forward(&fr.features)?;
        let id_map = fr.id_map.as_ref().expect("ids requested");
        let masks = extract_masks(id_map, w, h, cfg.min_mask_area);
        let image = scene.train_images[v].to_f64();
        let inst = instance_feature_map(&image, &masks, self.teacher, v);
        let lf = multilevel_loss(&fhat, self.teacher.pixel_features(v)?, &fr.features, &inst, cfg.gamma)?;

        let mut g_down = vec![0.0; self.down.params.len()];
        let mut d_full = self.down.backward(&fr.features, &lf.d_downsampled, &mut g_down);
        d_full.data.iter_mut().zip(&lf.d_full.data).for_each(|(a, b)| *a += b);
        let mut g_head = vec![0.0; self.head.params.len()];
        let mut g_feat = render_features_backward(scene, &self.head, &fr, &d_full, &mut g_head)?;

        let (mut l_s, mut l_c) = (0.0, 0.0);
        if iter % cfg.sparse_loss_every == 0 {
            if cfg.lambda_s > 0.0 && !self.knn.is_empty() {
                let samples = sample_gaussians(scene.len(), cfg.smoothing_samples(scene.len()), &mut self.smooth_rng);
                let (l, g) = smoothing_loss(&self.features, d, &self.knn, cfg.knn_k, &samples);
                l_s = l;
                g_feat.iter_mut().zip(&g).for_each(|(a, b)| *a += cfg.lambda_s * b);
            }
            if let Some(cluster) = self.cluster.as_ref().filter(|c| c.n_groups >= 2 && cfg.lambda_c > 0.0) {
                let raw_feats = fr.proj.features(scene);
                let payload = Payload {
                    features: Some((&raw_feats, d)),
                    ..Default::default()
                };
                let bg = Background {
                    color: [0.0; 3],
                    far: cam.far,
                };
                let (raw, _) = rasterize(&fr.proj.splats, &payload, w, h, &bg);
                let raw = raw.feature.expect("features requested");
                let groups = build_contrastive_groups(
                    cluster,
                    &self.features,
                    &raw,
                    &masks,
                    cfg.pos_sim_threshold,
                    cfg.contrastive_cap,
                    &mut self.contrast_rng,
                );
                let lc = contrastive_loss(&groups, cfg.tau);
                l_c = lc.value;
                let mut up = vec![0.0; w * h * d];
                let mut any_pixel = false;
                for (set, grads) in groups.members.iter().zip(&lc.grads) {
                    for ((src, _), g) in set.iter().zip(grads) {
                        let (dst, off) = match *src {
                            Source::Gaussian(i) => (&mut g_feat, i * d),
                            Source::Pixel(p) => {
                                any_pixel = true;
                                (&mut up, p * d)
                            }
                        };
                        dst[off..off + d].iter_mut().zip(g).for_each(|(a, b)| *a += cfg.lambda_c * b);
                    }
                }
                if any_pixel {
                    let rg = render_backward(
                        scene,
                        &fr.proj,
                        &fr.state,
                        &Upstream {
                            feature: Some(&up),
                            ..Default::default()
                        },
                    )?;
                    for (k, &i) in fr.proj.source.iter().enumerate() {
                        g_feat[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&rg.d_feature[k * d..(k + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }

        let total = lf.total + cfg.lambda_c * l_c + cfg.lambda_s * l_s;
        if !total.is_finite() {
            return Err(Error::Divergence(format!("phase 2 loss is {total} at iteration {iter}")));
        }
        self.optimizer.features.update(&mut self.features, &g_feat, cfg.lr_gauss);
        self.optimizer.head.update(&mut self.head.params, &g_head, cfg.lr_head);
        self.optimizer.down.update(&mut self.down.params, &g_down, cfg.lr_head);
        scene
            .idsf
            .features_mut()
            .iter_mut()
            .zip(&self.features)
            .for_each(|(a, b)| *a = *b as f32);
        Ok(StepLosses {
            iter,
            view: v,
            l_f: lf.total,
            l_c,
            l_s,
            total,
            n_groups: self.cluster.as_ref().map_or(0, |c| c.n_groups),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Phase2Report {
    pub head: Head,
    pub down: Downsampler,
    pub optimizer: SemanticOptimizer,
    pub cluster: ClusterResult,
    pub history: Vec<ClusterPass>,
    pub trace: Vec<StepLosses>,
}

/// Fresh features, clustering at iteration 0 and every `recluster_every`
/// steps, and a final pass so the labels reflect the trained features.
pub fn phase2_bootstrap(
    scene: &mut Scene,
    teacher: &dyn Teacher,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<Phase2Report> {
    init_features(scene, cfg.feature_dim, cfg.seed);
    let mut b = Bootstrap::new(scene, teacher, cfg.clone())?;
    let mut trace = Vec::with_capacity(cfg.phase2_iters);
    for it in 0..cfg.phase2_iters {
        if it % cfg.recluster_every == 0 {
            let n = b.recluster(scene, it);
            log.record(format_args!("phase=2 iter={it} recluster n_groups={n}"))?;
        }
        let start = Instant::now();
        let s = b.step(scene, it)?;
        log.record(format_args!(
            "phase=2 iter={it} view={} l_f={:.6e} l_c={:.6e} l_s={:.6e} total={:.6e} n_groups={} ms={:.2}",
            s.view,
            s.l_f,
            s.l_c,
            s.l_s,
            s.total,
            s.n_groups,
            start.elapsed().as_secs_f64() * 1e3
        ))?;
        trace.push(s);
    }
    let n = b.recluster(scene, cfg.phase2_iters);
    log.record(format_args!("phase=2 iter={} recluster n_groups={n}", cfg.phase2_iters))?;
    let cluster = match b.cluster.take() {
        Some(c) => c,
        None => ClusterResult::from_labels(scene, scene.idsf.labels().to_vec()),
    };
    Ok(Phase2Report {
        head: b.head,
        down: b.down,
        optimizer: b.optimizer,
        cluster,
        history: b.history,
        trace,
    })
}

/// Trained scene plus the semantic head, downsampler and optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub scene: Scene,
    pub head: Head,
    pub down: Downsampler,
    pub optimizer: Option<SemanticOptimizer>,
}

fn save_adam(dir: &Path, name: &str, a: &Adam) -> Result<()> {
    let mut mv = a.m.clone();
    mv.extend_from_slice(&a.v);
    Tensor::f64(&[2, a.m.len()], mv)?.save(dir.join(format!("adam_{name}.tnsr")))?;
    Tensor::i64(&[2], vec![a.step as i64, a.skipped as i64])?.save(dir.join(format!("adam_{name}_step.tnsr")))
}

fn load_adam(dir: &Path, name: &str) -> Result<Option<Adam>> {
    let path = dir.join(format!("adam_{name}.tnsr"));
    if !path.exists() {
        return Ok(None);
    }
    let t = Tensor::load(&path)?;
    let d = t.dims_usize();
    if d.len() != 2 || d[0] != 2 {
        return Err(Error::ShapeMismatch(format!("{} has shape {d:?}", path.display())));
    }
    let mv = t.as_f64()?;
    let s = Tensor::load(dir.join(format!("adam_{name}_step.tnsr")))?;
    let s = s.as_i64()?;
    if s.len() != 2 {
        return Err(Error::ShapeMismatch("optimizer step tensor".into()));
    }
    Ok(Some(Adam {
        m: mv[..d[1]].to_vec(),
        v: mv[d[1]..].to_vec(),
        step: s[0] as u64,
        skipped: s[1] as u64,
    }))
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        save_scene(&self.scene, dir.join("scene.idsf"))?;
        let h = &self.head;
        Tensor::i64(&[3], vec![h.d_in as i64, h.hidden as i64, h.d_out as i64])?.save(dir.join("head_shape.tnsr"))?;
        Tensor::f64(&[h.params.len()], h.params.clone())?.save(dir.join("head.tnsr"))?;
        Tensor::i64(&[2], vec![self.down.dim as i64, self.down.stride as i64])?.save(dir.join("down_shape.tnsr"))?;
        Tensor::f64(&[self.down.params.len()], self.down.params.clone())?.save(dir.join("down.tnsr"))?;
        if let Some(o) = &self.optimizer {
            save_adam(dir, "features", &o.features)?;
            save_adam(dir, "head", &o.head)?;
            save_adam(dir, "down", &o.down)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let scene = load_scene(dir.join("scene.idsf"))?;
        let hs = Tensor::load(dir.join("head_shape.tnsr"))?;
        let hs = hs.as_i64()?;
        if hs.len() != 3 {
            return Err(Error::ShapeMismatch("head shape".into()));
        }
        let head = Head {
            d_in: hs[0] as usize,
            hidden: hs[1] as usize,
            d_out: hs[2] as usize,
            params: Tensor::load(dir.join("head.tnsr"))?.as_f64()?,
        };
        let expected = head.hidden * head.d_in + head.hidden + head.d_out * head.hidden + head.d_out;
        if head.params.len() != expected || head.d_in != scene.idsf.dim() {
            return Err(Error::ShapeMismatch(format!(
                "head has {} parameters for {}→{}→{} over {}-dim features",
                head.params.len(),
                head.d_in,
                head.hidden,
                head.d_out,
                scene.idsf.dim()
            )));
        }
        let ds = Tensor::load(dir.join("down_shape.tnsr"))?;
        let ds = ds.as_i64()?;
        if ds.len() != 2 {
            return Err(Error::ShapeMismatch("downsampler shape".into()));
        }
        let mut down = Downsampler::average(ds[0] as usize, ds[1] as usize);
        let params = Tensor::load(dir.join("down.tnsr"))?.as_f64()?;
        if params.len() != down.params.len() {
            return Err(Error::ShapeMismatch("downsampler parameters".into()));
        }
        down.params = params;
        let optimizer = match (
            load_adam(dir, "features")?,
            load_adam(dir, "head")?,
            load_adam(dir, "down")?,
        ) {
            (Some(features), Some(head), Some(down)) => Some(SemanticOptimizer { features, head, down }),
            _ => None,
        };
        Ok(Self {
            scene,
            head,
            down,
            optimizer,
        })
    }
}
