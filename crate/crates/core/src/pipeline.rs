//! End-to-end benchmark: synthesize a scene, run both training phases and
//! score the result against the synthetic ground truth.

use std::fmt::Write as _;
use std::path::Path;

use crate::cluster::ClusterResult;
use crate::distill::{Head, Teacher};
use crate::error::Result;
use crate::eval::{
    cluster_purity, cross_view_consistency, detection_recall, export, iou3d, mask_iou, query_text, QueryRecord,
};
use crate::raster::render_id_map;
use crate::scene::Scene;
use crate::synth::{generate, perturb_for_training, GroundTruth, PerturbConfig, SynthSpec};
use crate::train::{phase1_reconstruct, phase2_bootstrap, render_psnr, MetricsLog, Phase2Report, TrainConfig};

/// Scene state after photometric reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub spec: SynthSpec,
    pub truth: GroundTruth,
    pub scene: Scene,
    /// Mean PSNR over the held-out views.
    pub psnr: f64,
    pub train_psnr: f64,
}

/// Generates the benchmark and runs phase 1 on its perturbed start state.
pub fn reconstruct(
    spec: &SynthSpec,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<Reconstruction> {
    let (truth_scene, truth) = generate(spec)?;
    let mut scene = perturb_for_training(&truth_scene, &truth, perturb);
    phase1_reconstruct(&mut scene, cfg, log)?;
    let (psnr, train_psnr) = reconstruction_psnr(&scene, &truth);
    Ok(Reconstruction {
        spec: spec.clone(),
        truth,
        scene,
        psnr,
        train_psnr,
    })
}

/// Mean PSNR over the held-out views and over the training views.
pub fn reconstruction_psnr(scene: &Scene, truth: &GroundTruth) -> (f64, f64) {
    let test = mean(
        truth
            .test_cameras
            .iter()
            .zip(&truth.test_images)
            .map(|(c, img)| render_psnr(scene, c, img)),
    );
    let train = mean(
        scene
            .cameras
            .iter()
            .zip(&scene.train_images)
            .map(|(c, img)| render_psnr(scene, c, &img.to_f64())),
    );
    (test, train)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub train_psnr: f64,
    pub n_groups: usize,
    pub purity: Vec<f64>,
    pub seg_miou: f64,
    pub box_miou: f64,
    pub recall_25: f64,
    pub recall_50: f64,
    pub consistency: f64,
    pub queries: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn summary(&self) -> Vec<(String, f64)> {
        let mut s = vec![
            ("psnr".to_string(), self.psnr),
            ("train_psnr".to_string(), self.train_psnr),
            ("n_groups".to_string(), self.n_groups as f64),
            ("seg_miou".to_string(), self.seg_miou),
            ("box_miou".to_string(), self.box_miou),
            ("recall_0.25".to_string(), self.recall_25),
            ("recall_0.5".to_string(), self.recall_50),
            ("consistency".to_string(), self.consistency),
        ];
        for (o, p) in self.purity.iter().enumerate() {
            s.push((format!("purity_{o}"), *p));
        }
        s
    }

    /// Full-precision text form; two runs agree on it iff every metric is
    /// bit-identical.
    pub fn fingerprint(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.summary() {
            let _ = writeln!(out, "{k}={:016x}", v.to_bits());
        }
        for q in &self.queries {
            let _ = write!(out, "{} {:?}", q.name, q.result.group_id);
            for s in &q.result.scores {
                let _ = write!(out, " {:016x}", s.to_bits());
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Scores a clustered scene: each class query is answered in 3D, then its
/// mask is compared with ground truth on every held-out view and its box
/// with the object's box.
pub fn evaluate(
    scene: &Scene,
    cluster: &ClusterResult,
    head: &Head,
    teacher: &dyn Teacher,
    truth: &GroundTruth,
    psnr: (f64, f64),
) -> Result<(EvalReport, Vec<Vec<Vec<bool>>>)> {
    let id_maps: Vec<Vec<u32>> = truth.test_cameras.iter().map(|c| render_id_map(scene, c).0).collect();
    let mut records = Vec::new();
    let mut masks = Vec::new();
    let (mut seg, mut n_seg) = (0.0, 0usize);
    let mut preds = Vec::new();
    for (o, name) in truth.class_names.iter().enumerate() {
        let result = query_text(scene, cluster, head, teacher.query(name)?)?;
        let mut views = Vec::new();
        let mut iou = 0.0;
        for (ids, gt) in id_maps.iter().zip(&truth.test_id_maps) {
            let pred = result.mask(ids);
            let gt: Vec<bool> = gt.iter().map(|&v| v == o as u32).collect();
            iou += mask_iou(&pred, &gt)?;
            views.push(pred);
        }
        let per_view = iou / id_maps.len().max(1) as f64;
        seg += iou;
        n_seg += id_maps.len();
        let aabb = result.aabb(cluster, scene);
        preds.push(aabb);
        records.push(QueryRecord {
            name: name.clone(),
            box_iou: aabb.map_or(0.0, |b| iou3d(&b, &truth.boxes[o])),
            result,
            mask_iou: per_view,
            aabb,
        });
        masks.push(views);
    }
    let n_obj = truth.n_objects();
    let report = EvalReport {
        psnr: psnr.0,
        train_psnr: psnr.1,
        n_groups: cluster.n_groups,
        purity: cluster_purity(&cluster.labels, &truth.object_ids, n_obj, cluster.n_groups),
        seg_miou: if n_seg == 0 { 0.0 } else { seg / n_seg as f64 },
        box_miou: mean(records.iter().map(|r| r.box_iou)),
        recall_25: detection_recall(&preds, &truth.boxes, 0.25),
        recall_50: detection_recall(&preds, &truth.boxes, 0.5),
        consistency: cross_view_consistency(&id_maps, &truth.test_id_maps, n_obj),
        queries: records,
    };
    Ok((report, masks))
}

/// Output of a phase-2 run on top of a reconstruction.
#[derive(Clone, Debug)]
pub struct SemanticRun {
    pub scene: Scene,
    pub phase2: Phase2Report,
    pub report: EvalReport,
    pub masks: Vec<Vec<Vec<bool>>>,
}

/// Phase 2 and evaluation. The teacher is built from `teacher_spec`, which
/// may differ from the reconstruction's spec only in teacher settings.
pub fn semantic_stage(
    recon: &Reconstruction,
    teacher_spec: &SynthSpec,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<SemanticRun> {
    let teacher = recon.truth.teacher(teacher_spec)?;
    let mut scene = recon.scene.clone();
    let phase2 = phase2_bootstrap(&mut scene, &teacher, cfg, log)?;
    let (report, masks) = evaluate(
        &scene,
        &phase2.cluster,
        &phase2.head,
        &teacher,
        &recon.truth,
        (recon.psnr, recon.train_psnr),
    )?;
    Ok(SemanticRun {
        scene,
        phase2,
        report,
        masks,
    })
}

/// Both phases and the evaluation from a synthetic spec.
pub fn run_benchmark(
    spec: &SynthSpec,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<(Reconstruction, SemanticRun)> {
    let recon = reconstruct(spec, perturb, cfg, log)?;
    let run = semantic_stage(&recon, spec, cfg, log)?;
    Ok((recon, run))
}

/// Writes the report, boxes and masks of a run.
pub fn write_run(dir: impl AsRef<Path>, run: &SemanticRun, image_size: usize) -> Result<()> {
    export(
        dir,
        &run.report.queries,
        &run.report.summary(),
        &run.masks,
        image_size,
        image_size,
    )
}
