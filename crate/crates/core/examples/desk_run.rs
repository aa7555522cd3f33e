//! Runs the default synthetic benchmark and prints the metric summary.
//!
//! Usage: `desk_run [key=value ...]`, keys from the training config or the
//! synthetic spec, e.g. `desk_run phase1_iters=500 lambda_c=0`.

use std::time::Instant;

use idsplat::pipeline::{reconstruct, semantic_stage};
use idsplat::synth::{PerturbConfig, SynthSpec};
use idsplat::train::{MetricsLog, TrainConfig};

fn main() -> idsplat::Result<()> {
    let mut cfg = TrainConfig {
        phase1_iters: 3000,
        phase2_iters: 2000,
        recluster_every: 250,
        ..TrainConfig::default()
    };
    let mut spec = SynthSpec::default();
    for arg in std::env::args().skip(1) {
        let Some((k, v)) = arg.split_once('=') else {
            return Err(idsplat::Error::Config(format!("expected key=value, got '{arg}'")));
        };
        if !cfg.set(k, v)? && !spec.set(k, v)? {
            return Err(idsplat::Error::Config(format!("unknown key '{k}'")));
        }
    }
    let t = Instant::now();
    let recon = reconstruct(&spec, &PerturbConfig::default(), &cfg, &mut MetricsLog::none())?;
    println!("phase 1: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let run = semantic_stage(&recon, &spec, &cfg, &mut MetricsLog::none())?;
    println!("phase 2: {:.1}s", t.elapsed().as_secs_f64());
    for (k, v) in run.report.summary() {
        println!("{k}={v:.4}");
    }
    for q in &run.report.queries {
        println!("{} group={:?} mask_iou={:.4} box_iou={:.4}", q.name, q.result.group_id, q.mask_iou, q.box_iou);
    }
    Ok(())
}
