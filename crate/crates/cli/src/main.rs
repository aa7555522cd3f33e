//! `idsplat` command-line tool.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idsplat::cluster::ClusterResult;
use idsplat::distill::Teacher;
use idsplat::eval::{click_select, detection_recall, export, iou3d, query_text, QueryRecord};
use idsplat::io::{load_scene, save_scene, write_pgm, write_ppm, Tensor};
use idsplat::pipeline::{evaluate, reconstruction_psnr};
use idsplat::raster::{render, Channels};
use idsplat::scene::{Camera, UNASSIGNED};
use idsplat::synth::{generate, perturb_for_training, read_benchmark, write_benchmark, Benchmark};
use idsplat::train::{phase1_reconstruct, phase2_bootstrap, Checkpoint, MetricsLog};
use idsplat::{Error, Result};

use config::Config;

#[derive(Parser, Debug)]
#[command(name = "idsplat", version, about = "Label-free semantic Gaussian splatting")]
struct Cli {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set phase1_iters=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, bit-reproducible run.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint from a benchmark.
    Train {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        phase: Phase,
        /// Scene phase 2 starts from; defaults to `<out>/scene.idsf`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Render a view of a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Use the benchmark's held-out cameras instead of the training ones.
        #[arg(long)]
        bench: Option<PathBuf>,
        /// Comma-separated subset of color,id,depth,feature.
        #[arg(long, default_value = "color,id")]
        channels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment by class name or by clicking a pixel of a held-out view.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, conflicts_with = "click", required_unless_present = "click")]
        query: Option<String>,
        /// Pixel as `u,v`.
        #[arg(long, requires = "view")]
        click: Option<String>,
        #[arg(long)]
        view: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// 3D boxes for class queries, scored against ground truth.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        /// Comma-separated class names; all classes when omitted.
        #[arg(long)]
        queries: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownQuery { .. } | Error::OutOfBounds { .. } => 2,
        Error::Io(_)
        | Error::MalformedHeader(_)
        | Error::VersionMismatch { .. }
        | Error::TruncatedPayload { .. }
        | Error::InvalidData(_)
        | Error::ShapeMismatch(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("idsplat: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::default();
    if let Some(p) = &cli.config {
        cfg.load(p)?;
    }
    for s in &cli.sets {
        cfg.apply(s)?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    if let Some(n) = cfg.worker_threads() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { out } => cmd_synth(&cfg, &out),
        Command::Train { bench, out, phase, init } => cmd_train(&cfg, &bench, &out, phase, init),
        Command::Render {
            ckpt,
            view,
            bench,
            channels,
            out,
        } => cmd_render(&ckpt, view, bench.as_deref(), &channels, &out),
        Command::Segment {
            ckpt,
            bench,
            query,
            click,
            view,
            out,
        } => cmd_segment(&ckpt, &bench, query, click, view, &out),
        Command::Detect { ckpt, bench, queries, out } => cmd_detect(&ckpt, &bench, queries, &out),
        Command::Eval { ckpt, bench, out } => cmd_eval(&ckpt, &bench, &out),
    }
}

fn with_log<T>(cfg: &Config, f: impl FnOnce(&mut MetricsLog) -> Result<T>) -> Result<T> {
    match &cfg.metrics {
        Some(path) => {
            let mut file = fs::File::create(path)?;
            let mut log = MetricsLog::new(&mut file);
            f(&mut log)
        }
        None => f(&mut MetricsLog::none()),
    }
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    let (truth_scene, truth) = generate(&cfg.synth)?;
    let start = perturb_for_training(&truth_scene, &truth, &cfg.perturb);
    write_benchmark(out, &cfg.synth, &truth_scene, &truth, &start)?;
    println!("wrote {} objects, {} Gaussians to {}", truth.n_objects(), start.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &Config, bench: &Path, out: &Path, phase: Phase, init: Option<PathBuf>) -> Result<()> {
    let b = read_benchmark(bench)?;
    fs::create_dir_all(out)?;
    with_log(cfg, |log| {
        let mut scene = match phase {
            Phase::Two => load_scene(init.unwrap_or_else(|| out.join("scene.idsf")))?,
            _ => b.start.clone(),
        };
        if phase != Phase::Two {
            let r = phase1_reconstruct(&mut scene, &cfg.train, log)?;
            let (psnr, _) = reconstruction_psnr(&scene, &b.truth);
            println!(
                "phase 1: final loss {:.6}, held-out psnr {psnr:.2} dB",
                r.losses.last().copied().unwrap_or(0.0)
            );
            if phase == Phase::One {
                return save_scene(&scene, out.join("scene.idsf"));
            }
        }
        let teacher = b.truth.teacher(&b.spec)?;
        let r = phase2_bootstrap(&mut scene, &teacher, &cfg.train, log)?;
        println!("phase 2: {} groups", r.cluster.n_groups);
        Checkpoint {
            scene,
            head: r.head,
            down: r.down,
            optimizer: Some(r.optimizer),
        }
        .save(out)
    })
}

fn parse_channels(spec: &str) -> Result<Channels> {
    let mut c = Channels {
        color: false,
        feature: false,
        id: false,
        depth: false,
    };
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "color" => c.color = true,
            "feature" => c.feature = true,
            "id" => c.id = true,
            "depth" => c.depth = true,
            other => return Err(Error::Config(format!("unknown channel '{other}'"))),
        }
    }
    Ok(c)
}

fn camera(cameras: &[Camera], view: usize) -> Result<&Camera> {
    cameras
        .get(view)
        .ok_or_else(|| Error::Config(format!("view {view} out of range ({} views)", cameras.len())))
}

fn id_gray(ids: &[u32], n_groups: usize) -> Vec<f64> {
    ids.iter()
        .map(|&g| if g == UNASSIGNED { 0.0 } else { (g as f64 + 1.0) / n_groups.max(1) as f64 })
        .collect()
}

fn cmd_render(ckpt: &Path, view: usize, bench: Option<&Path>, channels: &str, out: &Path) -> Result<()> {
    let channels = parse_channels(channels)?;
    let scene = load_scene(ckpt.join("scene.idsf"))?;
    let test_cams;
    let cams = match bench {
        Some(b) => {
            test_cams = read_benchmark(b)?.truth.test_cameras;
            &test_cams[..]
        }
        None => &scene.cameras[..],
    };
    let cam = camera(cams, view)?;
    let (w, h) = (cam.width, cam.height);
    let (r, _) = render(&scene, cam, channels);
    fs::create_dir_all(out)?;
    if let Some(c) = &r.color {
        write_ppm(out.join("color.ppm"), w, h, c)?;
    }
    if let Some(ids) = &r.id_map {
        write_pgm(out.join("ids.pgm"), w, h, &id_gray(ids, r.n_groups))?;
        Tensor::i64(&[h, w], ids.iter().map(|&g| if g == UNASSIGNED { -1 } else { g as i64 }).collect())?
            .save(out.join("ids.tnsr"))?;
    }
    if let Some(d) = &r.depth {
        Tensor::f32(&[h, w], d.iter().map(|&v| v as f32).collect())?.save(out.join("depth.tnsr"))?;
    }
    if let Some(f) = &r.feature {
        Tensor::f32(&[h, w, r.feature_dim], f.iter().map(|&v| v as f32).collect())?.save(out.join("feature.tnsr"))?;
    }
    Ok(())
}

fn load_trained(ckpt: &Path, bench: &Path) -> Result<(Checkpoint, ClusterResult, Benchmark)> {
    let ck = Checkpoint::load(ckpt)?;
    let cluster = ClusterResult::from_labels(&ck.scene, ck.scene.idsf.labels().to_vec());
    Ok((ck, cluster, read_benchmark(bench)?))
}

fn parse_pixel(s: &str) -> Result<(i64, i64)> {
    let bad = || Error::Config(format!("--click expects u,v; got '{s}'"));
    let (u, v) = s.split_once(',').ok_or_else(bad)?;
    Ok((u.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

fn cmd_segment(
    ckpt: &Path,
    bench: &Path,
    query: Option<String>,
    click: Option<String>,
    view: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (ck, cluster, b) = load_trained(ckpt, bench)?;
    let teacher = b.truth.teacher(&b.spec)?;
    let (name, result) = match (&query, &click) {
        (Some(q), _) => (q.clone(), query_text(&ck.scene, &cluster, &ck.head, teacher.query(q)?)?),
        (None, Some(c)) => {
            let (u, v) = parse_pixel(c)?;
            let k = view.unwrap_or(0);
            (format!("click_{u}_{v}_view{k}"), click_select(&ck.scene, camera(&b.truth.test_cameras, k)?, u, v)?)
        }
        (None, None) => return Err(Error::Config("give --query or --click".into())),
    };
    let masks: Vec<Vec<bool>> = b
        .truth
        .test_cameras
        .iter()
        .map(|c| result.mask(&idsplat::raster::render_id_map(&ck.scene, c).0))
        .collect();
    let aabb = result.aabb(&cluster, &ck.scene);
    let record = QueryRecord {
        name,
        result,
        mask_iou: f64::NAN,
        box_iou: f64::NAN,
        aabb,
    };
    let n = b.spec.image_size;
    export(out, &[record.clone()], &[], &[masks], n, n)?;
    match record.result.group_id {
        Some(g) => println!("{}: group {g}", record.name),
        None => println!("{}: no detection", record.name),
    }
    Ok(())
}

fn cmd_detect(ckpt: &Path, bench: &Path, queries: Option<String>, out: &Path) -> Result<()> {
    let (ck, cluster, b) = load_trained(ckpt, bench)?;
    let teacher = b.truth.teacher(&b.spec)?;
    let names: Vec<String> = match queries {
        Some(q) => q.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => b.truth.class_names.clone(),
    };
    let mut records = Vec::new();
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for name in names {
        let result = query_text(&ck.scene, &cluster, &ck.head, teacher.query(&name)?)?;
        let aabb = result.aabb(&cluster, &ck.scene);
        let o = b.truth.class_names.iter().position(|n| *n == name).unwrap();
        let gt = b.truth.boxes[o];
        preds.push(aabb);
        gts.push(gt);
        records.push(QueryRecord {
            box_iou: aabb.map_or(0.0, |a| iou3d(&a, &gt)),
            name,
            result,
            mask_iou: f64::NAN,
            aabb,
        });
    }
    let box_miou = records.iter().map(|r| r.box_iou).sum::<f64>() / records.len().max(1) as f64;
    let summary = vec![
        ("box_miou".to_string(), box_miou),
        ("recall_0.25".to_string(), detection_recall(&preds, &gts, 0.25)),
        ("recall_0.5".to_string(), detection_recall(&preds, &gts, 0.5)),
    ];
    export(out, &records, &summary, &[], 0, 0)?;
    print_summary(&summary);
    Ok(())
}

fn cmd_eval(ckpt: &Path, bench: &Path, out: &Path) -> Result<()> {
    let (ck, cluster, b) = load_trained(ckpt, bench)?;
    let teacher = b.truth.teacher(&b.spec)?;
    let psnr = reconstruction_psnr(&ck.scene, &b.truth);
    let (report, masks) = evaluate(&ck.scene, &cluster, &ck.head, &teacher, &b.truth, psnr)?;
    let n = b.spec.image_size;
    export(out, &report.queries, &report.summary(), &masks, n, n)?;
    print_summary(&report.summary());
    Ok(())
}

fn print_summary(summary: &[(String, f64)]) {
    let mut stdout = std::io::stdout().lock();
    for (k, v) in summary {
        let _ = writeln!(stdout, "{k}={v:.6}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::TruncatedPayload { expected: 2, found: 1 }), 3);
        assert_eq!(exit_code(&Error::Divergence("nan".into())), 4);
    }

    #[test]
    fn channel_lists() {
        let c = parse_channels("color, depth").unwrap();
        assert!(c.color && c.depth && !c.id && !c.feature);
        assert!(parse_channels("colour").is_err());
        assert_eq!(parse_pixel("3, 4").unwrap(), (3, 4));
        assert!(parse_pixel("3").is_err());
    }
}
