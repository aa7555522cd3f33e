use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
n_objects=2
gaussians_per_object=60
n_train_views=8
n_test_views=2
image_size=32
embedding_dim=8
phase1_iters=60
phase2_iters=30
recluster_every=15
feature_dim=16
min_cluster_size=15
min_samples=5
t_frac=0.05
";

fn idsplat(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idsplat"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let bench = dir.path().join("bench");
    ok(idsplat(&cfg, &["synth", "--out", bench.to_str().unwrap()]));
    (dir, bench.to_str().unwrap().to_string())
}

fn metric(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn synth_train_eval_is_deterministic() {
    let (dir, bench) = setup();
    let cfg = dir.path().join("tiny.cfg");
    let mut reports = Vec::new();
    for run in 0..2 {
        let ckpt = dir.path().join(format!("ckpt{run}"));
        let out = dir.path().join(format!("eval{run}"));
        let c = ckpt.to_str().unwrap();
        ok(idsplat(&cfg, &["--deterministic", "train", "--bench", &bench, "--out", c]));
        ok(idsplat(&cfg, &["eval", "--ckpt", c, "--bench", &bench, "--out", out.to_str().unwrap()]));
        reports.push(std::fs::read_to_string(out.join("report.txt")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    for key in ["seg_miou", "box_miou", "recall_0.25", "recall_0.5", "consistency"] {
        let v = metric(&reports[0], key);
        assert!((0.0..=1.0).contains(&v), "{key}={v}");
    }
    assert!(dir.path().join("eval0/mask_chair_0.pgm").exists());
}

#[test]
fn phases_split_render_segment_and_detect() {
    let (dir, bench) = setup();
    let cfg = dir.path().join("tiny.cfg");
    let c = dir.path().join("ckpt");
    let c = c.to_str().unwrap();
    ok(idsplat(&cfg, &["train", "--phase", "1", "--bench", &bench, "--out", c]));
    assert!(Path::new(c).join("scene.idsf").exists());
    assert!(!Path::new(c).join("head.tnsr").exists());
    ok(idsplat(&cfg, &["train", "--phase", "2", "--bench", &bench, "--out", c]));
    assert!(Path::new(c).join("head.tnsr").exists());

    let r = dir.path().join("render");
    let rs = r.to_str().unwrap();
    ok(idsplat(&cfg, &["render", "--ckpt", c, "--view", "1", "--channels", "color,id,depth,feature", "--out", rs]));
    for f in ["color.ppm", "ids.pgm", "ids.tnsr", "depth.tnsr", "feature.tnsr"] {
        assert!(r.join(f).exists(), "{f}");
    }

    let s = dir.path().join("seg");
    let ss = s.to_str().unwrap();
    let out = ok(idsplat(&cfg, &["segment", "--ckpt", c, "--bench", &bench, "--query", "lamp", "--out", ss]));
    assert!(out.starts_with("lamp: "));
    assert!(s.join("mask_lamp_1.pgm").exists());
    let out = ok(idsplat(&cfg, &["segment", "--ckpt", c, "--bench", &bench, "--click", "0,0", "--view", "0", "--out", ss]));
    assert!(out.contains("click_0_0_view0"));

    let d = dir.path().join("det");
    let out = ok(idsplat(&cfg, &["detect", "--ckpt", c, "--bench", &bench, "--queries", "chair", "--out", d.to_str().unwrap()]));
    assert!(out.contains("recall_0.25="));
    assert!(std::fs::read_to_string(d.join("report.txt")).unwrap().contains("query chair"));
}

#[test]
fn hard_errors_have_exit_codes() {
    let (dir, bench) = setup();
    let cfg = dir.path().join("tiny.cfg");
    let c = dir.path().join("ckpt");
    let c = c.to_str().unwrap();
    ok(idsplat(&cfg, &["train", "--bench", &bench, "--out", c]));
    let o = dir.path().join("o");
    let o = o.to_str().unwrap();

    let out = idsplat(&cfg, &["segment", "--ckpt", c, "--bench", &bench, "--query", "giraffe", "--out", o]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("chair, lamp"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);

    let out = idsplat(&cfg, &["segment", "--ckpt", c, "--bench", &bench, "--click", "99,0", "--view", "0", "--out", o]);
    assert_eq!(out.status.code(), Some(2));
    let out = idsplat(&cfg, &["--set", "colour=3", "synth", "--out", o]);
    assert_eq!(out.status.code(), Some(2));
    let out = idsplat(&cfg, &["eval", "--ckpt", c, "--bench", "/nonexistent", "--out", o]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::write(Path::new(c).join("head.tnsr"), b"TNSR").unwrap();
    let out = idsplat(&cfg, &["eval", "--ckpt", c, "--bench", &bench, "--out", o]);
    assert_eq!(out.status.code(), Some(3));
}
