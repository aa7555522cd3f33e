//! Persistence round trips through the public API: benchmark directories
//! and checkpoints reload into states that behave identically.

use idsplat::cluster::{ClusterConfig, ClusterResult};
use idsplat::distill::Teacher;
use idsplat::eval::query_text;
use idsplat::io::encode_scene;
use idsplat::raster::{render, Channels};
use idsplat::synth::{generate, perturb_for_training, read_benchmark, write_benchmark, PerturbConfig, SynthSpec};
use idsplat::train::{phase2_bootstrap, Checkpoint, MetricsLog, TrainConfig};

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_objects: 2,
        gaussians_per_object: 50,
        n_train_views: 6,
        n_test_views: 2,
        image_size: 32,
        embedding_dim: 8,
        ..SynthSpec::default()
    }
}

#[test]
fn benchmark_directory_round_trip() {
    let spec = small_spec();
    let (truth_scene, truth) = generate(&spec).unwrap();
    let start = perturb_for_training(&truth_scene, &truth, &PerturbConfig::default());
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &spec, &truth_scene, &truth, &start).unwrap();

    let b = read_benchmark(dir.path()).unwrap();
    assert_eq!(b.spec.to_manifest(), spec.to_manifest());
    assert_eq!(encode_scene(&b.start), encode_scene(&start));
    assert_eq!(encode_scene(&b.truth_scene), encode_scene(&truth_scene));
    assert_eq!(b.truth.object_ids, truth.object_ids);
    assert_eq!(b.truth.class_names, truth.class_names);
    assert_eq!(b.truth.train_id_maps, truth.train_id_maps);
    assert_eq!(b.truth.test_id_maps, truth.test_id_maps);
    assert_eq!(b.truth.boxes, truth.boxes);

    // Held-out cameras survive exactly: the reloaded start scene renders the
    // same pixels from them.
    for (a, c) in truth.test_cameras.iter().zip(&b.truth.test_cameras) {
        let (x, _) = render(&start, a, Channels::ALL);
        let (y, _) = render(&b.start, c, Channels::ALL);
        assert_eq!(x.color, y.color);
        assert_eq!(x.id_map, y.id_map);
    }
}

#[test]
fn checkpoint_round_trip_answers_queries_identically() {
    let spec = small_spec();
    let (truth_scene, truth) = generate(&spec).unwrap();
    let mut scene = truth_scene.clone();
    let cfg = TrainConfig {
        phase2_iters: 20,
        recluster_every: 10,
        feature_dim: 8,
        cluster: ClusterConfig {
            min_cluster_size: Some(15),
            min_samples: 5,
        },
        t_frac: 0.05,
        ..TrainConfig::default()
    };
    let teacher = truth.teacher(&spec).unwrap();
    let p2 = phase2_bootstrap(&mut scene, &teacher, &cfg, &mut MetricsLog::none()).unwrap();
    let ckpt = Checkpoint {
        scene,
        head: p2.head,
        down: p2.down,
        optimizer: Some(p2.optimizer),
    };
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();

    assert_eq!(encode_scene(&back.scene), encode_scene(&ckpt.scene));
    assert_eq!(back.head.params, ckpt.head.params);
    assert_eq!(back.down.params, ckpt.down.params);
    let cluster = ClusterResult::from_labels(&back.scene, back.scene.idsf.labels().to_vec());
    for name in &truth.class_names {
        let text = teacher.query(name).unwrap();
        let a = query_text(&ckpt.scene, &p2.cluster, &ckpt.head, text).unwrap();
        let b = query_text(&back.scene, &cluster, &back.head, text).unwrap();
        assert_eq!(a.group_id, b.group_id);
        assert_eq!(a.scores, b.scores);
    }
}
