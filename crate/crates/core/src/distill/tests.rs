use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{central_difference, max_relative_error};
use crate::raster::{render, Channels};
use crate::scene::{Camera, Gaussian, Scene};

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize) -> FeatureMap {
    FeatureMap {
        width: w,
        height: h,
        dim: d,
        data: (0..w * h * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn pixel_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_map(&mut rng, 8, 6, 5);
    assert_eq!(pixel_distill_loss(&a, &a).unwrap(), 0.0);
    let mut b = a.clone();
    b.data.iter_mut().for_each(|v| *v += 0.5);
    assert!((pixel_distill_loss(&b, &a).unwrap() - 0.5).abs() < 1e-12);
    let c = random_map(&mut rng, 8, 6, 5);
    let mut naive = 0.0;
    for y in 0..6 {
        for x in 0..8 {
            for k in 0..5 {
                naive += (a.pixel(x, y)[k] - c.pixel(x, y)[k]).abs();
            }
        }
    }
    assert!((pixel_distill_loss(&a, &c).unwrap() - naive / 240.0).abs() < 1e-12);
    assert!(pixel_distill_loss(&a, &random_map(&mut rng, 8, 5, 5)).is_err());
}

fn all_covered(map: FeatureMap) -> InstanceFeatures {
    let covered = vec![true; map.width * map.height];
    InstanceFeatures { map, covered }
}

#[test]
fn multilevel_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fp = random_map(&mut rng, 4, 4, 3);
    let f = random_map(&mut rng, 8, 8, 3);
    let zero = multilevel_loss(&fp, &fp, &f, &all_covered(f.clone()), 0.3).unwrap();
    assert_eq!(zero.total, 0.0);
    let mut shifted = f.clone();
    shifted.data.iter_mut().for_each(|v| *v += 1.0);
    let l = multilevel_loss(&fp, &fp, &f, &all_covered(shifted), 0.3).unwrap();
    assert!((l.total - 0.3).abs() < 1e-12);

    // Naive reference with a partial mask.
    let fhat = random_map(&mut rng, 4, 4, 3);
    let fins = random_map(&mut rng, 8, 8, 3);
    let covered: Vec<bool> = (0..64).map(|_| rng.random_bool(0.6)).collect();
    let inst = InstanceFeatures { map: fins.clone(), covered: covered.clone() };
    let l = multilevel_loss(&fhat, &fp, &f, &inst, 0.3).unwrap();
    let mut pix = 0.0;
    for i in 0..fhat.data.len() {
        pix += (fp.data[i] - fhat.data[i]).abs();
    }
    let (mut ins, mut cnt) = (0.0, 0.0);
    for p in 0..64 {
        if covered[p] {
            for k in 0..3 {
                ins += (fins.data[p * 3 + k] - f.data[p * 3 + k]).abs();
                cnt += 1.0;
            }
        }
    }
    let expected = pix / fhat.data.len() as f64 + 0.3 * ins / cnt;
    assert!((l.total - expected).abs() < 1e-10);
}

#[test]
fn multilevel_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let fp = random_map(&mut rng, 3, 3, 2);
        let fins = random_map(&mut rng, 6, 6, 2);
        let covered: Vec<bool> = (0..36).map(|_| rng.random_bool(0.5)).collect();
        let inst = InstanceFeatures { map: fins, covered };
        let mut fhat = random_map(&mut rng, 3, 3, 2);
        let mut f = random_map(&mut rng, 6, 6, 2);
        let l = multilevel_loss(&fhat, &fp, &f, &inst, 0.3).unwrap();
        let mut analytic = l.d_downsampled.data.clone();
        analytic.extend_from_slice(&l.d_full.data);
        let mut params = fhat.data.clone();
        params.extend_from_slice(&f.data);
        let split = fhat.data.len();
        let numeric: Vec<f64> = (0..params.len())
            .map(|k| {
                central_difference(&mut params, k, 1e-4, |p| {
                    fhat.data.copy_from_slice(&p[..split]);
                    f.data.copy_from_slice(&p[split..]);
                    multilevel_loss(&fhat, &fp, &f, &inst, 0.3).unwrap().total
                })
            })
            .collect();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }
}

#[test]
fn constant_id_map_gives_full_frame_mask() {
    let m = extract_masks(&vec![0; 20 * 18], 20, 18, 1);
    assert_eq!(m.masks.len(), 1);
    assert_eq!(m.masks[0].area, 20 * 18);
    assert_eq!(m.masks[0].bbox, [0, 0, 20, 18]);
}

#[test]
fn speckle_is_removed_by_opening() {
    let (w, h) = (16, 16);
    let mut ids = vec![0u32; w * h];
    for y in 4..12 {
        for x in 4..12 {
            if (x + y) % 2 == 0 {
                ids[y * w + x] = 1;
            }
        }
    }
    let m = extract_masks(&ids, w, h, 1);
    assert!(m.masks.iter().all(|m| m.group != 1));
    assert_eq!(m.masks.len(), 1);
}

proptest! {
    #[test]
    fn masks_are_disjoint_and_labeled(cells in prop::collection::vec(0u32..4, 64)) {
        // Blocky random map so that opening keeps something.
        let (w, h) = (16, 16);
        let ids: Vec<u32> = (0..w * h)
            .map(|p| {
                let c = cells[(p / w / 2) * 8 + (p % w) / 2];
                if c == 3 { UNASSIGNED } else { c }
            })
            .collect();
        let m = extract_masks(&ids, w, h, 1);
        let mut owner = vec![0u32; w * h];
        for mask in &m.masks {
            for p in 0..w * h {
                if mask.mask[p] {
                    owner[p] += 1;
                    prop_assert!(ids[p] != UNASSIGNED);
                }
            }
        }
        prop_assert!(owner.iter().all(|&c| c <= 1));
    }
}

fn two_class_teacher(w: usize, h: usize) -> (SyntheticTeacher, Vec<u32>) {
    let classes: Vec<u32> = (0..w * h)
        .map(|p| match (p % w, p / w) {
            (x, _) if x < 6 => 0,
            (x, _) if x >= 10 => 1,
            _ => NO_CLASS,
        })
        .collect();
    let e0 = vec![1.0, 0.0, 0.0];
    let e1 = vec![0.0, 0.6, 0.8];
    let t = SyntheticTeacher::new(w, h, vec![classes.clone()], vec!["a".into(), "b".into()], vec![e0, e1], 2, 0.0, 4).unwrap();
    (t, classes)
}

#[test]
fn instance_map_cases() {
    let (w, h) = (16, 8);
    let (t, classes) = two_class_teacher(w, h);
    let image = vec![0.4; w * h * 3];

    let full = extract_masks(&vec![0u32; w * h], w, h, 1);
    let f = instance_feature_map(&image, &full, &t, 0);
    let e = t.embed(&Patch { view: 0, x0: 0, y0: 0, width: w, height: h, rgb: &image, mask: &vec![true; w * h] });
    for p in 0..w * h {
        assert_eq!(&f.map.data[p * 3..p * 3 + 3], &e[..]);
    }

    let none = InstanceMasks { width: w, height: h, masks: vec![] };
    let f = instance_feature_map(&image, &none, &t, 0);
    assert!(f.map.data.iter().all(|&v| v == 0.0));

    let ids: Vec<u32> = classes.iter().map(|&c| if c == NO_CLASS { UNASSIGNED } else { c }).collect();
    let masks = extract_masks(&ids, w, h, 1);
    assert_eq!(masks.masks.len(), 2);
    let f = instance_feature_map(&image, &masks, &t, 0);
    for p in 0..w * h {
        let expected: Vec<f64> = match classes[p] {
            0 => vec![1.0, 0.0, 0.0],
            1 => vec![0.0, 0.6, 0.8],
            _ => vec![0.0; 3],
        };
        assert_eq!(&f.map.data[p * 3..p * 3 + 3], &expected[..]);
    }
    let mut reversed = masks.clone();
    reversed.masks.reverse();
    let g = instance_feature_map(&image, &reversed, &t, 0);
    assert_eq!(f.map, g.map);
}

#[test]
fn average_downsampler_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_map(&mut rng, 8, 6, 3);
    let d = Downsampler::average(3, 2).forward(&f).unwrap();
    for ty in 0..3 {
        for tx in 0..4 {
            for k in 0..3 {
                let mean = (0..4).map(|i| f.pixel(tx * 2 + i % 2, ty * 2 + i / 2)[k]).sum::<f64>() / 4.0;
                assert!((d.pixel(tx, ty)[k] - mean).abs() < 1e-12);
            }
        }
    }
}

fn small_scene(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Scene, Camera) {
    let gaussians = (0..n)
        .map(|_| {
            Gaussian::new(
                [0; 3].map(|_| rng.random_range(-0.4..0.4)),
                [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0],
                [0; 3].map(|_| rng.random_range(0.08..0.25)),
                rng.random_range(0.3..0.9),
                [0.5; 3],
            )
        })
        .collect();
    let mut scene = Scene::new(gaussians, dim);
    scene.idsf.features_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let cam = Camera::look_at([0.0, -2.5, 0.4], [0.0; 3], [0.0, 0.0, 1.0], 16, 16, 0.9);
    (scene, cam)
}

#[test]
fn head_on_blended_features_equals_render_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (scene, cam) = small_scene(&mut rng, 10, 6);
    let head = Head::new(6, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let fr = render_features(&scene, &cam, &head, false);
    let (raw, _) = render(&scene, &cam, Channels { color: false, feature: true, id: false, depth: false });
    let raw = raw.feature.unwrap();
    for p in 0..16 * 16 {
        let expected = head.apply(&raw[p * 6..(p + 1) * 6]);
        for k in 0..4 {
            assert!((fr.features.data[p * 4 + k] - expected[k]).abs() < 1e-12);
        }
    }
}

/// Random linear functional of both the full-resolution head output and
/// its downsampled version, so the check is free of L1 kinks.
fn feature_path_objective(
    scene: &Scene,
    cam: &Camera,
    head: &Head,
    down: &Downsampler,
    r_full: &[f64],
    r_down: &[f64],
) -> f64 {
    let fr = render_features(scene, cam, head, false);
    let fd = down.forward(&fr.features).unwrap();
    fr.features.data.iter().zip(r_full).map(|(a, b)| a * b).sum::<f64>()
        + fd.data.iter().zip(r_down).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn feature_path_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (mut scene, cam) = small_scene(&mut rng, 10, 5);
        // Features live in f32: dyadic values and a dyadic step keep every
        // probe exactly representable.
        scene.idsf.features_mut().iter_mut().for_each(|v| *v = rng.random_range(-1024i32..1024) as f32 / 1024.0);
        let mut head = Head::new(5, 3, &mut rng);
        head.params.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let mut down = Downsampler::average(3, 2);
        down.params.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let r_full: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r_down: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let fr = render_features(&scene, &cam, &head, false);
        let mut g_down = vec![0.0; down.params.len()];
        let d_full = down.backward(
            &fr.features,
            &FeatureMap { width: 8, height: 8, dim: 3, data: r_down.clone() },
            &mut g_down,
        );
        let mut upstream = d_full.clone();
        upstream.data.iter_mut().zip(&r_full).for_each(|(a, b)| *a += b);

        let mut g_head = vec![0.0; head.params.len()];
        let g_feat = render_features_backward(&scene, &head, &fr, &upstream, &mut g_head).unwrap();
        let mut feats = scene.idsf.features_f64();
        let num_feat: Vec<f64> = (0..feats.len())
            .map(|k| {
                central_difference(&mut feats, k, 1.0 / 1024.0, |x| {
                    scene.idsf.features_mut().iter_mut().zip(x).for_each(|(a, b)| *a = *b as f32);
                    feature_path_objective(&scene, &cam, &head, &down, &r_full, &r_down)
                })
            })
            .collect();
        scene.idsf.features_mut().iter_mut().zip(&feats).for_each(|(a, b)| *a = *b as f32);
        assert!(max_relative_error(&g_feat, &num_feat) < 1e-4);
        let mut hp = head.params.clone();
        let num_head: Vec<f64> = (0..hp.len())
            .map(|k| {
                central_difference(&mut hp, k, 1e-4, |x| {
                    head.params.copy_from_slice(x);
                    feature_path_objective(&scene, &cam, &head, &down, &r_full, &r_down)
                })
            })
            .collect();
        head.params.copy_from_slice(&hp);
        let mut dp = down.params.clone();
        let num_down: Vec<f64> = (0..dp.len())
            .map(|k| {
                central_difference(&mut dp, k, 1e-4, |x| {
                    down.params.copy_from_slice(x);
                    feature_path_objective(&scene, &cam, &head, &down, &r_full, &r_down)
                })
            })
            .collect();
        down.params.copy_from_slice(&dp);
        assert!(max_relative_error(&g_head, &num_head) < 1e-4);
        assert!(max_relative_error(&g_down, &num_down) < 1e-4);
    }
}
