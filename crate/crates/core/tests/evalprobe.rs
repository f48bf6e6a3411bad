use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spa_core::evalprobe::*;
use spa_core::scenes::{CameraParams, Intrinsics};

fn camera(eye: [f64; 3], target: [f64; 3]) -> CameraParams {
    CameraParams::look_at(Vector3::from(eye), Vector3::from(target), Intrinsics::from_fov(16, 16, 50.0)).unwrap()
}

fn unit_quat(r: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = [0; 4].map(|_| r.gen_range(-1.0..1.0));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

#[test]
fn identical_cameras_give_identity() {
    let c = camera([0.3, 1.0, -3.0], [0.0; 3]);
    let p = relative_pose(&c, &c);
    assert!(p.translation.iter().all(|x| x.abs() < 1e-12));
    assert!((p.rotation[0] - 1.0).abs() < 1e-12);
    assert!(p.rotation[1..].iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn forward_and_backward_compose_to_identity() {
    let a = camera([0.3, 1.0, -3.0], [0.0; 3]);
    let b = camera([2.5, -0.4, 1.0], [0.1, 0.2, 0.0]);
    let (ab, ba) = (relative_pose(&a, &b), relative_pose(&b, &a));
    // compose as rigid transforms: x_a = R_ab x_b + t_ab, x_b = R_ba x_a + t_ba
    let rot = |q: [f64; 4]| {
        nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
    };
    let (r1, r2) = (rot(ab.rotation), rot(ba.rotation));
    let r = r1 * r2;
    let t = r1 * Vector3::from(ba.translation) + Vector3::from(ab.translation);
    assert!((r.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-6);
    assert!(t.norm() < 1e-6);
}

#[test]
fn pure_translation_rig_is_recovered() {
    // Both cameras look along +z; B is 0.7 further forward than A.
    let a = camera([0.0, 0.0, -3.0], [0.0, 0.0, 0.0]);
    let b = camera([0.0, 0.0, -2.3], [0.0, 0.0, 1.0]);
    let p = relative_pose(&a, &b);
    let want = [0.0, 0.0, 0.7];
    assert!(translation_error(&p.translation, &want) < 1e-9, "{p:?}");
    assert!(quat_geodesic(&p.rotation, &[1.0, 0.0, 0.0, 0.0]).unwrap() < 1e-6);
}

#[test]
fn target_quaternions_are_in_the_upper_hemisphere() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let e = [0; 3].map(|_| r.gen_range(-3.0..3.0));
        let f = [0; 3].map(|_| r.gen_range(-3.0..3.0));
        let p = relative_pose(&camera(e, [0.0; 3]), &camera(f, [0.1, 0.0, 0.0]));
        assert!(p.rotation[0] >= 0.0);
        let n: f64 = p.rotation.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn geodesic_is_a_pseudometric(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (unit_quat(&mut r), unit_quat(&mut r), unit_quat(&mut r));
        let d = |x: &[f64; 4], y: &[f64; 4]| quat_geodesic(x, y).unwrap();
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &a.map(|x| -x)) < 1e-6);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-6);
        prop_assert!((0.0..=std::f64::consts::PI).contains(&d(&a, &b)));
    }

    #[test]
    fn translation_error_matches_direct_formula(a in prop::array::uniform3(-10.0f64..10.0), b in prop::array::uniform3(-10.0f64..10.0)) {
        let direct = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        prop_assert_eq!(translation_error(&a, &b), direct);
        prop_assert_eq!(translation_error(&a, &b), translation_error(&b, &a));
    }
}

fn constant_pose_examples(n: usize, dim: usize, seed: u64) -> Vec<PoseExample> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rot = Rotation3::from_euler_angles(0.2, -0.4, 0.1);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let target = RelativePose {
        translation: [0.8, -0.3, 1.5],
        rotation: [q.w, q.i, q.j, q.k],
    };
    (0..n)
        .map(|i| PoseExample {
            scene: format!("s{}", i / 4),
            features: (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
            target,
        })
        .collect()
}

#[test]
fn constant_pose_is_learned_almost_exactly() {
    let ex = constant_pose_examples(200, 32, 1);
    let (train, test) = split_by_scene(&ex, 0.8, 0);
    assert_eq!(train.len(), 160);
    let mut probe = PoseProbe::new(32, &ProbeConfig::default(), 0).unwrap();
    train_probe(&mut probe, &train, 0).unwrap();
    let e = evaluate_probe(&probe, &test).unwrap();
    assert_eq!(e.invalid, 0);
    assert!(e.mean_trans <= 1e-3 && e.mean_rot <= 1e-3, "{e:?}");
}

#[test]
fn zero_output_layer_counts_invalid_predictions() {
    let ex = constant_pose_examples(12, 8, 2);
    let probe = PoseProbe::new(8, &ProbeConfig::default(), 0).unwrap();
    let e = evaluate_probe(&probe, &ex).unwrap();
    assert_eq!(e.invalid, 12);
    assert!(e.rot.is_empty());
    assert!(e.trans.iter().all(|&t| t > 0.0));
}

#[test]
fn probe_training_is_reproducible() {
    let ex = constant_pose_examples(40, 8, 3);
    let cfg = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
    let run = || {
        let mut p = PoseProbe::new(8, &cfg, 9).unwrap();
        let h = train_probe(&mut p, &ex, 9).unwrap();
        (h, evaluate_probe(&p, &ex).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn scene_split_keeps_scenes_apart() {
    let ex = constant_pose_examples(40, 4, 5);
    let (train, test) = split_by_scene(&ex, 0.8, 1);
    assert_eq!(train.len() + test.len(), 40);
    for e in &test {
        assert!(train.iter().all(|t| t.scene != e.scene));
    }
}

#[test]
fn training_batch_norm_standardises_features() {
    let probe = PoseProbe::new(5, &ProbeConfig::default(), 0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let x = spa_diff::Tensor::from_fn(vec![32, 5], |_| r.gen_range(-3.0..7.0));
    let t = spa_diff::Tape::new();
    let (n, _) = probe.batch_norm(&t, t.constant(x), true).unwrap();
    let v = t.value(n);
    for j in 0..5 {
        let col: Vec<f64> = (0..32).map(|i| v.data()[i * 5 + j]).collect();
        let m = col.iter().sum::<f64>() / 32.0;
        let var = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
    }
}

/// Reconstruction error for `k` components from an SVD of the centred data,
/// independent of the covariance eigendecomposition used by `pca`.
fn svd_error(data: &[f64], n: usize, d: usize, k: usize) -> f64 {
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64).collect();
    let x = nalgebra::DMatrix::from_fn(n, d, |i, j| data[i * d + j] - mean[j]);
    let mut s: Vec<f64> = x.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[k..].iter().map(|v| v * v).sum::<f64>() / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn pca_error_is_non_increasing_and_optimal(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (r.gen_range(4..30), r.gen_range(3..7));
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut prev = f64::INFINITY;
        for k in 1..=3 {
            let e = pca(&data, n, d, k).unwrap().reconstruction_error(&data, d);
            prop_assert!(e <= prev + 1e-9);
            prop_assert!((e - svd_error(&data, n, d, k)).abs() < 1e-8);
            prev = e;
        }
    }
}

#[test]
fn duplicate_views_give_identical_images() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = spa_diff::Tensor::from_fn(vec![6, 4, 5], |_| r.gen_range(-1.0..1.0));
    let imgs = pca_images(&[a.clone(), a]).unwrap();
    assert_eq!(imgs.len(), 2);
    assert_eq!(imgs[0], imgs[1]);
    assert_eq!((imgs[0].width, imgs[0].height, imgs[0].rgb.len()), (5, 4, 60));
    assert!(imgs[0].rgb.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn feature_maps_need_two_views_and_enough_pixels() {
    let a = spa_diff::Tensor::<f64>::zeros(vec![4, 3, 3]);
    assert!(pca_images(&[a]).is_err());
    let tiny = spa_diff::Tensor::<f64>::zeros(vec![4, 1, 1]);
    assert!(pca_images(&[tiny.clone(), tiny]).is_err());
}
