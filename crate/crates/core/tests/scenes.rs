use std::fs;

use proptest::prelude::*;
use spa_core::scenes::{
    generate_cameras, generate_dataset, random_scene, read_dataset, scene_sdf, trace, write_dataset, CameraRig,
    DatasetConfig, Intrinsics, MultiViewSample, SceneGenConfig, SceneSpec, SdfPrimitive, Vec3, BOUNDS_PAD,
    TRACE_TOLERANCE,
};

fn unit_sphere() -> SceneSpec {
    SceneSpec::new(vec![SdfPrimitive::sphere([0.0; 3], 1.0, [0.9, 0.5, 0.2], 3)], [0.0; 3]).unwrap()
}

fn still_rig() -> CameraRig {
    CameraRig {
        azimuth_jitter: 0.0,
        elevation_jitter: 0.0,
        elevation: 0.0,
        ..CameraRig::default()
    }
}

/// Ray/sphere intersection by the quadratic formula.
fn sphere_hit(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - r * r);
    (disc >= 0.0).then(|| -b - disc.sqrt()).filter(|t| *t > 0.0)
}

#[test]
fn single_camera_sees_the_sphere_at_depth_two() {
    let scene = unit_sphere();
    let cams = generate_cameras(&scene, 1, 0, &still_rig(), 33, 33).unwrap();
    let c = cams[0].center();
    assert!((c - Vec3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
    let s = MultiViewSample::render("s", &scene, cams).unwrap();
    let depth = s.views[0].render.depth[16 * 33 + 16];
    assert!((depth - 2.0).abs() < 1e-3, "{depth}");
    assert_eq!(s.views[0].render.semantic[16 * 33 + 16], 3);
    // Corner pixels miss.
    assert_eq!(s.views[0].render.depth[0], 0.0);
    assert_eq!(s.views[0].render.semantic[0], 0);
    assert_eq!(&s.views[0].render.rgb[..3], &[0.0, 0.0, 0.0]);
}

#[test]
fn depth_matches_closed_form_intersection() {
    let center = Vec3::new(0.2, -0.1, 0.3);
    let r = 0.7;
    let scene =
        SceneSpec::new(vec![SdfPrimitive::sphere([0.2, -0.1, 0.3], r, [0.5; 3], 1)], [0.0; 3]).unwrap();
    let cams = generate_cameras(&scene, 3, 9, &CameraRig::default(), 24, 24).unwrap();
    let s = MultiViewSample::render("s", &scene, cams).unwrap();
    let mut hits = 0;
    for v in &s.views {
        let cam = &v.camera;
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (o, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                let got = v.render.depth[y * cam.width + x] as f64;
                match sphere_hit(&o, &d, &center, r) {
                    // Grazing rays can legitimately exit before converging.
                    Some(t) if got > 0.0 => {
                        assert!((got - t).abs() < 1e-3, "pixel ({x},{y}): {got} vs {t}");
                        hits += 1;
                    }
                    Some(_) => {}
                    None => assert_eq!(got, 0.0),
                }
            }
        }
    }
    assert!(hits > 100);
}

#[test]
fn oracle_hits_lie_on_the_surface_and_past_the_bounds_entry() {
    let ds = generate_dataset(&DatasetConfig { width: 24, height: 24, ..DatasetConfig::default() }, 4, 3).unwrap();
    for s in &ds.samples {
        let scene = s.scene.as_ref().unwrap();
        for v in &s.views {
            let cam = &v.camera;
            for (p, &depth) in v.render.depth.iter().enumerate() {
                if depth == 0.0 {
                    continue;
                }
                let (o, d) = cam.ray((p % cam.width) as f64 + 0.5, (p / cam.width) as f64 + 0.5);
                let t = trace(scene, &o, &d).unwrap();
                assert_eq!(t as f32, depth);
                assert!(scene_sdf(scene, &(o + d * t)).abs() <= TRACE_TOLERANCE);
                let (entry, _) = scene.bounds.clip(&o, &d).unwrap();
                assert!(t >= entry);
            }
        }
    }
}

#[test]
fn dataset_roundtrip() {
    let cfg = DatasetConfig { width: 20, height: 16, views: 3, ..DatasetConfig::default() };
    let ds = generate_dataset(&cfg, 2, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.class_count, ds.class_count);
    assert_eq!(back.teacher_seed, ds.teacher_seed);
    assert_eq!(back.teacher_dim, ds.teacher_dim);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.scene_id, b.scene_id);
        assert_eq!(a.bounds, b.bounds);
        for (va, vb) in a.views.iter().zip(&b.views) {
            let bits = |d: &[f32]| d.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&va.render.depth), bits(&vb.render.depth));
            assert_eq!(va.render.semantic, vb.render.semantic);
            for (x, y) in va.render.rgb.iter().zip(&vb.render.rgb) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-7);
            }
            assert_eq!(va.camera.extrinsics(), vb.camera.extrinsics());
            assert_eq!(
                [va.camera.fx, va.camera.fy, va.camera.cx, va.camera.cy],
                [vb.camera.fx, vb.camera.fy, vb.camera.cx, vb.camera.cy]
            );
        }
    }
    // A second write of the read-back dataset is byte-identical.
    let dir2 = tempfile::tempdir().unwrap();
    write_dataset(&back, dir2.path()).unwrap();
    for e in fs::read_dir(dir.path()).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(dir2.path().join(&name)).unwrap());
    }
}

#[test]
fn missing_view_file_is_named() {
    let ds = generate_dataset(&DatasetConfig { width: 8, height: 8, views: 2, ..DatasetConfig::default() }, 1, 0)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .find(|n| n.ends_with(".f32"))
        .unwrap();
    fs::remove_file(dir.path().join(&victim)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&victim), "{err}");
}

#[test]
fn truncated_depth_file_is_rejected() {
    let ds = generate_dataset(&DatasetConfig { width: 8, height: 8, views: 2, ..DatasetConfig::default() }, 1, 0)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "f32"))
        .unwrap();
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

#[test]
fn generation_is_seed_deterministic() {
    let cfg = DatasetConfig { width: 12, height: 12, ..DatasetConfig::default() };
    assert_eq!(generate_dataset(&cfg, 2, 4).unwrap(), generate_dataset(&cfg, 2, 4).unwrap());
    assert_ne!(generate_dataset(&cfg, 2, 4).unwrap(), generate_dataset(&cfg, 2, 5).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bounds_contain_padded_primitive_boxes(seed in any::<u64>()) {
        let scene = random_scene(&SceneGenConfig::default(), seed).unwrap();
        for p in &scene.primitives {
            prop_assert!(scene.bounds.contains(&p.aabb().padded(BOUNDS_PAD)));
        }
        let union = scene.primitives.iter().skip(1).fold(scene.primitives[0].aabb(), |a, p| a.union(&p.aabb()));
        let (lo, hi) = union.to_arrays();
        let (blo, bhi) = scene.bounds.to_arrays();
        for a in 0..3 {
            // 10% of the half-extent on each side.
            let pad = BOUNDS_PAD * 0.5 * (hi[a] - lo[a]);
            prop_assert!((blo[a] - (lo[a] - pad)).abs() < 1e-12);
            prop_assert!((bhi[a] - (hi[a] + pad)).abs() < 1e-12);
        }
    }

    #[test]
    fn cameras_are_proper_rotations(seed in any::<u64>(), n in 1usize..8) {
        let scene = random_scene(&SceneGenConfig::default(), seed).unwrap();
        let cams = generate_cameras(&scene, n, seed, &CameraRig::default(), 16, 16).unwrap();
        prop_assert_eq!(cams.len(), n);
        for c in &cams {
            let r = &c.rotation;
            prop_assert!((r * r.transpose() - nalgebra::Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
            // The optical axis passes through the bounds centre.
            let pc = c.to_camera(&scene.bounds.center());
            prop_assert!(pc.x.abs() < 1e-9 && pc.y.abs() < 1e-9 && pc.z > 0.0);
        }
        prop_assert_eq!(cams, generate_cameras(&scene, n, seed, &CameraRig::default(), 16, 16).unwrap());
    }

    #[test]
    fn union_is_the_minimum(px in -2.0f64..2.0, py in -2.0f64..2.0, pz in -2.0f64..2.0) {
        let a = SdfPrimitive::sphere([0.3, 0.0, 0.0], 0.5, [1.0; 3], 1);
        let b = SdfPrimitive::cuboid([-0.4, 0.2, 0.1], [0.3, 0.2, 0.4], [1.0; 3], 2);
        let scene = SceneSpec::new(vec![a.clone(), b.clone()], [0.0; 3]).unwrap();
        let p = Vec3::new(px, py, pz);
        prop_assert_eq!(scene_sdf(&scene, &p), a.sdf(&p).min(b.sdf(&p)));
    }
}

#[test]
fn intrinsics_from_fov() {
    let i = Intrinsics::from_fov(64, 64, 90.0);
    assert!((i.focal - 32.0).abs() < 1e-12);
}
