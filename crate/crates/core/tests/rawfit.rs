use spa_core::losses::LossToggles;
use spa_core::rawfit::{fit_raw_fields, RawFitConfig};
use spa_core::renderer::SamplerConfig;
use spa_core::scenes::{generate_cameras, CameraRig, MultiViewSample, SceneSpec, SdfPrimitive};

fn sphere(views: usize, size: usize) -> MultiViewSample {
    let scene = SceneSpec::new(vec![SdfPrimitive::sphere([0.0; 3], 0.6, [0.8, 0.4, 0.2], 1)], [0.0; 3]).unwrap();
    let cams = generate_cameras(&scene, views, 3, &CameraRig::default(), size, size).unwrap();
    MultiViewSample::render("sphere", &scene, cams).unwrap()
}

fn short() -> RawFitConfig {
    RawFitConfig {
        dims: [12, 12, 12],
        sampler: SamplerConfig { n_coarse: 24, n_fine: 8 },
        steps: 150,
        pixels_per_view: 64,
        toggles: LossToggles { semantic: false, sdf: false, ..LossToggles::default() },
        free_probes: 512,
        ..RawFitConfig::default()
    }
}

#[test]
fn short_fit_improves_depth_and_loss() {
    let r = fit_raw_fields(&sphere(4, 16), &short()).unwrap();
    assert_eq!(r.steps, 150);
    assert!(r.depth_mae < 0.5 * r.initial_depth_mae, "{r:?}");
    assert!(r.last_loss < r.first_loss, "{r:?}");
    assert!(r.free_positive > 0.5 && r.free_positive <= 1.0);
    assert!(r.foreground_pixels > 0);
}

#[test]
fn fit_is_deterministic() {
    let cfg = RawFitConfig { steps: 5, ..short() };
    let s = sphere(2, 12);
    let (a, b) = (fit_raw_fields(&s, &cfg).unwrap(), fit_raw_fields(&s, &cfg).unwrap());
    assert_eq!(a.depth_mae.to_bits(), b.depth_mae.to_bits());
    assert_eq!(a.last_loss.to_bits(), b.last_loss.to_bits());
}

#[test]
fn fit_needs_the_analytic_scene() {
    let mut s = sphere(2, 12);
    s.scene = None;
    assert!(fit_raw_fields(&s, &RawFitConfig { steps: 1, ..short() }).is_err());
}
