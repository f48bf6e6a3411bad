use proptest::prelude::*;
use spa_core::renderer::{
    aabb_clip, alpha_from_sdf, composite_weights, plan_samples, ray_from_pixel, render_pixel, render_with_plan,
    sh_channels, sh_color, Ray, RenderFields, SamplerConfig,
};
use spa_core::scenes::{Aabb, CameraParams, Intrinsics, Vec3};
use spa_core::volume::{make_grid, VolumeGrid};
use spa_diff::{Tape, Tensor};

const L_MAX: usize = 1;
const SEM: usize = 2;

fn channels() -> usize {
    1 + sh_channels(L_MAX) + SEM
}

fn cube_grid(n: usize) -> VolumeGrid {
    make_grid(&Aabb::new([-1.0; 3], [1.0; 3]).unwrap(), n, n, n).unwrap()
}

/// Channel-last field tensor with SDF given by `sdf(centre)` and the other
/// channels by `rest(voxel, channel)`.
fn field_tensor(grid: &VolumeGrid, sdf: impl Fn(&Vec3) -> f64, rest: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    let c = channels();
    let centres = grid.centers();
    Tensor::from_fn(vec![grid.dims[0], grid.dims[1], grid.dims[2], c], |i| {
        let (v, ch) = (i / c, i % c);
        if ch == 0 {
            sdf(&centres[v])
        } else {
            rest(v, ch)
        }
    })
}

fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
    Ray {
        origin: Vec3::from(o),
        dir: Vec3::from(d).normalize(),
        t_near: 0.0,
        t_far: 0.0,
    }
}

/// Deterministic pseudo-random values from a seed, in [-1, 1].
fn noise(seed: u64, i: usize) -> f64 {
    let mut x = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn compositing_invariants_on_random_fields(
        seed in any::<u64>(),
        log_s in 0.0f64..4.5,
        o in prop::array::uniform3(-2.5f64..2.5),
        target in prop::array::uniform3(-0.9f64..0.9),
        n_coarse in 2usize..24,
        n_fine in 0usize..12,
    ) {
        let grid = cube_grid(4);
        let f = field_tensor(&grid, |_| 0.0, |_, _| 0.0);
        let f = Tensor::new(f.shape().to_vec(), (0..f.numel()).map(|i| noise(seed, i)).collect()).unwrap();
        let t = Tape::<f64>::new();
        let fv = t.constant(f);
        let ls = t.constant(Tensor::new(vec![1], vec![log_s]).unwrap());
        let fields = RenderFields::new(&t, &grid, fv, ls, L_MAX, SEM).unwrap();
        let d = [target[0] - o[0], target[1] - o[1], target[2] - o[2]];
        prop_assume!(d.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let r = ray(o, d);
        let p = render_pixel(&t, &fields, &r, &SamplerConfig { n_coarse, n_fine }, seed).unwrap();
        prop_assert_eq!(p.t.len(), n_coarse + n_fine);
        prop_assert!((p.trans[0] - 1.0).abs() == 0.0);
        for w in p.trans.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        let sdf_only = t.value(fields.sdf);
        let mut survive = 1.0;
        for (j, &a) in p.alpha.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&a));
            // Same opacity as the plain ratio of sigmoids at the sampled SDF.
            let sdf = |tt: f64| fields.sdf_at(&sdf_only, &(r.origin + r.dir * tt));
            let next = p.t[(j + 1).min(p.t.len() - 1)];
            let plain = alpha_from_sdf(sdf(p.t[j]), sdf(next), log_s.exp());
            prop_assert!((a - plain).abs() < 1e-9, "alpha {} vs {}", a, plain);
            survive *= 1.0 - a;
        }
        let sum: f64 = p.weights.iter().sum();
        prop_assert!((sum - (1.0 - survive)).abs() < 1e-5);
        prop_assert!(sum <= 1.0 + 1e-5);
        for c in p.color {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn weight_identity_on_random_alphas(alpha in prop::collection::vec(0.0f64..=1.0, 1..64)) {
        let (trans, w) = composite_weights(&alpha);
        let prod: f64 = alpha.iter().map(|a| 1.0 - a).product();
        prop_assert!((w.iter().sum::<f64>() - (1.0 - prod)).abs() < 1e-12);
        prop_assert_eq!(trans[0], 1.0);
    }

    #[test]
    fn duplicate_samples_change_nothing(seed in any::<u64>(), dup in 0usize..20) {
        let grid = cube_grid(4);
        let f = field_tensor(&grid, |p| p.norm() - 0.6, |v, ch| 0.5 * noise(seed, v * 16 + ch));
        let t = Tape::<f64>::new();
        let fields = RenderFields::new(
            &t,
            &grid,
            t.constant(f),
            t.constant(Tensor::new(vec![1], vec![3.0]).unwrap()),
            L_MAX,
            SEM,
        )
        .unwrap();
        let r = ray([0.1, -0.2, -2.5], [0.05, 0.1, 1.0]);
        let plan = plan_samples(&t, &fields, &[r], &SamplerConfig { n_coarse: 16, n_fine: 4 }, seed).unwrap();
        let base = render_with_plan(&t, &fields, plan.clone()).unwrap().unwrap();
        let mut dupl = plan;
        let k = dup % dupl.t[0].len();
        let tk = dupl.t[0][k];
        dupl.t[0].insert(k, tk);
        let more = render_with_plan(&t, &fields, dupl).unwrap().unwrap();
        prop_assert_eq!(t.value(base.color).to_f64_vec(), t.value(more.color).to_f64_vec());
        prop_assert_eq!(t.value(base.depth).to_f64_vec(), t.value(more.depth).to_f64_vec());
        prop_assert_eq!(t.value(base.semantic).to_f64_vec(), t.value(more.semantic).to_f64_vec());
    }
}

#[test]
fn empty_field_renders_nothing() {
    let grid = cube_grid(4);
    let f = field_tensor(&grid, |_| 0.8, |_, _| 0.3);
    let t = Tape::<f64>::new();
    let fields =
        RenderFields::new(&t, &grid, t.constant(f), t.constant(Tensor::new(vec![1], vec![2.0]).unwrap()), L_MAX, SEM)
            .unwrap();
    let p = render_pixel(&t, &fields, &ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]), &SamplerConfig { n_coarse: 32, n_fine: 8 }, 0)
        .unwrap();
    assert_eq!(p.weights.iter().sum::<f64>(), 0.0);
    assert_eq!(p.depth, 0.0);
    assert_eq!(p.color, [0.0; 3]);
    // Missing the box altogether is also an empty prediction.
    let miss = render_pixel(&t, &fields, &ray([3.0, 0.0, -3.0], [0.0, 0.0, 1.0]), &SamplerConfig { n_coarse: 8, n_fine: 0 }, 0)
        .unwrap();
    assert!(miss.t.is_empty() && miss.depth == 0.0);
}

#[test]
fn plane_crossing_depth() {
    // SDF of the plane z = -0.5 seen from z = -1, so the surface is at t = 0.5.
    let grid = cube_grid(8);
    let f = field_tensor(&grid, |p| -0.5 - p.z, |_, _| 0.0);
    let t = Tape::<f64>::new();
    let fields = RenderFields::new(
        &t,
        &grid,
        t.constant(f.clone()),
        t.constant(Tensor::new(vec![1], vec![200f64.ln()]).unwrap()),
        L_MAX,
        SEM,
    )
    .unwrap();
    let r = ray([0.1, 0.2, -1.0], [0.0, 0.0, 1.0]);
    let sampler = SamplerConfig { n_coarse: 16, n_fine: 8 };
    let p = render_pixel(&t, &fields, &r, &sampler, 7).unwrap();
    let bin = 2.0 / 16.0;
    assert!((p.depth - 0.5).abs() < bin, "depth {}", p.depth);

    // Brute-force 1-D compositing of the analytic plane SDF at the same samples.
    let sdf: Vec<f64> = p.t.iter().map(|tt| -0.5 - (r.origin.z + r.dir.z * tt)).collect();
    let alpha: Vec<f64> =
        (0..sdf.len()).map(|j| alpha_from_sdf(sdf[j], sdf[(j + 1).min(sdf.len() - 1)], 200.0)).collect();
    let (_, w) = composite_weights(&alpha);
    let depth: f64 = w.iter().zip(&p.t).map(|(w, t)| w * t).sum();
    assert!((depth - p.depth).abs() < 1e-9, "{depth} vs {}", p.depth);
}

#[test]
fn opaque_first_sample_returns_its_colour() {
    let coeffs = vec![0.4; sh_channels(L_MAX)];
    let c = sh_color(&coeffs, L_MAX, [0.0, 0.0, 1.0]).unwrap();
    let (_, w) = composite_weights(&[1.0, 0.3, 0.9]);
    assert_eq!(w, vec![1.0, 0.0, 0.0]);
    assert!(c.iter().all(|&x| x > 0.0 && x < 1.0));
    let (_, w) = composite_weights(&[0.0; 5]);
    assert_eq!(w.iter().sum::<f64>(), 0.0);
}

#[test]
fn pixel_rays_project_back() {
    let cam = CameraParams::look_at(Vec3::new(0.4, 0.9, -2.8), Vec3::zeros(), Intrinsics::from_fov(40, 30, 50.0)).unwrap();
    let axis = cam.ray(cam.cx, cam.cy).1;
    let fwd = cam.rotation.transpose() * Vec3::z();
    assert!((axis - fwd).norm() < 1e-12);
    for (u, v) in [(0, 0), (39, 29), (17, 4), (20, 15)] {
        let r = ray_from_pixel(&cam, u, v);
        assert!((r.dir.norm() - 1.0).abs() < 1e-12);
        let (pu, pv) = cam.project_camera(&cam.to_camera(&(r.origin + r.dir * 2.0)));
        assert!((pu - (u as f64 + 0.5)).abs() < 1e-4 && (pv - (v as f64 + 0.5)).abs() < 1e-4);
    }
}

#[test]
fn clipped_rays_stay_in_the_box() {
    let b = Aabb::new([-1.0, -0.5, -2.0], [1.0, 0.5, 2.0]).unwrap();
    for k in 0..200 {
        let o = [noise(k, 0) * 4.0, noise(k, 1) * 4.0, noise(k, 2) * 4.0];
        let d = [noise(k, 3), noise(k, 4), noise(k, 5)];
        let r = ray(o, d);
        if let Some(c) = aabb_clip(&r, &b) {
            assert!(c.t_near <= c.t_far);
            for tt in [c.t_near, c.t_far] {
                let p = r.origin + r.dir * tt;
                assert!((0..3).all(|a| p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9));
            }
        }
    }
}
