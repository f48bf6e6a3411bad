//! Finite-difference certification of the composite paths: per-view
//! encoding, the volume lift and rendering through every loss term.
//!
//! Each composite check draws fresh random parameters and inputs per
//! instance and runs in f64 against central differences.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spa_diff::suite::{primitive_suite, project, uniform};
use spa_diff::{
    compare_gradients, finite_difference_gradient, GradCheckReport, ParamStore, Tape, Tensor,
    Tolerance, Var, COMPOSITE_TOL, FD_EPS,
};

use crate::encoder::{Encoder, Masking, VitConfig};
use crate::error::{Result, SpaError};
use crate::losses::{compute_losses, LossToggles, LossWeights, SupervisionBatch, TERM_NAMES};
use crate::renderer::{plan_samples, render_with_plan, sh_channels, Ray, RenderFields, SamplePlan, SamplerConfig};
use crate::scenes::{Aabb, CameraParams, Intrinsics};
use crate::volume::{make_grid, project_voxels, DeformAttnConfig, VolumeConfig, VolumeGrid, VolumeLifter};

pub const INSTANCES: u64 = 10;
pub const SUITES: [&str; 4] = ["primitives", "encoder", "volume", "render"];

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub reports: Vec<GradCheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.reports.is_empty() && self.reports.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckReport> {
        self.reports.iter().filter(|r| !r.passed)
    }
}

pub fn run_suite(name: &str, instances: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let reports = match name {
        "primitives" => primitive_suite(instances)?,
        "encoder" => encoder_suite(instances)?,
        "volume" => volume_suite(instances)?,
        "render" => render_suite(instances)?,
        other => {
            return Err(SpaError::invalid(format!(
                "unknown gradcheck suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: name.to_string(),
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Compares the tape gradient of `f` with respect to every parameter in
/// `store` and every tensor in `inputs` against central differences.
pub fn check_params_and_inputs<F>(
    op: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    tol: Tolerance,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let root = f(&t, store, &vars)?;
    let g = t.backward(root)?;
    let mut analytic = Vec::new();
    let mut by_param: Vec<Option<&Tensor<f64>>> = vec![None; store.len()];
    for (id, gr) in g.params() {
        by_param[id.0] = Some(gr);
    }
    for ((_, p), gr) in store.iter().zip(&by_param) {
        match gr {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(p.value.numel())),
        }
    }
    for (v, x) in vars.iter().zip(inputs) {
        match g.wrt(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(x.numel())),
        }
    }

    let mut flat: Vec<f64> = store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
    flat.extend(inputs.iter().flat_map(|x| x.data().iter().copied()));
    let eval = |x: &[f64]| -> spa_diff::Result<f64> {
        let mut s = store.clone();
        let mut off = 0;
        for p in s.iter_mut() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        let t = Tape::new();
        let mut vars = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let n = inp.numel();
            vars.push(t.input(Tensor::new(inp.shape().to_vec(), x[off..off + n].to_vec())?));
            off += n;
        }
        let r = f(&t, &s, &vars).map_err(|e| spa_diff::DiffError::InvalidArgument {
            op: "composite",
            reason: e.to_string(),
        })?;
        Ok(t.item(r))
    };
    let numeric = finite_difference_gradient(eval, &flat, FD_EPS)?;
    Ok(compare_gradients(op, &analytic, &numeric, tol))
}

/// The smallest encoder that exercises every stage.
pub fn tiny_encoder() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch: 4,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    }
}

/// Encoder features and class token, wrt all encoder parameters, with
/// random masking of half the patches.
pub fn encoder_suite(instances: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = tiny_encoder();
    (0..instances)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xe1c0 + k);
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, &cfg, &mut rng)?;
            perturb(&mut store, &mut rng, 0.3);
            let img = uniform(&mut rng, &[3, 8, 8], 0.0, 1.0);
            let masking = if k % 2 == 0 {
                Masking::Random { ratio: 0.5, seed: k }
            } else {
                Masking::Off
            };
            check_params_and_inputs(
                "encode_view",
                &store,
                &[],
                |t, s, _| {
                    let out = enc.encode_view(t, s, &img, masking)?;
                    let a = project(t, out.features, 7 * k + 1)?;
                    let b = project(t, out.cls, 7 * k + 2)?;
                    Ok(t.add(a, b)?)
                },
                COMPOSITE_TOL,
            )
        })
        .collect()
}

/// Adds uniform noise so zero-initialised heads carry gradient signal.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amount: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

fn unit_grid(dims: [usize; 3]) -> Result<VolumeGrid> {
    make_grid(&Aabb::new([-1.0; 3], [1.0; 3])?, dims[0], dims[1], dims[2])
}

/// Two cameras looking at the origin from the front and the side.
pub fn test_cameras(size: usize) -> Result<Vec<CameraParams>> {
    let intr = Intrinsics::from_fov(size, size, 60.0);
    let target = Vector3::zeros();
    Ok(vec![
        CameraParams::look_at(Vector3::new(0.2, 0.4, -3.0), target, intr)?,
        CameraParams::look_at(Vector3::new(3.0, 0.6, 0.3), target, intr)?,
    ])
}

/// Distance from a sampling coordinate to the nearest bilinear kink.
fn lattice_gap(u: f64) -> f64 {
    let f = (u - 0.5).rem_euclid(1.0);
    f.min(1.0 - f)
}

const KINK_MARGIN: f64 = 1e-3;

/// Deformable attention plus residual 3-D refinement on a 4x4x2 grid from
/// two views, wrt the lifter parameters and the feature maps.
pub fn volume_suite(instances: u64) -> Result<Vec<GradCheckReport>> {
    let dims = [4, 4, 2];
    let grid = unit_grid(dims)?;
    let cams = test_cameras(8)?;
    let refs: Vec<_> = cams.iter().map(|c| project_voxels(&grid, c)).collect();
    let cfg = VolumeConfig {
        dims,
        channels: 4,
        feature_dim: 2,
        attn: DeformAttnConfig {
            points: 2,
            max_views: 2,
            ..DeformAttnConfig::default()
        },
    };
    (0..instances)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x701 + k);
            let mut store = ParamStore::<f64>::new();
            let lifter = VolumeLifter::new(&mut store, &cfg, &mut rng)?;
            let base = store.clone();
            // Bilinear sampling has kinks on the pixel lattice; redraw until
            // every sampling location is clear of them.
            loop {
                store = base.clone();
                perturb(&mut store, &mut rng, 0.3);
                let locs = lifter.sample_locations(&store, &refs)?;
                if locs.iter().flatten().all(|&u| lattice_gap(u) > KINK_MARGIN) {
                    break;
                }
            }
            let maps = uniform(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
            check_params_and_inputs(
                "volume_lift",
                &store,
                &[maps],
                |t, s, v| {
                    let vol = lifter.forward(t, s, v[0], &grid, &cams)?;
                    Ok(project(t, vol, 11 * k + 3)?)
                },
                COMPOSITE_TOL,
            )
        })
        .collect()
}

/// Random rays aimed through the unit cube.
fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray> {
    (0..n)
        .map(|_| {
            let origin = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -3.0);
            let aim = Vector3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0);
            Ray {
                origin,
                dir: (aim - origin).normalize(),
                t_near: 0.0,
                t_far: 10.0,
            }
        })
        .collect()
}

struct RenderCase {
    grid: VolumeGrid,
    fields: Tensor<f64>,
    log_s: Tensor<f64>,
    plan: SamplePlan,
    batch: SupervisionBatch,
    l_max: usize,
    sem: usize,
}

fn render_case(k: u64) -> Result<RenderCase> {
    let (l_max, sem) = (1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0x4e0 + k);
    let grid = unit_grid([4, 4, 4])?;
    let ch = 1 + sh_channels(l_max) + sem;
    let fields = Tensor::from_fn(vec![4, 4, 4, ch], |i| {
        let c = i % ch;
        if c == 0 {
            // SDF of a sphere of radius 0.5 plus noise, so rays cross a surface
            let v = i / ch;
            let p = grid.center(v / 16, (v / 4) % 4, v % 4);
            p.norm() - 0.5 + rng.gen_range(-0.1..0.1)
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    let log_s = Tensor::new(vec![1], vec![rng.gen_range(1.0..2.5)])?;
    let rays = random_rays(&mut rng, 4);
    let plan = {
        let t = Tape::new();
        let f = t.constant(fields.clone());
        let ls = t.constant(log_s.clone());
        let rf = RenderFields::new(&t, &grid, f, ls, l_max, sem)?;
        plan_samples(&t, &rf, &rays, &SamplerConfig { n_coarse: 8, n_fine: 4 }, k)?
    };
    let n = rays.len();
    let mut depth: Vec<f32> = (0..n).map(|_| rng.gen_range(2.0..3.5)).collect();
    depth[n - 1] = 0.0;
    let batch = SupervisionBatch {
        color: (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        depth,
        semantic: (0..sem * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    Ok(RenderCase {
        grid,
        fields,
        log_s,
        plan,
        batch,
        l_max,
        sem,
    })
}

/// Only term `i` enabled.
pub fn single_toggle(i: usize) -> LossToggles {
    let mut on = [false; 6];
    on[i] = true;
    LossToggles {
        color: on[0],
        depth: on[1],
        semantic: on[2],
        eikonal: on[3],
        sdf: on[4],
        free: on[5],
    }
}

/// Rendering with a fixed sample plan, wrt the field grid and `log s`: the
/// raw pixel outputs, each loss term alone and the weighted total. The
/// sampler is a stop-gradient step, so holding its plan fixed is exactly
/// the function the tape differentiates.
pub fn render_suite(instances: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let weights = LossWeights::default();
    for k in 0..instances {
        let case = render_case(k)?;
        let inputs = [case.fields.clone(), case.log_s.clone()];
        let empty = ParamStore::new();
        let render = |t: &Tape<f64>, v: &[Var]| -> Result<crate::renderer::RenderOutput> {
            let rf = RenderFields::new(t, &case.grid, v[0], v[1], case.l_max, case.sem)?;
            render_with_plan(t, &rf, case.plan.clone())?
                .ok_or_else(|| SpaError::invalid("render case has no hit rays"))
        };
        out.push(check_params_and_inputs(
            "render_pixel",
            &empty,
            &inputs,
            |t, _, v| {
                let o = render(t, v)?;
                let a = project(t, o.color, 3 * k)?;
                let b = project(t, o.depth, 3 * k + 1)?;
                let c = project(t, o.semantic, 3 * k + 2)?;
                Ok(t.add(t.add(a, b)?, c)?)
            },
            COMPOSITE_TOL,
        )?);
        for (i, name) in TERM_NAMES.iter().enumerate() {
            let on = single_toggle(i);
            out.push(check_params_and_inputs(
                &format!("loss_{name}"),
                &empty,
                &inputs,
                |t, _, v| Ok(compute_losses(t, &render(t, v)?, &case.batch, &weights, &on)?.total),
                COMPOSITE_TOL,
            )?);
        }
        out.push(check_params_and_inputs(
            "loss_total",
            &empty,
            &inputs,
            |t, _, v| Ok(compute_losses(t, &render(t, v)?, &case.batch, &weights, &LossToggles::default())?.total),
            COMPOSITE_TOL,
        )?);
    }
    Ok(out)
}
