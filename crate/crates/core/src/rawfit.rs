//! Direct optimisation of a raw field grid against one rendered scene, with
//! no encoder in the loop. Checks that the renderer and losses can recover
//! known geometry on their own.

use std::time::Instant;

use serde::Serialize;
use spa_diff::{ParamStore, Tape, Tensor};

use crate::error::{Result, SpaError};
use crate::losses::{compute_losses, LossToggles, LossWeights};
use crate::model::{sample_pixels, view_rays};
use crate::optim::{adamw_step, AdamW, OptimState};
use crate::renderer::{render_rays, sh_channels, RenderFields, SamplerConfig, INIT_SHARPNESS};
use crate::rng::{mix, stream};
use crate::scenes::{scene_sdf, MultiViewSample, SemanticTeacher};
use crate::volume::{make_grid, VolumeGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct RawFitConfig {
    pub dims: [usize; 3],
    pub l_max: usize,
    pub sampler: SamplerConfig,
    pub steps: usize,
    pub pixels_per_view: usize,
    pub lr: f64,
    pub losses: LossWeights,
    pub toggles: LossToggles,
    /// Free-space points are probed at least this many voxels outside.
    pub free_margin_voxels: f64,
    pub free_probes: usize,
    pub seed: u64,
}

impl Default for RawFitConfig {
    fn default() -> Self {
        RawFitConfig {
            dims: [24, 24, 24],
            l_max: 1,
            sampler: SamplerConfig { n_coarse: 48, n_fine: 16 },
            steps: 2000,
            pixels_per_view: 128,
            lr: 1e-2,
            losses: LossWeights::default(),
            toggles: LossToggles { semantic: false, ..LossToggles::default() },
            free_margin_voxels: 1.0,
            free_probes: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RawFitReport {
    pub steps: usize,
    pub voxel: f64,
    pub initial_depth_mae: f64,
    pub depth_mae: f64,
    /// Over foreground pixels (oracle depth > 0) of every view.
    pub foreground_pixels: usize,
    pub free_positive: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub seconds: f64,
}

/// A grid with an SDF of a sphere at the bounds centre with half the
/// smallest half-extent, zero colour and semantics.
fn initial_fields(grid: &VolumeGrid, channels: usize) -> Tensor<f32> {
    let c = grid.bounds.center();
    let (lo, hi) = grid.bounds.to_arrays();
    let r0 = 0.25 * (0..3).map(|a| hi[a] - lo[a]).fold(f64::INFINITY, f64::min);
    let centres = grid.centers();
    Tensor::from_fn(vec![grid.dims[0], grid.dims[1], grid.dims[2], channels], |i| {
        if i % channels == 0 {
            ((centres[i / channels] - c).norm() - r0) as f32
        } else {
            0.0
        }
    })
}

fn depth_mae(
    store: &ParamStore<f32>,
    ids: (spa_diff::ParamId, spa_diff::ParamId),
    grid: &VolumeGrid,
    cfg: &RawFitConfig,
    sem: usize,
    sample: &MultiViewSample,
) -> Result<(f64, usize)> {
    let (mut err, mut n) = (0.0, 0usize);
    for (v, view) in sample.views.iter().enumerate() {
        let t = Tape::<f32>::new();
        let fields = RenderFields::new(&t, grid, t.param(store, ids.0), t.param(store, ids.1), cfg.l_max, sem)?;
        let rays = view_rays(sample, v)?;
        let Some(out) = render_rays(&t, &fields, &rays, &cfg.sampler, mix(cfg.seed, 1 << 32 | v as u64))? else {
            continue;
        };
        let pred = t.value(out.depth).to_f64_vec();
        for (p, &d) in view.render.depth.iter().enumerate() {
            if d > 0.0 {
                err += (pred[p] - d as f64).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(SpaError::invalid("no foreground pixels to score"));
    }
    Ok((err / n as f64, n))
}

/// Fits the grid to `sample` and scores depth and free space against the
/// analytic scene.
pub fn fit_raw_fields(sample: &MultiViewSample, cfg: &RawFitConfig) -> Result<RawFitReport> {
    let start = Instant::now();
    let scene = sample.scene.as_ref().ok_or_else(|| SpaError::invalid("raw fit needs the analytic scene"))?;
    let grid = make_grid(&sample.bounds, cfg.dims[0], cfg.dims[1], cfg.dims[2])?;
    let sem = 1;
    let teacher = SemanticTeacher::new(256, sem, cfg.seed);
    let channels = 1 + sh_channels(cfg.l_max) + sem;

    let mut store = ParamStore::new();
    let fid = store.register("fields", initial_fields(&grid, channels))?;
    let sid = store.register("log_s", Tensor::new(vec![1], vec![INIT_SHARPNESS.ln() as f32])?)?;
    let mut optim = OptimState::new(&store);
    let adam = AdamW { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
    let (initial_depth_mae, _) = depth_mae(&store, (fid, sid), &grid, cfg, sem, sample)?;

    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let seed = mix(cfg.seed, step as u64);
        let t = Tape::<f32>::new();
        let fields = RenderFields::new(&t, &grid, t.param(&store, fid), t.param(&store, sid), cfg.l_max, sem)?;
        let (rays, batch) = sample_pixels(sample, &teacher, cfg.pixels_per_view, mix(seed, 2))?;
        let out = render_rays(&t, &fields, &rays, &cfg.sampler, mix(seed, 3))?
            .ok_or_else(|| SpaError::invalid("no sampled ray hits the bounds"))?;
        let terms = compute_losses(&t, &out, &batch, &cfg.losses, &cfg.toggles)?;
        let loss = terms.breakdown.total;
        if !loss.is_finite() {
            return Err(SpaError::NonFinite { what: format!("raw fit loss at step {step}") });
        }
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        let grads = t.backward(terms.total)?;
        drop(t);
        store.zero_grad();
        store.accumulate(&grads);
        // Cosine decay to a tenth of the initial rate.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()));
        adamw_step(&mut store, &mut optim, &adam, lr)?;
    }

    let (depth, foreground_pixels) = depth_mae(&store, (fid, sid), &grid, cfg, sem, sample)?;

    // Free-space probes: uniform points in the bounds clearly outside every primitive.
    let voxel = grid.mean_voxel();
    let margin = cfg.free_margin_voxels * voxel;
    let mut rng = stream(cfg.seed, 77);
    let (lo, hi) = grid.bounds.to_arrays();
    let sdf = Tape::<f32>::new();
    let fields = RenderFields::new(&sdf, &grid, sdf.param(&store, fid), sdf.param(&store, sid), cfg.l_max, sem)?;
    let sdf_values = sdf.value(fields.sdf);
    let (mut probed, mut positive) = (0usize, 0usize);
    while probed < cfg.free_probes {
        use rand::Rng;
        let p = crate::scenes::Vec3::new(
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        );
        if scene_sdf(scene, &p) <= margin {
            continue;
        }
        probed += 1;
        if fields.sdf_at(&sdf_values, &p) > 0.0 {
            positive += 1;
        }
    }

    Ok(RawFitReport {
        steps: cfg.steps,
        voxel,
        initial_depth_mae,
        depth_mae: depth,
        foreground_pixels,
        free_positive: positive as f64 / probed.max(1) as f64,
        first_loss,
        last_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}
