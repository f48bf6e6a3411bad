//! The full pre-training network: per-view encoder, volume lifter and field
//! decoder, plus the pixel batching that feeds the renderer.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spa_diff::{ParamStore, Scalar, Tape, Var};

use crate::encoder::{image_tensor, Encoder, Masking, VitConfig};
use crate::error::{Result, SpaError};
use crate::losses::SupervisionBatch;
use crate::renderer::{ray_from_pixel, render_rays, FieldDecoder, Ray, RenderFields, SamplerConfig};
use crate::rng::mix;
use crate::scenes::{MultiViewSample, SemanticTeacher, ViewRender};
use crate::volume::{make_grid, DeformAttnConfig, VolumeConfig, VolumeLifter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSettings {
    pub dims: [usize; 3],
    pub channels: usize,
    pub points: usize,
    pub offset_scale: f64,
    pub max_views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub l_max: usize,
    pub semantic_dim: usize,
    pub decoder_hidden: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl RenderSettings {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: VitConfig,
    pub volume: VolumeSettings,
    pub render: RenderSettings,
}

impl ModelConfig {
    pub fn volume_config(&self) -> VolumeConfig {
        VolumeConfig {
            dims: self.volume.dims,
            channels: self.volume.channels,
            feature_dim: self.encoder.feature_dim(),
            attn: DeformAttnConfig {
                points: self.volume.points,
                heads: 1,
                offset_scale: self.volume.offset_scale,
                max_views: self.volume.max_views,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpaModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub lifter: VolumeLifter,
    pub decoder: FieldDecoder,
}

impl SpaModel {
    /// Registers every parameter in `store`, encoder first.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(store, &cfg.encoder, &mut rng)?;
        let lifter = VolumeLifter::new(store, &cfg.volume_config(), &mut rng)?;
        let r = &cfg.render;
        let decoder = FieldDecoder::new(
            store,
            cfg.volume.channels,
            r.decoder_hidden,
            r.l_max,
            r.semantic_dim,
            &mut rng,
        )?;
        Ok(SpaModel {
            cfg: cfg.clone(),
            encoder,
            lifter,
            decoder,
        })
    }

    /// Encodes every view, lifts to the volume and decodes render fields.
    /// View `i` is masked with seed `mix(mask_seed, i)` when `mask_ratio > 0`.
    pub fn fields<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        sample: &MultiViewSample,
        mask_ratio: f64,
        mask_seed: u64,
    ) -> Result<RenderFields> {
        let size = self.cfg.encoder.image_size;
        let mut maps: Vec<Var> = Vec::with_capacity(sample.views.len());
        for (i, v) in sample.views.iter().enumerate() {
            let c = &v.camera;
            if c.width != size || c.height != size {
                return Err(SpaError::invalid(format!(
                    "view {i} of {} is {}x{}, encoder expects {size}x{size}",
                    sample.scene_id, c.width, c.height
                )));
            }
            let img = image_tensor::<T>(&v.render.rgb, size, size)?;
            let masking = if mask_ratio > 0.0 {
                Masking::Random {
                    ratio: mask_ratio,
                    seed: mix(mask_seed, i as u64),
                }
            } else {
                Masking::Off
            };
            maps.push(self.encoder.encode_view(t, s, &img, masking)?.features);
        }
        let maps = t.concat(&maps, 0)?;
        let [x, y, z] = self.cfg.volume.dims;
        let grid = make_grid(&sample.bounds, x, y, z)?;
        let cams: Vec<_> = sample.views.iter().map(|v| v.camera.clone()).collect();
        let vol = self.lifter.forward(t, s, maps, &grid, &cams)?;
        self.decoder.decode(t, s, vol, &grid)
    }
}

/// Draws `k` distinct pixels from every view and returns their rays and
/// supervision, view-major.
pub fn sample_pixels(
    sample: &MultiViewSample,
    teacher: &SemanticTeacher,
    k: usize,
    seed: u64,
) -> Result<(Vec<Ray>, SupervisionBatch)> {
    let n = sample.views.len() * k;
    let mut rays = Vec::with_capacity(n);
    let mut batch = SupervisionBatch {
        color: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        semantic: Vec::with_capacity(n * teacher.dim),
    };
    for (i, v) in sample.views.iter().enumerate() {
        let (w, h) = (v.camera.width, v.camera.height);
        if k > w * h {
            return Err(SpaError::invalid(format!("{k} pixels requested from a {w}x{h} view")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
        let mut idx = index::sample(&mut rng, w * h, k).into_vec();
        idx.sort_unstable();
        for p in idx {
            let (u, y) = (p % w, p / w);
            rays.push(ray_from_pixel(&v.camera, u, y));
            batch.color.extend_from_slice(&v.render.rgb[3 * p..3 * p + 3]);
            batch.depth.push(v.render.depth[p]);
            batch.semantic.extend_from_slice(teacher.row(v.render.semantic[p])?);
        }
    }
    Ok((rays, batch))
}

/// Rays for every pixel of one view, row-major.
pub fn view_rays(sample: &MultiViewSample, view: usize) -> Result<Vec<Ray>> {
    let v = sample
        .views
        .get(view)
        .ok_or_else(|| SpaError::invalid(format!("view {view} out of range")))?;
    let (w, h) = (v.camera.width, v.camera.height);
    Ok((0..w * h).map(|p| ray_from_pixel(&v.camera, p % w, p / w)).collect())
}

/// Renders every pixel of `view` with all views visible to the encoder.
/// Semantic ids are left at 0; the rendered features have no class labels.
pub fn render_view(
    model: &SpaModel,
    store: &ParamStore<f32>,
    sample: &MultiViewSample,
    view: usize,
    seed: u64,
) -> Result<ViewRender> {
    let rays = view_rays(sample, view)?;
    let n = rays.len();
    let t = Tape::<f32>::new();
    let fields = model.fields(&t, store, sample, 0.0, 0)?;
    let mut out = ViewRender {
        rgb: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        semantic: vec![0; n],
    };
    if let Some(r) = render_rays(&t, &fields, &rays, &model.cfg.render.sampler(), seed)? {
        out.rgb = t.value(r.color).data().to_vec();
        out.depth = t.value(r.depth).data().to_vec();
    }
    Ok(out)
}
