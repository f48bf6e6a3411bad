//! Voxel query grid over the scene bounds, lifted from multi-view feature
//! maps by deformable attention and refined with a residual 3-D convolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spa_diff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Result, SpaError};
use crate::nn::{param, Conv2d, Conv3d, Init, Linear};
use crate::scenes::{Aabb, CameraParams, Vec3};

/// Smallest camera-frame depth that counts as in front of the camera.
pub const Z_MIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub bounds: Aabb,
    pub voxel: [f64; 3],
}

pub fn make_grid(bounds: &Aabb, x: usize, y: usize, z: usize) -> Result<VolumeGrid> {
    if x == 0 || y == 0 || z == 0 {
        return Err(SpaError::invalid(format!("grid resolution {x}x{y}x{z}")));
    }
    let e = bounds.extent();
    if (0..3).any(|a| !(e[a] > 0.0)) {
        return Err(SpaError::invalid("degenerate grid bounds"));
    }
    let dims = [x, y, z];
    Ok(VolumeGrid {
        dims,
        bounds: bounds.clone(),
        voxel: [0, 1, 2].map(|a| e[a] / dims[a] as f64),
    })
}

impl VolumeGrid {
    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let m = &self.bounds.min;
        Vec3::new(
            m.x + (i as f64 + 0.5) * self.voxel[0],
            m.y + (j as f64 + 0.5) * self.voxel[1],
            m.z + (k as f64 + 0.5) * self.voxel[2],
        )
    }

    /// All voxel centers, x slowest and z fastest.
    pub fn centers(&self) -> Vec<Vec3> {
        let [x, y, z] = self.dims;
        let mut out = Vec::with_capacity(self.count());
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    out.push(self.center(i, j, k));
                }
            }
        }
        out
    }

    /// Continuous grid-index coordinates of a world point; voxel centers sit
    /// on integer indices.
    pub fn to_index(&self, p: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.bounds.min[a]) / self.voxel[a] - 0.5)
    }

    /// Geometric mean of the per-axis voxel sizes.
    pub fn mean_voxel(&self) -> f64 {
        self.voxel.iter().product::<f64>().cbrt()
    }
}

/// Per-voxel pixel coordinates in one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub uv: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

pub fn project_points(points: &[Vec3], cam: &CameraParams) -> Projection {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut uv = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let pc = cam.to_camera(p);
        if pc.z > Z_MIN {
            let (u, v) = cam.project_camera(&pc);
            uv.push([u, v]);
            valid.push((0.0..w).contains(&u) && (0.0..h).contains(&v));
        } else {
            uv.push([0.0, 0.0]);
            valid.push(false);
        }
    }
    Projection { uv, valid }
}

pub fn project_voxels(grid: &VolumeGrid, cam: &CameraParams) -> Projection {
    project_points(&grid.centers(), cam)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    pub points: usize,
    pub heads: usize,
    /// Bound on predicted offsets, in pixels.
    pub offset_scale: f64,
    /// Views the offset and logit heads are sized for.
    pub max_views: usize,
}

impl Default for DeformAttnConfig {
    fn default() -> Self {
        DeformAttnConfig {
            points: 4,
            heads: 1,
            offset_scale: 8.0,
            max_views: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub dims: [usize; 3],
    pub channels: usize,
    pub feature_dim: usize,
    pub attn: DeformAttnConfig,
}

impl VolumeConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attn;
        if self.dims.contains(&0) || self.channels == 0 || self.feature_dim == 0 {
            return Err(SpaError::invalid("volume dims and channels must be positive"));
        }
        if a.points == 0 || a.max_views == 0 {
            return Err(SpaError::invalid("deformable attention needs points and views"));
        }
        if a.heads != 1 {
            return Err(SpaError::invalid("deformable attention supports a single head"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VolumeLifter {
    pub cfg: VolumeConfig,
    /// Learnable per-voxel query embeddings `[X*Y*Z, C_v]`.
    pub queries: ParamId,
    pub value: Conv2d,
    pub offsets: Linear,
    pub logits: Linear,
    pub out: Linear,
    pub refine: Conv3d,
}

impl VolumeLifter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &VolumeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, a) = (cfg.channels, &cfg.attn);
        let q: usize = cfg.dims.iter().product();
        let slots = a.max_views * a.points;
        let queries = param(store, "volume.queries", vec![q, c], Init::Normal(0.02), rng)?;
        let value = Conv2d::new(store, "volume.value", cfg.feature_dim, c, 1, rng)?;
        let offsets = Linear::new(store, "volume.offsets", c, slots * 2, Init::Zeros, rng)?;
        // Start the sampling points on a small ring around the reference.
        let radius = 2.0f64.min(0.5 * a.offset_scale);
        let bias = store.get_mut(offsets.b);
        for v in 0..a.max_views {
            for p in 0..a.points {
                let th = std::f64::consts::TAU * p as f64 / a.points as f64;
                let o = (v * a.points + p) * 2;
                let r = (radius / a.offset_scale).atanh();
                bias.value.data_mut()[o] = T::c(r * th.cos());
                bias.value.data_mut()[o + 1] = T::c(r * th.sin());
            }
        }
        let logits = Linear::new(store, "volume.logits", c, slots, Init::Zeros, rng)?;
        let out = Linear::new(store, "volume.out", c, c, Init::glorot(c, c), rng)?;
        let fan = c * 27;
        let refine = Conv3d::new(store, "volume.refine", c, c, 3, Init::glorot(fan, fan), rng)?;
        Ok(VolumeLifter {
            cfg: cfg.clone(),
            queries,
            value,
            offsets,
            logits,
            out,
            refine,
        })
    }

    fn check_refs(&self, t_maps: Option<&[usize]>, refs: &[Projection]) -> Result<()> {
        let a = &self.cfg.attn;
        let nv = refs.len();
        let q: usize = self.cfg.dims.iter().product();
        let maps_ok = t_maps.map_or(true, |ms| ms.len() == 4 && ms[0] == nv);
        if nv == 0 || nv > a.max_views || !maps_ok {
            return Err(SpaError::invalid(format!(
                "deformable attention over {nv} views with maps {t_maps:?} (max {})",
                a.max_views
            )));
        }
        if refs.iter().any(|r| r.uv.len() != q || r.valid.len() != q) {
            return Err(SpaError::invalid("projection count differs from the grid"));
        }
        Ok(())
    }

    /// Reference point plus bounded learned offset for every
    /// (query, view, point) slot, as `[Q * V * P, 2]`.
    fn sampling_coords<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, query: Var, refs: &[Projection]) -> Result<Var> {
        let a = &self.cfg.attn;
        let q: usize = self.cfg.dims.iter().product();
        let slots = refs.len() * a.points;
        let mut refc = Vec::with_capacity(q * slots * 2);
        for qi in 0..q {
            for r in refs {
                for _ in 0..a.points {
                    refc.push(T::c(r.uv[qi][0]));
                    refc.push(T::c(r.uv[qi][1]));
                }
            }
        }
        let off = self.offsets.forward(t, s, query)?;
        let off = t.slice(off, 1, 0, slots * 2)?;
        let off = t.scale(t.tanh(off)?, a.offset_scale)?;
        let coords = t.add(off, t.constant(Tensor::new(vec![q, slots * 2], refc)?))?;
        Ok(t.reshape(coords, &[q * slots, 2])?)
    }

    /// Pixel locations every slot reads, in slot order.
    pub fn sample_locations<T: Scalar>(&self, s: &ParamStore<T>, refs: &[Projection]) -> Result<Vec<[f64; 2]>> {
        self.check_refs(None, refs)?;
        let t = Tape::new();
        let c = self.sampling_coords(&t, s, t.param(s, self.queries), refs)?;
        Ok(t.value(c).to_f64_vec().chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    /// Attends every voxel query over all (view, point) slots. `maps` is the
    /// stacked `[V, C_f, H, W]` feature maps, `refs` the per-view voxel
    /// projections. Returns `[Q, C_v]`.
    pub fn deformable_attention<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        maps: Var,
        refs: &[Projection],
    ) -> Result<Var> {
        self.check_refs(Some(&t.shape(maps)), refs)?;
        let (c, np) = (self.cfg.channels, self.cfg.attn.points);
        let q: usize = self.cfg.dims.iter().product();
        let slots = refs.len() * np;

        let mut mask = Vec::with_capacity(q * slots);
        let mut views = Vec::with_capacity(q * slots);
        let mut pass = Vec::with_capacity(q);
        for qi in 0..q {
            for (vi, r) in refs.iter().enumerate() {
                for _ in 0..np {
                    mask.push(r.valid[qi]);
                    views.push(vi);
                }
            }
            pass.push(if refs.iter().any(|r| r.valid[qi]) { T::zero() } else { T::one() });
        }

        let query = t.param(s, self.queries);
        let values = self.value.forward(t, s, maps)?;
        let coords = self.sampling_coords(t, s, query, refs)?;
        let sampled = t.bilinear_sample(values, coords, &views)?;
        let sampled = t.reshape(sampled, &[q, slots, c])?;

        let logits = t.slice(self.logits.forward(t, s, query)?, 1, 0, slots)?;
        let weights = t.masked_softmax(logits, &mask)?;
        let weights = t.reshape(weights, &[q, 1, slots])?;
        let attended = t.reshape(t.matmul(weights, sampled)?, &[q, c])?;
        let attended = self.out.forward(t, s, attended)?;

        let pass = Tensor::new(vec![q, 1], pass)?;
        let keep = t.constant(pass.map(|m| T::one() - m));
        let pass = t.constant(pass);
        Ok(t.add(t.mul(attended, keep)?, t.mul(query, pass)?)?)
    }

    /// `x + Conv3D(x)` on `[C_v, X, Y, Z]`.
    pub fn conv3d_refine<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(t.add(x, self.refine.forward(t, s, x)?)?)
    }

    /// Full lift: returns the refined volume `[C_v, X, Y, Z]`.
    pub fn forward<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        maps: Var,
        grid: &VolumeGrid,
        cameras: &[CameraParams],
    ) -> Result<Var> {
        if grid.dims != self.cfg.dims {
            return Err(SpaError::invalid(format!(
                "grid {:?} differs from the configured {:?}",
                grid.dims, self.cfg.dims
            )));
        }
        let centers = grid.centers();
        let refs: Vec<Projection> = cameras.iter().map(|c| project_points(&centers, c)).collect();
        let att = self.deformable_attention(t, s, maps, &refs)?;
        let [x, y, z] = grid.dims;
        let vol = t.reshape(t.permute(att, &[1, 0])?, &[self.cfg.channels, x, y, z])?;
        self.conv3d_refine(t, s, vol)
    }
}
