//! Volume rendering of decoded SDF / spherical-harmonic / semantic grids.
//!
//! Sample placement (stratified coarse pass plus inverse-CDF importance
//! samples) is computed on plain values and carries no gradient; the final
//! composite over the merged samples runs on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spa_diff::{trilinear_point, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Result, SpaError};
use crate::nn::{param, Conv3d, Init};
use crate::rng;
use crate::scenes::{Aabb, CameraParams, Vec3};
use crate::volume::VolumeGrid;

/// Lower clamp on the entry distance of a clipped ray.
pub const T_NEAR_MIN: f64 = 1e-4;
pub const MAX_SH_DEGREE: usize = 2;

/// Coefficients per color channel for degree `l_max`.
pub fn sh_count(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// SH channels `D = 3 (l_max + 1)^2`.
pub fn sh_channels(l_max: usize) -> usize {
    3 * sh_count(l_max)
}

/// Real spherical harmonics without the Condon-Shortley phase, ordered
/// `l = 0, 1, 2` and `m = -l..=l` within each degree.
pub fn sh_basis(l_max: usize, d: [f64; 3]) -> Result<Vec<f64>> {
    if l_max > MAX_SH_DEGREE {
        return Err(SpaError::invalid(format!(
            "spherical harmonics of degree {l_max} are not supported (max {MAX_SH_DEGREE})"
        )));
    }
    let [x, y, z] = d;
    let mut out = vec![0.282_094_791_773_878_1];
    if l_max >= 1 {
        let c1 = 0.488_602_511_902_919_9;
        out.extend([c1 * y, c1 * z, c1 * x]);
    }
    if l_max >= 2 {
        let (c2, c3, c4) = (1.092_548_430_592_079_2, 0.315_391_565_252_520_0, 0.546_274_215_296_039_6);
        out.extend([
            c2 * x * y,
            c2 * y * z,
            c3 * (2.0 * z * z - x * x - y * y),
            c2 * x * z,
            c4 * (x * x - y * y),
        ]);
    }
    Ok(out)
}

/// Per-channel `sigmoid(sum_m k[c][m] Y_m(d))`; `k` is channel-major.
pub fn sh_color(k: &[f64], l_max: usize, d: [f64; 3]) -> Result<[f64; 3]> {
    let y = sh_basis(l_max, d)?;
    let nb = y.len();
    if k.len() != 3 * nb {
        return Err(SpaError::invalid(format!("{} SH coefficients for degree {l_max}", k.len())));
    }
    Ok([0, 1, 2].map(|c| {
        let z: f64 = (0..nb).map(|m| k[c * nb + m] * y[m]).sum();
        1.0 / (1.0 + (-z).exp())
    }))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Discrete opacity between consecutive SDF samples,
/// `max((sig(s a) - sig(s b)) / sig(s a), 0)`.
pub fn alpha_from_sdf(a: f64, b: f64, s: f64) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-s * x).exp());
    ((sig(a) - sig(b)) / sig(a)).max(0.0)
}

/// Opacities along a ray in the log domain (the same quantity as
/// [`alpha_from_sdf`]); the last sample repeats its own SDF, giving zero.
pub fn alphas(sdf: &[f64], s: f64) -> Vec<f64> {
    let n = sdf.len();
    (0..n)
        .map(|j| {
            let next = sdf[(j + 1).min(n - 1)];
            let d = log_sigmoid(s * next) - log_sigmoid(s * sdf[j]);
            1.0 - d.min(0.0).exp()
        })
        .collect()
}

/// Transmittance `T_j = prod_{k<j} (1 - alpha_k)` and weights `T_j alpha_j`.
pub fn composite_weights(alpha: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut trans = Vec::with_capacity(alpha.len());
    let mut w = Vec::with_capacity(alpha.len());
    let mut acc = 1.0;
    for &a in alpha {
        trans.push(acc);
        w.push(acc * a);
        acc *= 1.0 - a;
    }
    (trans, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Ray through the center of pixel `(u, v)`; bounds are left unset.
pub fn ray_from_pixel(cam: &CameraParams, u: usize, v: usize) -> Ray {
    let (origin, dir) = cam.ray(u as f64 + 0.5, v as f64 + 0.5);
    Ray {
        origin,
        dir,
        t_near: 0.0,
        t_far: 0.0,
    }
}

/// Clips `ray` to `bounds`; `None` when it misses.
pub fn aabb_clip(ray: &Ray, bounds: &Aabb) -> Option<Ray> {
    let (t0, t1) = bounds.clip(&ray.origin, &ray.dir)?;
    let t0 = t0.max(T_NEAR_MIN);
    (t0 < t1).then(|| Ray {
        t_near: t0,
        t_far: t1,
        ..ray.clone()
    })
}

/// One uniform draw per equal-width bin of `[t_near, t_far]`.
pub fn stratified_samples(t_near: f64, t_far: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dt = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| t_near + (i as f64 + rng.gen::<f64>()) * dt)
        .collect()
}

/// Inverse-CDF draws from the piecewise-constant density over the `n`
/// equal-width bins of `[t_near, t_far]` with masses proportional to `w`.
/// All-zero weights fall back to the uniform density.
pub fn importance_samples(
    t_near: f64,
    t_far: f64,
    w: &[f64],
    n_fine: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = w.len();
    let dt = (t_far - t_near) / n as f64;
    let total: f64 = w.iter().map(|x| x.max(0.0)).sum();
    let uniform = !(total > 0.0);
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    for &x in w {
        let p = if uniform { 1.0 / n as f64 } else { x.max(0.0) / total };
        cdf.push(cdf.last().unwrap() + p);
    }
    (0..n_fine)
        .map(|_| {
            let u = rng.gen::<f64>() * cdf[n];
            // First bin whose upper CDF edge exceeds u, skipping empty bins.
            let mut i = cdf.partition_point(|&c| c <= u).clamp(1, n) - 1;
            while cdf[i + 1] <= cdf[i] && i + 1 < n {
                i += 1;
            }
            let span = cdf[i + 1] - cdf[i];
            let f = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
            t_near + (i as f64 + f) * dt
        })
        .collect()
}

/// Merged, sorted sample set.
pub fn merge_samples(coarse: &[f64], fine: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = coarse.iter().chain(fine).copied().collect();
    t.sort_by(f64::total_cmp);
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
}

/// Decoded per-voxel fields as one channel-last grid `[X, Y, Z, 1 + D + C_s]`
/// (SDF, SH coefficients, semantics), plus the sharpness `log s`.
pub struct RenderFields {
    pub grid: VolumeGrid,
    pub fields: Var,
    /// SDF channel alone, `[X, Y, Z, 1]`.
    pub sdf: Var,
    pub log_s: Var,
    pub l_max: usize,
    pub semantic_dim: usize,
}

impl RenderFields {
    pub fn new<T: Scalar>(
        t: &Tape<T>,
        grid: &VolumeGrid,
        fields: Var,
        log_s: Var,
        l_max: usize,
        semantic_dim: usize,
    ) -> Result<Self> {
        if l_max > MAX_SH_DEGREE {
            return Err(SpaError::invalid(format!("SH degree {l_max} is not supported")));
        }
        let [x, y, z] = grid.dims;
        let want = [x, y, z, 1 + sh_channels(l_max) + semantic_dim];
        if t.shape(fields) != want {
            return Err(SpaError::invalid(format!(
                "field grid {:?}, expected {want:?}",
                t.shape(fields)
            )));
        }
        Ok(RenderFields {
            grid: grid.clone(),
            sdf: t.slice(fields, 3, 0, 1)?,
            fields,
            log_s,
            l_max,
            semantic_dim,
        })
    }

    pub fn sharpness<T: Scalar>(&self, t: &Tape<T>) -> f64 {
        t.item(self.log_s).f64().exp()
    }

    /// SDF at a world point, from plain values.
    pub fn sdf_at<T: Scalar>(&self, sdf: &Tensor<T>, p: &Vec3) -> f64 {
        trilinear_point(sdf.data(), self.grid.dims, 1, self.grid.to_index(p))[0].f64()
    }
}

/// Shallow 3-D CNN mapping the volume to render fields.
#[derive(Clone, Debug)]
pub struct FieldDecoder {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
    pub log_s: ParamId,
    pub l_max: usize,
    pub semantic_dim: usize,
}

/// Initial sharpness `s`.
pub const INIT_SHARPNESS: f64 = 10.0;

impl FieldDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        hidden: usize,
        l_max: usize,
        semantic_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if l_max > MAX_SH_DEGREE {
            return Err(SpaError::invalid(format!("SH degree {l_max} is not supported")));
        }
        let out = 1 + sh_channels(l_max) + semantic_dim;
        let (f1, f2) = (channels * 27, hidden * 27);
        let conv1 = Conv3d::new(store, "decoder.conv1", channels, hidden, 3, Init::glorot(f1, f2), rng)?;
        let conv2 = Conv3d::new(store, "decoder.conv2", hidden, out, 3, Init::glorot(f2, out * 27), rng)?;
        let log_s = param(
            store,
            "decoder.log_s",
            vec![1],
            Init::Const(INIT_SHARPNESS.ln()),
            rng,
        )?;
        Ok(FieldDecoder {
            conv1,
            conv2,
            log_s,
            l_max,
            semantic_dim,
        })
    }

    /// `V: [C_v, X, Y, Z]` to render fields over `grid`.
    pub fn decode<T: Scalar>(
        &self,
        t: &Tape<T>,
        s: &ParamStore<T>,
        v: Var,
        grid: &VolumeGrid,
    ) -> Result<RenderFields> {
        let h = t.gelu(self.conv1.forward(t, s, v)?)?;
        let o = self.conv2.forward(t, s, h)?;
        let fields = t.permute(o, &[1, 2, 3, 0])?;
        RenderFields::new(t, grid, fields, t.param(s, self.log_s), self.l_max, self.semantic_dim)
    }
}

/// Sample positions for a batch of rays. Rays that miss the bounds have no
/// entry in `hits`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub rays: usize,
    pub hits: Vec<usize>,
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    /// `t` per hit ray, all of the same length.
    pub t: Vec<Vec<f64>>,
}

impl SamplePlan {
    pub fn samples_per_ray(&self) -> usize {
        self.t.first().map_or(0, Vec::len)
    }
}

/// Places coarse and importance samples for each ray from the current field
/// values. Ray `i` draws from stream `i` of `seed`.
pub fn plan_samples<T: Scalar>(
    t: &Tape<T>,
    fields: &RenderFields,
    rays: &[Ray],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<SamplePlan> {
    if sampler.n_coarse == 0 {
        return Err(SpaError::invalid("sampler needs at least one coarse sample"));
    }
    let sdf = t.value(fields.sdf);
    let s = fields.sharpness(t);
    let mut plan = SamplePlan {
        rays: rays.len(),
        hits: vec![],
        origins: vec![],
        dirs: vec![],
        t: vec![],
    };
    for (i, ray) in rays.iter().enumerate() {
        let Some(r) = aabb_clip(ray, &fields.grid.bounds) else {
            continue;
        };
        let mut g = rng::stream(seed, i as u64);
        let coarse = stratified_samples(r.t_near, r.t_far, sampler.n_coarse, &mut g);
        let ts = if sampler.n_fine > 0 {
            let vals: Vec<f64> = coarse
                .iter()
                .map(|&tc| fields.sdf_at(&sdf, &(r.origin + r.dir * tc)))
                .collect();
            let (_, w) = composite_weights(&alphas(&vals, s));
            let fine = importance_samples(r.t_near, r.t_far, &w, sampler.n_fine, &mut g);
            merge_samples(&coarse, &fine)
        } else {
            coarse
        };
        plan.hits.push(i);
        plan.origins.push(r.origin);
        plan.dirs.push(r.dir);
        plan.t.push(ts);
    }
    Ok(plan)
}

/// Differentiable render outputs. Per-sample tensors cover hit rays only,
/// in `plan.hits` order; pixel outputs cover every ray (misses are zero).
pub struct RenderOutput {
    /// `[R, 3]`
    pub color: Var,
    /// `[R]`
    pub depth: Var,
    /// `[R, C_s]`
    pub semantic: Var,
    pub plan: SamplePlan,
    /// `[H, N]` SDF at the samples.
    pub sdf: Var,
    /// `[H, N, 3]` world-space SDF gradient at the samples.
    pub grad: Var,
    /// `[H, N]`
    pub alpha: Var,
    pub trans: Var,
    pub weights: Var,
}

/// Composites the fields along every ray of a fixed sample plan.
pub fn render_with_plan<T: Scalar>(
    t: &Tape<T>,
    fields: &RenderFields,
    plan: SamplePlan,
) -> Result<Option<RenderOutput>> {
    let h = plan.hits.len();
    if h == 0 {
        return Ok(None);
    }
    let n = plan.samples_per_ray();
    if n == 0 || plan.t.iter().any(|ts| ts.len() != n) {
        return Err(SpaError::invalid("sample plan rays differ in sample count"));
    }
    let (nb, cs) = (sh_count(fields.l_max), fields.semantic_dim);
    let g = &fields.grid;
    let mut points = Vec::with_capacity(h * n);
    let mut basis = Vec::with_capacity(h * nb);
    for (r, ts) in plan.t.iter().enumerate() {
        let (o, d) = (plan.origins[r], plan.dirs[r]);
        for &tj in ts {
            points.push(g.to_index(&(o + d * tj)));
        }
        basis.extend(sh_basis(fields.l_max, [d.x, d.y, d.z])?.into_iter().map(T::c));
    }
    let tvals = Tensor::from_fn(vec![h, n], |i| T::c(plan.t[i / n][i % n]));

    let sampled = t.trilinear_sample(fields.fields, &points)?; // [P, 1 + 3 nb + cs]
    let sdf = t.reshape(t.slice(sampled, 1, 0, 1)?, &[h, n])?;
    let sh = t.reshape(t.slice(sampled, 1, 1, 1 + 3 * nb)?, &[h, n, 3, nb])?;
    let sem = t.reshape(t.slice(sampled, 1, 1 + 3 * nb, 1 + 3 * nb + cs)?, &[h, n, cs])?;

    let s = t.exp(fields.log_s)?;
    let ls = t.log_sigmoid(t.mul(sdf, s)?)?;
    let next = if n > 1 {
        t.concat(&[t.slice(ls, 1, 1, n)?, t.slice(ls, 1, n - 1, n)?], 1)?
    } else {
        ls
    };
    let alpha = t.affine(t.exp(t.neg(t.relu(t.sub(ls, next)?)?)?)?, -1.0, 1.0)?;
    let trans = t.exclusive_cumprod(t.affine(alpha, -1.0, 1.0)?)?;
    let weights = t.mul(trans, alpha)?;

    let y = t.constant(Tensor::new(vec![h, 1, 1, nb], basis)?);
    let rgb = t.sigmoid(t.sum_axis(t.mul(sh, y)?, 3, false)?)?; // [h, n, 3]
    let w3 = t.reshape(weights, &[h, n, 1])?;
    let color = t.sum_axis(t.mul(w3, rgb)?, 1, false)?;
    let depth = t.sum_axis(t.mul(weights, t.constant(tvals))?, 1, false)?;
    let semantic = t.sum_axis(t.mul(w3, sem)?, 1, false)?;

    let inv = Tensor::from_fn(vec![3], |a| T::c(1.0 / g.voxel[a]));
    let grad = t.trilinear_gradient(fields.sdf, &points)?; // [P, 1, 3] in index units
    let grad = t.reshape(t.mul(grad, t.constant(inv))?, &[h, n, 3])?;

    let (color, depth, semantic) = if h == plan.rays {
        (color, depth, semantic)
    } else {
        let r = plan.rays;
        (
            t.scatter_rows(color, &plan.hits, r)?,
            t.scatter_rows(depth, &plan.hits, r)?,
            t.scatter_rows(semantic, &plan.hits, r)?,
        )
    };
    Ok(Some(RenderOutput {
        color,
        depth,
        semantic,
        plan,
        sdf,
        grad,
        alpha,
        trans,
        weights,
    }))
}

/// Plans samples and renders. `None` when every ray misses the bounds.
pub fn render_rays<T: Scalar>(
    t: &Tape<T>,
    fields: &RenderFields,
    rays: &[Ray],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Option<RenderOutput>> {
    let plan = plan_samples(t, fields, rays, sampler, seed)?;
    render_with_plan(t, fields, plan)
}

/// Plain-value prediction for one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPrediction {
    pub color: [f64; 3],
    pub depth: f64,
    pub semantic: Vec<f64>,
    pub t: Vec<f64>,
    pub alpha: Vec<f64>,
    pub trans: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Renders a single ray; a miss yields a zero prediction with empty weights.
pub fn render_pixel<T: Scalar>(
    t: &Tape<T>,
    fields: &RenderFields,
    ray: &Ray,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PixelPrediction> {
    let Some(out) = render_rays(t, fields, std::slice::from_ref(ray), sampler, seed)? else {
        return Ok(PixelPrediction {
            color: [0.0; 3],
            depth: 0.0,
            semantic: vec![0.0; fields.semantic_dim],
            t: vec![],
            alpha: vec![],
            trans: vec![],
            weights: vec![],
        });
    };
    let v = |x: Var| t.value(x).to_f64_vec();
    let c = v(out.color);
    Ok(PixelPrediction {
        color: [c[0], c[1], c[2]],
        depth: v(out.depth)[0],
        semantic: v(out.semantic),
        t: out.plan.t[0].clone(),
        alpha: v(out.alpha),
        trans: v(out.trans),
        weights: v(out.weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sh_closed_forms() {
        let y = sh_basis(0, [0.0, 0.0, 1.0]).unwrap();
        assert!((y[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
        assert_eq!(sh_basis(1, [0.6, 0.0, 0.8]).unwrap().len(), 4);
        let up = sh_basis(1, [0.0, 0.6, 0.8]).unwrap();
        let down = sh_basis(1, [0.0, 0.6, -0.8]).unwrap();
        assert!((up[2] + down[2]).abs() < 1e-15 && up[2] > 0.0);
        assert!(sh_basis(3, [0.0, 0.0, 1.0]).is_err());
        assert_eq!(sh_color(&[0.0; 12], 1, [1.0, 0.0, 0.0]).unwrap(), [0.5; 3]);
    }

    #[test]
    fn alpha_hand_values() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 10.0), 0.0);
        assert_eq!(alpha_from_sdf(0.1, 0.4, 10.0), 0.0);
        assert!((alpha_from_sdf(1.0, -1.0, 1.0) - 0.632_12).abs() < 1e-5);
        let log = alphas(&[1.0, -1.0], 1.0);
        assert!((log[0] - alpha_from_sdf(1.0, -1.0, 1.0)).abs() < 1e-12);
        assert_eq!(log[1], 0.0);
    }

    #[test]
    fn importance_degenerate_mass() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let t = importance_samples(0.0, 1.0, &[0.0, 0.0, 3.0, 0.0], 50, &mut g);
        assert!(t.iter().all(|&x| (0.5..=0.75).contains(&x)));
        let u = importance_samples(0.0, 1.0, &[0.0; 4], 500, &mut g);
        assert!(u.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(u.iter().any(|&x| x < 0.25) && u.iter().any(|&x| x > 0.75));
    }

    #[test]
    fn stratified_bins() {
        let mut g = ChaCha8Rng::seed_from_u64(0);
        let t = stratified_samples(0.0, 1.0, 4, &mut g);
        for (i, &x) in t.iter().enumerate() {
            assert!(x >= i as f64 / 4.0 && x < (i + 1) as f64 / 4.0);
        }
    }

    #[test]
    fn clip_cases() {
        let b = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
        let r = Ray { origin: Vec3::new(0.0, 0.0, -3.0), dir: Vec3::z(), t_near: 0.0, t_far: 0.0 };
        let c = aabb_clip(&r, &b).unwrap();
        assert_eq!((c.t_near, c.t_far), (2.0, 4.0));
        let par = Ray { origin: Vec3::new(2.0, 0.0, -3.0), ..r.clone() };
        assert!(aabb_clip(&par, &b).is_none());
        let inside = Ray { origin: Vec3::zeros(), ..r };
        assert_eq!(aabb_clip(&inside, &b).unwrap().t_near, T_NEAR_MIN);
    }
}
