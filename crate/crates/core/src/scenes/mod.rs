//! Procedural SDF scenes, posed pinhole cameras and a sphere-tracing oracle
//! that produces ground-truth RGB-D and semantic maps.

mod io;

pub use io::{read_dataset, read_f32, read_pgm, read_ppm, write_dataset, write_f32, write_pgm, write_ppm, Dataset, MANIFEST};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};
use crate::rng::mix;

pub type Vec3 = Vector3<f64>;

/// Sphere-tracing step safety factor.
pub const TRACE_SAFETY: f64 = 0.9;
/// Surface tolerance in world units.
pub const TRACE_TOLERANCE: f64 = 1e-4;
pub const TRACE_MAX_STEPS: usize = 256;
/// Bounds are the union of primitive boxes scaled by this factor about their centre.
pub const BOUNDS_PAD: f64 = 0.1;

/// Unit vector towards the single directional light.
pub fn light_direction() -> Vec3 {
    Vec3::new(0.35, 0.8, -0.5).normalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfPrimitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
    pub class_id: u8,
}

impl SdfPrimitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3], class_id: u8) -> Self {
        SdfPrimitive {
            shape: Shape::Sphere { radius },
            center,
            albedo,
            class_id,
        }
    }

    pub fn cuboid(center: [f64; 3], half: [f64; 3], albedo: [f64; 3], class_id: u8) -> Self {
        SdfPrimitive {
            shape: Shape::Box { half },
            center,
            albedo,
            class_id,
        }
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        let q = p - Vec3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::Box { half } => {
                let d = q.abs() - Vec3::from(half);
                let outside = d.map(|v| v.max(0.0)).norm();
                let inside = d.max().min(0.0);
                outside + inside
            }
        }
    }

    pub fn aabb(&self) -> Aabb {
        let c = Vec3::from(self.center);
        let h = match self.shape {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { half } => Vec3::from(half),
        };
        Aabb {
            min: c - h,
            max: c + h,
        }
    }

    fn validate(&self, class_count: usize) -> Result<()> {
        let positive = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half } => half.iter().all(|&h| h > 0.0),
        };
        if !positive {
            return Err(SpaError::invalid("primitive extents must be positive"));
        }
        if self.class_id as usize >= class_count {
            return Err(SpaError::invalid(format!(
                "class id {} outside {class_count} classes",
                self.class_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Aabb {
            min: min.into(),
            max: max.into(),
        };
        if (0..3).any(|a| !(b.min[a] < b.max[a])) {
            return Err(SpaError::invalid(format!("degenerate bounds {min:?}..{max:?}")));
        }
        Ok(b)
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&o.min),
            max: self.max.sup(&o.max),
        }
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] <= o.min[a] && o.max[a] <= self.max[a])
    }

    /// Scales the box about its centre by `1 + pad`.
    pub fn padded(&self, pad: f64) -> Aabb {
        let c = self.center();
        let h = self.extent() * (0.5 * (1.0 + pad));
        Aabb {
            min: c - h,
            max: c + h,
        }
    }

    /// Slab-method intersection of `o + t d`, `t >= 0`; `None` on a miss.
    pub fn clip(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut lo, mut hi) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        let t0 = t0.max(0.0);
        (t0 < t1).then_some((t0, t1))
    }

    pub fn to_arrays(&self) -> ([f64; 3], [f64; 3]) {
        (self.min.into(), self.max.into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<SdfPrimitive>,
    pub bounds: Aabb,
    pub background: [f64; 3],
}

impl SceneSpec {
    /// Builds a scene whose bounds follow the padding rule.
    pub fn new(primitives: Vec<SdfPrimitive>, background: [f64; 3]) -> Result<Self> {
        let first = primitives
            .first()
            .ok_or_else(|| SpaError::invalid("a scene needs at least one primitive"))?;
        let union = primitives
            .iter()
            .skip(1)
            .fold(first.aabb(), |acc, p| acc.union(&p.aabb()));
        Ok(SceneSpec {
            primitives,
            bounds: union.padded(BOUNDS_PAD),
            background,
        })
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        for p in &self.primitives {
            p.validate(class_count)?;
            if !self.bounds.contains(&p.aabb()) {
                return Err(SpaError::invalid("scene bounds do not contain a primitive"));
            }
        }
        Ok(())
    }
}

/// Union SDF: the minimum over primitives.
pub fn scene_sdf(scene: &SceneSpec, p: &Vec3) -> f64 {
    scene
        .primitives
        .iter()
        .map(|q| q.sdf(p))
        .fold(f64::INFINITY, f64::min)
}

/// Class id and albedo of the primitive achieving the minimum SDF; ties go to
/// the lower primitive index.
pub fn nearest_class(scene: &SceneSpec, p: &Vec3) -> (u8, [f64; 3]) {
    let mut best = (f64::INFINITY, 0u8, scene.background);
    for q in &scene.primitives {
        let d = q.sdf(p);
        if d < best.0 {
            best = (d, q.class_id, q.albedo);
        }
    }
    (best.1, best.2)
}

fn sdf_normal(scene: &SceneSpec, p: &Vec3) -> Vec3 {
    let h = 1e-6;
    let mut n = Vec3::zeros();
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = h;
        n[a] = scene_sdf(scene, &(p + e)) - scene_sdf(scene, &(p - e));
    }
    n.normalize()
}

/// Pinhole camera in the x-right, y-down, z-forward convention.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vec3,
}

impl CameraParams {
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-frame point (no validity check).
    pub fn project_camera(&self, pc: &Vec3) -> (f64, f64) {
        (
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// World ray through continuous pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let dc = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.center(), (self.rotation.transpose() * dc).normalize())
    }

    /// Row-major 4x4 world-to-camera matrix.
    #[rustfmt::skip]
    pub fn extrinsics(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_extrinsics(
        m: &[f64; 16],
        [fx, fy, cx, cy]: [f64; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = CameraParams {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vec3::new(m[3], m[7], m[11]),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SpaError::invalid("focal lengths must be positive"));
        }
        let r = &self.rotation;
        let orth = (r * r.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(SpaError::invalid("camera rotation is not a proper rotation"));
        }
        Ok(())
    }

    /// Look-at pose with world up `+y`.
    pub fn look_at(eye: Vec3, target: Vec3, intr: Intrinsics) -> Result<Self> {
        let f = target - eye;
        if f.norm() < 1e-9 {
            return Err(SpaError::invalid("camera placed at its look-at target"));
        }
        let f = f.normalize();
        let right = f.cross(&Vec3::y());
        if right.norm() < 1e-9 {
            return Err(SpaError::invalid("viewing direction parallel to the up axis"));
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let cam = CameraParams {
            fx: intr.focal,
            fy: intr.focal,
            cx: intr.width as f64 / 2.0,
            cy: intr.height as f64 / 2.0,
            width: intr.width,
            height: intr.height,
            translation: -(rotation * eye),
            rotation,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Intrinsics {
    /// Square pixels with the given horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_deg: f64) -> Self {
        Intrinsics {
            width,
            height,
            focal: 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan(),
        }
    }
}

/// Placement of cameras on a sphere around the scene centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub radius: f64,
    /// Mean elevation in radians (positive is above the centre).
    pub elevation: f64,
    pub azimuth_jitter: f64,
    pub elevation_jitter: f64,
    pub fov_deg: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            radius: 3.0,
            elevation: 0.3,
            azimuth_jitter: 0.3,
            elevation_jitter: 0.25,
            fov_deg: 45.0,
        }
    }
}

/// Camera `i` sits at azimuth `2 pi i / n` (plus jitter) and looks at the
/// bounds centre; azimuth 0 and elevation 0 give `centre + (0, 0, -radius)`.
pub fn generate_cameras(
    scene: &SceneSpec,
    n: usize,
    seed: u64,
    rig: &CameraRig,
    width: usize,
    height: usize,
) -> Result<Vec<CameraParams>> {
    if n == 0 {
        return Err(SpaError::invalid("need at least one camera"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = Intrinsics::from_fov(width, height, rig.fov_deg);
    let c = scene.bounds.center();
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n as f64
                + jitter(&mut rng, rig.azimuth_jitter);
            let el = rig.elevation + jitter(&mut rng, rig.elevation_jitter);
            let eye = c + rig.radius
                * Vec3::new(az.sin() * el.cos(), el.sin(), -az.cos() * el.cos());
            CameraParams::look_at(eye, c, intr)
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.gen_range(-amount..amount)
    } else {
        0.0
    }
}

/// Ground truth for one view, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    /// `H * W * 3` in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Distance along the unit ray; 0 marks a miss.
    pub depth: Vec<f32>,
    pub semantic: Vec<u8>,
}

/// Sphere tracing from the bounds entry point along the ray.
pub fn trace(scene: &SceneSpec, o: &Vec3, d: &Vec3) -> Option<f64> {
    let (t0, t1) = scene.bounds.clip(o, d)?;
    let mut t = t0;
    for _ in 0..TRACE_MAX_STEPS {
        let s = scene_sdf(scene, &(o + d * t));
        if s < TRACE_TOLERANCE {
            return Some(t);
        }
        t += TRACE_SAFETY * s;
        if t > t1 {
            return None;
        }
    }
    None
}

pub fn raymarch_render(scene: &SceneSpec, cam: &CameraParams) -> ViewRender {
    let n = cam.width * cam.height;
    let mut out = ViewRender {
        rgb: Vec::with_capacity(3 * n),
        depth: Vec::with_capacity(n),
        semantic: Vec::with_capacity(n),
    };
    let light = light_direction();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let (o, d) = cam.ray(u as f64 + 0.5, v as f64 + 0.5);
            match trace(scene, &o, &d) {
                Some(t) => {
                    let p = o + d * t;
                    let (class, albedo) = nearest_class(scene, &p);
                    let shade = sdf_normal(scene, &p).dot(&light).max(0.0);
                    out.rgb.extend(albedo.iter().map(|&a| (a * shade) as f32));
                    out.depth.push(t as f32);
                    out.semantic.push(class);
                }
                None => {
                    out.rgb.extend(scene.background.iter().map(|&a| a as f32));
                    out.depth.push(0.0);
                    out.semantic.push(0);
                }
            }
        }
    }
    out
}

/// Fixed random unit embeddings standing in for a semantic teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTeacher {
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    /// `classes * dim`, each row unit-norm.
    pub rows: Vec<f32>,
}

impl SemanticTeacher {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.extend(v.iter().map(|x| (x / n) as f32));
        }
        SemanticTeacher {
            seed,
            dim,
            classes,
            rows,
        }
    }

    pub fn row(&self, class: u8) -> Result<&[f32]> {
        let c = class as usize;
        if c >= self.classes {
            return Err(SpaError::invalid(format!(
                "class {c} outside {} teacher classes",
                self.classes
            )));
        }
        Ok(&self.rows[c * self.dim..(c + 1) * self.dim])
    }

    /// Per-pixel embedding, `len(ids) * dim` row-major.
    pub fn embed(&self, ids: &[u8]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &c in ids {
            out.extend_from_slice(self.row(c)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub render: ViewRender,
    pub camera: CameraParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub scene_id: String,
    pub bounds: Aabb,
    pub views: Vec<View>,
    /// Analytic description, when the sample came from the generator.
    pub scene: Option<SceneSpec>,
}

pub const MAX_VIEWS: usize = 8;

impl MultiViewSample {
    pub fn render(scene_id: impl Into<String>, scene: &SceneSpec, cameras: Vec<CameraParams>) -> Result<Self> {
        if cameras.is_empty() || cameras.len() > MAX_VIEWS {
            return Err(SpaError::invalid(format!(
                "{} views per sample, expected 1..={MAX_VIEWS}",
                cameras.len()
            )));
        }
        let views = cameras
            .into_iter()
            .map(|camera| View {
                render: raymarch_render(scene, &camera),
                camera,
            })
            .collect();
        Ok(MultiViewSample {
            scene_id: scene_id.into(),
            bounds: scene.bounds,
            views,
            scene: Some(scene.clone()),
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        let c = &self.views[0].camera;
        (c.height, c.width)
    }
}

/// Knobs for the random scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub classes: usize,
    /// Primitive centres are drawn from `[-spread, spread]^3`.
    pub spread: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            min_primitives: 1,
            max_primitives: 3,
            classes: 8,
            spread: 0.5,
            min_size: 0.25,
            max_size: 0.6,
        }
    }
}

/// Draws a random scene; classes are taken from `1..classes`.
pub fn random_scene(cfg: &SceneGenConfig, seed: u64) -> Result<SceneSpec> {
    if cfg.classes < 2 || cfg.min_primitives == 0 || cfg.min_primitives > cfg.max_primitives {
        return Err(SpaError::invalid("invalid scene generator configuration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_primitives..=cfg.max_primitives);
    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let center = [0; 3].map(|_| rng.gen_range(-cfg.spread..=cfg.spread));
        let albedo = [0; 3].map(|_| rng.gen_range(0.2..1.0));
        let class = rng.gen_range(1..cfg.classes) as u8;
        let prim = if rng.gen_bool(0.5) {
            SdfPrimitive::sphere(center, rng.gen_range(cfg.min_size..cfg.max_size), albedo, class)
        } else {
            let half = [0; 3].map(|_| rng.gen_range(cfg.min_size..cfg.max_size) * 0.8);
            SdfPrimitive::cuboid(center, half, albedo, class)
        };
        prims.push(prim);
    }
    SceneSpec::new(prims, [0.0; 3])
}

/// Everything needed to regenerate a dataset from its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub rig: CameraRig,
    pub scenes: SceneGenConfig,
    pub teacher_dim: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            views: 4,
            width: 64,
            height: 64,
            rig: CameraRig::default(),
            scenes: SceneGenConfig::default(),
            teacher_dim: 16,
        }
    }
}

/// `n` random scenes, scene `i` drawn from `mix(seed, i)`.
pub fn generate_dataset(cfg: &DatasetConfig, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(SpaError::invalid("dataset needs at least one scene"));
    }
    let samples = (0..n)
        .map(|i| {
            let s = mix(seed, i as u64);
            let scene = random_scene(&cfg.scenes, s)?;
            let cams = generate_cameras(&scene, cfg.views, mix(s, 1), &cfg.rig, cfg.width, cfg.height)?;
            MultiViewSample::render(format!("scene{i:04}"), &scene, cams)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        class_count: cfg.scenes.classes,
        teacher_seed: mix(seed, TEACHER_STREAM),
        teacher_dim: cfg.teacher_dim,
    })
}

const TEACHER_STREAM: u64 = 0x7eac;
