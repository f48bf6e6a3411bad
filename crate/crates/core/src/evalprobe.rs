//! Frozen-encoder probes: relative camera pose regression from a pair of
//! class tokens, and joint-PCA visualisation of multi-view feature maps.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Rotation3, SymmetricEigen, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use spa_diff::{ParamStore, Tape, Tensor, Var};

use crate::encoder::{image_tensor, Masking};
use crate::error::{Result, SpaError};
use crate::model::SpaModel;
use crate::nn::{param, Init, Linear};
use crate::optim::{adamw_step, onecycle_lr, AdamW, OptimState};
use crate::rng::{self, mix};
use crate::scenes::{CameraParams, Dataset, MultiViewSample};

/// Pose of camera B expressed in camera A's frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub translation: [f64; 3],
    /// `(w, x, y, z)` with `w >= 0`.
    pub rotation: [f64; 4],
}

impl RelativePose {
    pub fn to_vec7(&self) -> [f64; 7] {
        let (t, q) = (self.translation, self.rotation);
        [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    }
}

/// `x_A = R_A R_B^T x_B + (t_A - R_A R_B^T t_B)` for world-to-camera
/// extrinsics `(R, t)`.
pub fn relative_pose(a: &CameraParams, b: &CameraParams) -> RelativePose {
    let r = a.rotation * b.rotation.transpose();
    let t = a.translation - r * b.translation;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let mut q = [q.w, q.i, q.j, q.k];
    if q[0] < 0.0 {
        q = q.map(|x| -x);
    }
    RelativePose {
        translation: [t.x, t.y, t.z],
        rotation: q,
    }
}

fn unit(q: &[f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(SpaError::invalid(format!("quaternion {q:?} has no direction")));
    }
    Ok(q.map(|x| x / n))
}

/// `2 acos(|q1 . q2|)` between the normalised quaternions.
pub fn quat_geodesic(q1: &[f64; 4], q2: &[f64; 4]) -> Result<f64> {
    let (a, b) = (unit(q1)?, unit(q2)?);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(2.0 * dot.abs().clamp(-1.0, 1.0).acos())
}

pub fn translation_error(t1: &[f64; 3], t2: &[f64; 3]) -> f64 {
    t1.iter().zip(t2).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Start the output weights and bias at zero, so an untrained probe
    /// predicts the zero vector.
    pub zero_output: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: vec![512, 256, 128],
            epochs: 100,
            lr: 1e-3,
            pct_start: 0.1,
            div: 25.0,
            final_div: 1e4,
            batch_size: 16,
            weight_decay: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            zero_output: true,
        }
    }
}

pub const POSE_DIM: usize = 7;

/// Batch normalisation over the concatenated class tokens, then an MLP
/// with ReLU between layers.
#[derive(Clone, Debug)]
pub struct PoseProbe {
    pub cfg: ProbeConfig,
    pub store: ParamStore<f64>,
    pub gamma: spa_diff::ParamId,
    pub beta: spa_diff::ParamId,
    pub layers: Vec<Linear>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl PoseProbe {
    pub fn new(input_dim: usize, cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(SpaError::invalid("probe input must be non-empty"));
        }
        let mut r = rng::stream(seed, 0);
        let mut store = ParamStore::new();
        let gamma = param(&mut store, "probe.bn.gamma", vec![input_dim], Init::Const(1.0), &mut r)?;
        let beta = param(&mut store, "probe.bn.beta", vec![input_dim], Init::Zeros, &mut r)?;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(POSE_DIM);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (a, b) = (dims[i], dims[i + 1]);
            let last = i == dims.len() - 2;
            let init = if last && cfg.zero_output { Init::Zeros } else { Init::glorot(a, b) };
            layers.push(Linear::new(&mut store, &format!("probe.fc{i}"), a, b, init, &mut r)?);
        }
        Ok(PoseProbe {
            cfg: cfg.clone(),
            store,
            gamma,
            beta,
            layers,
            running_mean: vec![0.0; input_dim],
            running_var: vec![1.0; input_dim],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalised activations `[B, F]`. Training mode uses batch statistics
    /// and returns them; evaluation uses the running estimates.
    pub fn batch_norm(&self, t: &Tape<f64>, x: Var, train: bool) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = t.shape(x);
        let (b, f) = (shape[0], shape[1]);
        if f != self.input_dim() {
            return Err(SpaError::invalid(format!("probe expects {} features, got {f}", self.input_dim())));
        }
        let (n, stats) = if train {
            if b < 2 {
                return Err(SpaError::invalid("batch normalisation needs at least two samples in training"));
            }
            let v = t.value(x);
            let d = v.data();
            let mean: Vec<f64> = (0..f).map(|j| (0..b).map(|i| d[i * f + j]).sum::<f64>() / b as f64).collect();
            let var: Vec<f64> = (0..f)
                .map(|j| (0..b).map(|i| (d[i * f + j] - mean[j]).powi(2)).sum::<f64>() / (b - 1) as f64)
                .collect();
            (t.normalize(x, 0, self.cfg.bn_eps)?, Some((mean, var)))
        } else {
            let m = t.constant(Tensor::new(vec![f], self.running_mean.clone())?);
            let inv = Tensor::new(
                vec![f],
                self.running_var.iter().map(|v| 1.0 / (v + self.cfg.bn_eps).sqrt()).collect(),
            )?;
            (t.mul(t.sub(x, m)?, t.constant(inv))?, None)
        };
        let n = t.mul(n, t.param(&self.store, self.gamma))?;
        Ok((t.add(n, t.param(&self.store, self.beta))?, stats))
    }

    pub fn forward(&self, t: &Tape<f64>, x: Var, train: bool) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (mut h, stats) = self.batch_norm(t, x, train)?;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, &self.store, h)?;
            if i + 1 < self.layers.len() {
                h = t.relu(h)?;
            }
        }
        Ok((h, stats))
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.cfg.bn_momentum;
        for (r, x) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * x;
        }
        for (r, x) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * x;
        }
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<[f64; POSE_DIM]>> {
        if features.is_empty() {
            return Ok(vec![]);
        }
        let t = Tape::new();
        let x = t.constant(stack(features)?);
        let (y, _) = self.forward(&t, x, false)?;
        Ok(t.value(y).data().chunks(POSE_DIM).map(|c| c.try_into().unwrap()).collect())
    }
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(SpaError::invalid("probe feature rows differ in length"));
    }
    Ok(Tensor::new(vec![rows.len(), f], rows.concat())?)
}

/// One probe example: concatenated class tokens of A and B and the target.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseExample {
    pub scene: String,
    pub features: Vec<f64>,
    pub target: RelativePose,
}

/// Trains on `train` with MSE on the 7-vector; returns the per-epoch mean
/// loss. The output bias starts at the mean training target, mini-batches
/// are shuffled from `seed` and the remainder joins the last batch.
pub fn train_probe(probe: &mut PoseProbe, train: &[PoseExample], seed: u64) -> Result<Vec<f64>> {
    if train.len() < 2 {
        return Err(SpaError::invalid("pose probe needs at least two training pairs"));
    }
    let cfg = probe.cfg.clone();
    let bs = cfg.batch_size.max(2);
    let per_epoch = (train.len() / bs).max(1);
    let total = cfg.epochs * per_epoch;
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut mean = [0.0; POSE_DIM];
    for e in train {
        for (m, y) in mean.iter_mut().zip(e.target.to_vec7()) {
            *m += y / train.len() as f64;
        }
    }
    let out_bias = probe.layers.last().expect("probe has an output layer").b;
    probe.store.get_mut(out_bias).value = Tensor::new(vec![POSE_DIM], mean.to_vec())?;
    let mut state = OptimState::new(&probe.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(mix(seed, 0xb0a7), epoch as u64));
        let mut sum = 0.0;
        for b in 0..per_epoch {
            let end = if b + 1 == per_epoch { train.len() } else { (b + 1) * bs };
            let idx = &order[b * bs..end];
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| train[i].features.clone()).collect();
            let y: Vec<f64> = idx.iter().flat_map(|&i| train[i].target.to_vec7()).collect();
            let t = Tape::new();
            let xv = t.constant(stack(&x)?);
            let (pred, stats) = probe.forward(&t, xv, true)?;
            let diff = t.sub(pred, t.constant(Tensor::new(vec![idx.len(), POSE_DIM], y)?))?;
            let loss = t.mean_all(t.square(diff)?)?;
            sum += t.item(loss);
            let g = t.backward(loss)?;
            probe.store.zero_grad();
            probe.store.accumulate(&g);
            let lr = onecycle_lr(step, total, cfg.lr, cfg.pct_start, cfg.div, cfg.final_div);
            adamw_step(&mut probe.store, &mut state, &opt, lr)?;
            if let Some((m, v)) = stats {
                probe.update_running(&m, &v);
            }
            step += 1;
        }
        history.push(sum / per_epoch as f64);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub mean_trans: f64,
    /// Over predictions whose quaternion could be normalised.
    pub mean_rot: f64,
    pub trans: Vec<f64>,
    pub rot: Vec<f64>,
    /// Predictions with a zero quaternion.
    pub invalid: usize,
    pub n: usize,
}

pub fn evaluate_probe(probe: &PoseProbe, test: &[PoseExample]) -> Result<PoseErrors> {
    if test.is_empty() {
        return Err(SpaError::invalid("empty pose test split"));
    }
    let feats: Vec<Vec<f64>> = test.iter().map(|e| e.features.clone()).collect();
    let preds = probe.predict(&feats)?;
    let (mut trans, mut rot, mut invalid) = (Vec::new(), Vec::new(), 0);
    for (p, e) in preds.iter().zip(test) {
        trans.push(translation_error(&[p[0], p[1], p[2]], &e.target.translation));
        match quat_geodesic(&[p[3], p[4], p[5], p[6]], &e.target.rotation) {
            Ok(th) => rot.push(th),
            Err(_) => invalid += 1,
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(PoseErrors {
        mean_trans: mean(&trans),
        mean_rot: mean(&rot),
        trans,
        rot,
        invalid,
        n: test.len(),
    })
}

/// `n` view pairs `(scene, a, b)` with `a != b`, spread round-robin over
/// the scenes.
pub fn pose_pairs(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    if ds.samples.iter().any(|s| s.views.len() < 2) {
        return Err(SpaError::invalid("every pose scene needs at least two views"));
    }
    let mut r = rng::stream(seed, 0x9a1e);
    Ok((0..n)
        .map(|i| {
            let s = i % ds.samples.len();
            let v = ds.samples[s].views.len();
            let a = r.gen_range(0..v);
            let b = (a + r.gen_range(1..v)) % v;
            (s, a, b)
        })
        .collect())
}

/// Class token of one view from a frozen encoder, every patch visible.
pub fn cls_token(model: &SpaModel, store: &ParamStore<f32>, rgb: &[f32]) -> Result<Vec<f64>> {
    let sz = model.cfg.encoder.image_size;
    let t = Tape::<f32>::new();
    let img = image_tensor::<f32>(rgb, sz, sz)?;
    let out = model.encoder.encode_view(&t, store, &img, Masking::Off)?;
    Ok(t.value(out.cls).to_f64_vec())
}

/// Probe examples for `pairs`, extracting each distinct view once.
pub fn pose_examples(
    ds: &Dataset,
    pairs: &[(usize, usize, usize)],
    model: &SpaModel,
    store: &ParamStore<f32>,
) -> Result<Vec<PoseExample>> {
    let needed: BTreeSet<(usize, usize)> = pairs.iter().flat_map(|&(s, a, b)| [(s, a), (s, b)]).collect();
    let mut cache = std::collections::BTreeMap::new();
    for (s, v) in needed {
        cache.insert((s, v), cls_token(model, store, &ds.samples[s].views[v].render.rgb)?);
    }
    Ok(pairs
        .iter()
        .map(|&(s, a, b)| {
            let sample = &ds.samples[s];
            PoseExample {
                scene: sample.scene_id.clone(),
                features: [cache[&(s, a)].clone(), cache[&(s, b)].clone()].concat(),
                target: relative_pose(&sample.views[a].camera, &sample.views[b].camera),
            }
        })
        .collect())
}

/// Splits by scene id: a seeded shuffle of the distinct ids, the first
/// `train_frac` of them for training.
pub fn split_by_scene(examples: &[PoseExample], train_frac: f64, seed: u64) -> (Vec<PoseExample>, Vec<PoseExample>) {
    let mut ids: Vec<&str> = examples.iter().map(|e| e.scene.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut rng::stream(seed, 0x5b17));
    let k = ((ids.len() as f64 * train_frac).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let train: BTreeSet<&str> = ids[..k].iter().copied().collect();
    examples.iter().cloned().partition(|e| train.contains(e.scene.as_str()))
}

/// Pairs, features, the 80/20 scene split, training and held-out errors.
pub fn run_pose_probe(
    ds: &Dataset,
    n_pairs: usize,
    model: &SpaModel,
    store: &ParamStore<f32>,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<PoseErrors> {
    let pairs = pose_pairs(ds, n_pairs, seed)?;
    let examples = pose_examples(ds, &pairs, model, store)?;
    let (train, test) = split_by_scene(&examples, 0.8, seed);
    let mut probe = PoseProbe::new(train[0].features.len(), cfg, seed)?;
    train_probe(&mut probe, &train, seed)?;
    evaluate_probe(&probe, &test)
}

/// Principal axes of row-major `data: [n, d]`, largest variance first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit rows of length `d`.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

pub fn pca(data: &[f64], n: usize, d: usize, k: usize) -> Result<Pca> {
    if n < k || k == 0 || k > d || data.len() != n * d {
        return Err(SpaError::invalid(format!("PCA of {n} points in {d} dims to {k} components")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i * d + j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components = order[..k]
        .iter()
        .map(|&c| {
            let v = eig.eigenvectors.column(c);
            // fix the sign so the largest-magnitude entry is positive
            let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            let s = if big < 0.0 { -1.0 } else { 1.0 };
            v.iter().map(|x| s * x).collect()
        })
        .collect();
    Ok(Pca {
        mean,
        variances: order[..k].iter().map(|&c| eig.eigenvalues[c]).collect(),
        components,
    })
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    /// Mean squared distance between rows and their reconstructions.
    pub fn reconstruction_error(&self, data: &[f64], d: usize) -> f64 {
        let n = data.len() / d;
        let mut err = 0.0;
        for row in data.chunks(d) {
            let z = self.project(row);
            for j in 0..d {
                let rec = self.mean[j] + z.iter().zip(&self.components).map(|(zi, c)| zi * c[j]).sum::<f64>();
                err += (row[j] - rec).powi(2);
            }
        }
        err / n as f64
    }
}

/// One RGB image per view, `H * W * 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

/// Joint top-3 PCA of feature maps `[C, H, W]` (one per view), min-max
/// normalised per component across all views.
pub fn pca_images(maps: &[Tensor<f64>]) -> Result<Vec<FeatureImage>> {
    if maps.len() < 2 {
        return Err(SpaError::invalid("feature visualisation needs at least two views"));
    }
    let shape = maps[0].shape().to_vec();
    let &[c, h, w] = shape.as_slice() else {
        return Err(SpaError::invalid(format!("feature map {shape:?} is not [C, H, W]")));
    };
    if maps.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(SpaError::invalid("feature maps differ in shape"));
    }
    let k = 3.min(c);
    let px = h * w;
    let mut data = Vec::with_capacity(maps.len() * px * c);
    for m in maps {
        let d = m.data();
        for p in 0..px {
            data.extend((0..c).map(|ch| d[ch * px + p]));
        }
    }
    let total = maps.len() * px;
    if total < 3 {
        return Err(SpaError::invalid("fewer feature pixels than components"));
    }
    let fit = pca(&data, total, c, k)?;
    let proj: Vec<Vec<f64>> = data.chunks(c).map(|r| fit.project(r)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for z in &proj {
        for i in 0..k {
            lo[i] = lo[i].min(z[i]);
            hi[i] = hi[i].max(z[i]);
        }
    }
    Ok(proj
        .chunks(px)
        .map(|view| FeatureImage {
            width: w,
            height: h,
            rgb: view
                .iter()
                .flat_map(|z| {
                    (0..3).map(move |i| {
                        if i >= k || hi[i] <= lo[i] {
                            0.0
                        } else {
                            ((z[i] - lo[i]) / (hi[i] - lo[i])) as f32
                        }
                    })
                })
                .collect(),
        })
        .collect())
}

/// Feature maps of every view from a frozen encoder, then [`pca_images`].
pub fn feature_pca_map(model: &SpaModel, store: &ParamStore<f32>, sample: &MultiViewSample) -> Result<Vec<FeatureImage>> {
    let sz = model.cfg.encoder.image_size;
    let maps = sample
        .views
        .iter()
        .map(|v| {
            let t = Tape::<f32>::new();
            let img = image_tensor::<f32>(&v.render.rgb, sz, sz)?;
            let f = model.encoder.encode_view(&t, store, &img, Masking::Off)?.features;
            let val = t.value(f);
            let s = val.shape();
            Ok(Tensor::new(vec![s[1], s[2], s[3]], val.to_f64_vec())?)
        })
        .collect::<Result<Vec<_>>>()?;
    pca_images(&maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geodesic_examples() {
        let q = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(quat_geodesic(&q, &q).unwrap(), 0.0);
        let pi = quat_geodesic(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((pi - std::f64::consts::PI).abs() < 1e-12);
        assert!(quat_geodesic(&q, &q.map(|x| -x)).unwrap() < 1e-6);
        assert!(quat_geodesic(&[0.0; 4], &q).is_err());
    }

    #[test]
    fn translation_examples() {
        assert_eq!(translation_error(&[0.0; 3], &[3.0, 4.0, 0.0]), 5.0);
        assert_eq!(translation_error(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn training_batch_of_one_is_rejected() {
        let probe = PoseProbe::new(4, &ProbeConfig::default(), 0).unwrap();
        let t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 4]));
        assert!(probe.forward(&t, x, true).is_err());
        assert!(probe.forward(&t, x, false).is_ok());
    }

    #[test]
    fn probe_outputs_seven_values() {
        let probe = PoseProbe::new(6, &ProbeConfig::default(), 3).unwrap();
        let p = probe.predict(&[vec![0.1; 6], vec![0.4; 6]]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].len(), POSE_DIM);
        assert_eq!(p, probe.predict(&[vec![0.1; 6], vec![0.4; 6]]).unwrap());
    }
}
