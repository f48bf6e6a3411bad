//! Render reconstruction terms and SDF regularisers.

use serde::{Deserialize, Serialize};
use spa_diff::{Scalar, Tape, Tensor, Var};

use crate::error::{Result, SpaError};
use crate::renderer::RenderOutput;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub semantic: f64,
    pub eikonal: f64,
    pub sdf: f64,
    pub free: f64,
    /// Samples with `D - z <= near_threshold` count as near-surface.
    pub near_threshold: f64,
    /// Decay of the negative-SDF penalty in free space.
    pub free_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 10.0,
            depth: 1.0,
            semantic: 1.0,
            eikonal: 0.01,
            sdf: 10.0,
            free: 1.0,
            near_threshold: 0.05,
            free_alpha: 5.0,
        }
    }
}

/// Which terms are evaluated. A disabled term is exactly zero and adds
/// nothing to the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub color: bool,
    pub depth: bool,
    pub semantic: bool,
    pub eikonal: bool,
    pub sdf: bool,
    pub free: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            color: true,
            depth: true,
            semantic: true,
            eikonal: true,
            sdf: true,
            free: true,
        }
    }
}

/// Ground truth for `K` sampled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionBatch {
    /// `K * 3`
    pub color: Vec<f32>,
    /// `K`, 0 marks an invalid depth.
    pub depth: Vec<f32>,
    /// `K * C_s`
    pub semantic: Vec<f32>,
}

impl SupervisionBatch {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }
}

/// Unweighted value of each term; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub color: f64,
    pub depth: f64,
    pub semantic: f64,
    pub eikonal: f64,
    pub sdf_near: f64,
    pub free: f64,
    pub total: f64,
    pub no_valid_depth: bool,
}

impl LossBreakdown {
    /// Weighted reconstruction loss over color, depth and semantics.
    pub fn render(&self, w: &LossWeights) -> f64 {
        w.color * self.color + w.depth * self.depth + w.semantic * self.semantic
    }
}

/// Render loss plus the weighted regularisers.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> f64 {
    b.render(w) + w.eikonal * b.eikonal + w.sdf * b.sdf_near + w.free * b.free
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleClass {
    NearSurface,
    FreeSpace,
    /// The ray has no valid depth.
    Unsupervised,
}

/// Per-sample class from `b = depth - z`.
pub fn classify_samples(t: &[f64], depth: f64, threshold: f64) -> Vec<SampleClass> {
    t.iter()
        .map(|&z| {
            if !(depth > 0.0) {
                SampleClass::Unsupervised
            } else if depth - z <= threshold {
                SampleClass::NearSurface
            } else {
                SampleClass::FreeSpace
            }
        })
        .collect()
}

/// Mean `|s - b|` over the selected samples; 0 when none are selected.
pub fn near_surface_sdf_loss<T: Scalar>(t: &Tape<T>, s: Var, b: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    masked_mean(t, t.abs(t.sub(s, t.constant(b.clone()))?)?, mask)
}

/// Mean `max(0, exp(-alpha s) - 1, s - b)` over the selected samples; 0 when
/// none are selected.
pub fn free_space_loss<T: Scalar>(
    t: &Tape<T>,
    s: Var,
    b: &Tensor<T>,
    mask: &[bool],
    alpha: f64,
) -> Result<Var> {
    let neg = t.add_scalar(t.exp(t.scale(s, -alpha)?)?, -1.0)?;
    let over = t.sub(s, t.constant(b.clone()))?;
    masked_mean(t, t.relu(t.maximum(neg, over)?)?, mask)
}

/// Mean `(|grad s| - 1)^2` over all samples; `grad` is `[.., 3]`.
pub fn eikonal_loss<T: Scalar>(t: &Tape<T>, grad: Var) -> Result<Var> {
    Ok(t.mean_all(t.square(t.add_scalar(t.l2norm(grad)?, -1.0)?)?)?)
}

fn masked_mean<T: Scalar>(t: &Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(t.constant(Tensor::zeros(vec![1])));
    }
    let shape = t.shape(x);
    let m = Tensor::new(shape, mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
    Ok(t.scale(t.sum_all(t.mul(x, t.constant(m))?)?, 1.0 / count as f64)?)
}

/// Differentiable terms of a batch, each already carrying its weight, plus
/// the scalar breakdown.
pub struct LossTerms {
    pub total: Var,
    /// Weighted contributions in breakdown order: color, depth, semantic,
    /// eikonal, sdf_near, free. `None` for disabled terms.
    pub parts: [Option<Var>; 6],
    pub breakdown: LossBreakdown,
}

pub const TERM_NAMES: [&str; 6] = ["color", "depth", "semantic", "eikonal", "sdf_near", "free"];

/// All loss terms for one rendered batch.
pub fn compute_losses<T: Scalar>(
    t: &Tape<T>,
    out: &RenderOutput,
    batch: &SupervisionBatch,
    w: &LossWeights,
    on: &LossToggles,
) -> Result<LossTerms> {
    let k = batch.len();
    if k == 0 {
        return Err(SpaError::invalid("empty supervision batch"));
    }
    if out.plan.rays != k || batch.color.len() != 3 * k {
        return Err(SpaError::invalid(format!(
            "{} rendered rays for {k} supervised pixels",
            out.plan.rays
        )));
    }
    let cs = t.shape(out.semantic)[1];
    if batch.semantic.len() != k * cs {
        return Err(SpaError::invalid("semantic target width differs from the prediction"));
    }
    let cst = |shape: Vec<usize>, d: &[f32]| -> Result<Var> {
        Ok(t.constant(Tensor::new(shape, d.iter().map(|&x| T::c(x as f64)).collect())?))
    };
    let valid: Vec<bool> = batch.depth.iter().map(|&d| d > 0.0).collect();
    let no_valid_depth = !valid.iter().any(|&v| v);

    let mut raw: [Option<Var>; 6] = [None; 6];
    if on.color {
        let l1 = t.mean_all(t.abs(t.sub(out.color, cst(vec![k, 3], &batch.color)?)?)?)?;
        raw[0] = Some(l1);
    }
    if on.depth {
        let d = t.abs(t.sub(out.depth, cst(vec![k], &batch.depth)?)?)?;
        raw[1] = Some(masked_mean(t, d, &valid)?);
    }
    if on.semantic {
        let l1 = t.mean_all(t.abs(t.sub(out.semantic, cst(vec![k, cs], &batch.semantic)?)?)?)?;
        raw[2] = Some(l1);
    }
    if on.eikonal {
        raw[3] = Some(eikonal_loss(t, out.grad)?);
    }
    if on.sdf || on.free {
        let n = out.plan.samples_per_ray();
        let h = out.plan.hits.len();
        let mut b = Vec::with_capacity(h * n);
        let (mut near, mut free) = (Vec::with_capacity(h * n), Vec::with_capacity(h * n));
        for (r, &ray) in out.plan.hits.iter().enumerate() {
            let d = batch.depth[ray] as f64;
            for (j, c) in classify_samples(&out.plan.t[r], d, w.near_threshold).into_iter().enumerate() {
                b.push(T::c(d - out.plan.t[r][j]));
                near.push(c == SampleClass::NearSurface);
                free.push(c == SampleClass::FreeSpace);
            }
        }
        let b = Tensor::new(vec![h, n], b)?;
        if on.sdf {
            raw[4] = Some(near_surface_sdf_loss(t, out.sdf, &b, &near)?);
        }
        if on.free {
            raw[5] = Some(free_space_loss(t, out.sdf, &b, &free, w.free_alpha)?);
        }
    }

    let weights = [w.color, w.depth, w.semantic, w.eikonal, w.sdf, w.free];
    let mut parts: [Option<Var>; 6] = [None; 6];
    let mut total: Option<Var> = None;
    for i in 0..6 {
        let Some(r) = raw[i] else { continue };
        let p = t.scale(r, weights[i])?;
        parts[i] = Some(p);
        total = Some(match total {
            Some(acc) => t.add(acc, p)?,
            None => p,
        });
    }
    let total = total.unwrap_or_else(|| t.constant(Tensor::zeros(vec![1])));
    let val = |i: usize| raw[i].map_or(0.0, |v| t.item(v).f64());
    let breakdown = LossBreakdown {
        color: val(0),
        depth: val(1),
        semantic: val(2),
        eikonal: val(3),
        sdf_near: val(4),
        free: val(5),
        total: t.item(total).f64(),
        no_valid_depth,
    };
    Ok(LossTerms {
        total,
        parts,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_with_unit_terms() {
        // Color L1 of 0.1 under weight 10 is a render loss of 1.
        let b = LossBreakdown {
            color: 0.1,
            eikonal: 1.0,
            sdf_near: 1.0,
            free: 1.0,
            ..Default::default()
        };
        assert!((total_loss(&b, &LossWeights::default()) - 12.01).abs() < 1e-12);
        let zero = LossWeights {
            color: 0.0,
            depth: 0.0,
            semantic: 0.0,
            eikonal: 0.0,
            sdf: 0.0,
            free: 0.0,
            ..Default::default()
        };
        assert!((b.render(&LossWeights::default()) - 1.0).abs() < 1e-12);
        assert_eq!(total_loss(&b, &zero), 0.0);
    }

    #[test]
    fn classification() {
        use SampleClass::*;
        assert_eq!(classify_samples(&[1.98, 2.0, 1.0], 2.0, 0.05), vec![NearSurface, NearSurface, FreeSpace]);
        assert_eq!(classify_samples(&[1.0], 0.0, 0.05), vec![Unsupervised]);
    }

    #[test]
    fn sdf_terms_by_hand() {
        let t = Tape::<f64>::new();
        let s = t.input(Tensor::new(vec![1], vec![0.03]).unwrap());
        let b = Tensor::new(vec![1], vec![0.02]).unwrap();
        let l = near_surface_sdf_loss(&t, s, &b, &[true]).unwrap();
        assert!((t.item(l) - 0.01).abs() < 1e-12);
        assert_eq!(t.item(near_surface_sdf_loss(&t, s, &b, &[false]).unwrap()), 0.0);

        let s = t.input(Tensor::new(vec![1], vec![0.5]).unwrap());
        let b = Tensor::new(vec![1], vec![-1.0]).unwrap();
        assert!((t.item(free_space_loss(&t, s, &b, &[true], 5.0).unwrap()) - 1.5).abs() < 1e-12);
        let s = t.input(Tensor::new(vec![1], vec![0.4]).unwrap());
        let b = Tensor::new(vec![1], vec![0.4]).unwrap();
        assert_eq!(t.item(free_space_loss(&t, s, &b, &[true], 5.0).unwrap()), 0.0);
    }

    #[test]
    fn eikonal_hand_values() {
        let t = Tape::<f64>::new();
        let g = |v: [f64; 3]| t.constant(Tensor::new(vec![2, 3], [v, v].concat()).unwrap());
        assert_eq!(t.item(eikonal_loss(&t, g([1.0, 0.0, 0.0])).unwrap()), 0.0);
        assert_eq!(t.item(eikonal_loss(&t, g([0.0; 3])).unwrap()), 1.0);
        assert_eq!(t.item(eikonal_loss(&t, g([2.0, 0.0, 0.0])).unwrap()), 1.0);
    }
}
