//! AdamW with decoupled weight decay, the OneCycle schedule and EMA shadows.

use spa_diff::{ParamStore, Scalar, Tensor};

use crate::error::{Result, SpaError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        OptimState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update from the gradients accumulated in `store`.
/// Non-finite gradients abort before any parameter changes.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(SpaError::invalid("optimizer state does not match the parameters"));
    }
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(SpaError::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(k);
    let bc2 = 1.0 - opt.beta2.powi(k);
    let decay = 1.0 - lr * opt.weight_decay;
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let (theta, g) = (p.value.data_mut(), p.grad.data());
        for j in 0..theta.len() {
            let gj = g[j].f64();
            let mj = opt.beta1 * m[j].f64() + (1.0 - opt.beta1) * gj;
            let vj = opt.beta2 * v[j].f64() + (1.0 - opt.beta2) * gj * gj;
            m[j] = T::c(mj);
            v[j] = T::c(vj);
            let step = lr * (mj / bc1) / ((vj / bc2).sqrt() + opt.eps);
            theta[j] = T::c(theta[j].f64() * decay - step);
        }
    }
    Ok(())
}

/// Scales accumulated gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().f64();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / (norm + 1e-6));
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g = *g * s;
            }
        }
    }
    norm
}

fn cos_anneal(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Cosine warm-up from `max_lr / div` to `max_lr` over the first
/// `pct_start * total` steps, then cosine decay to `max_lr / div / final_div`.
pub fn onecycle_lr(step: usize, total: usize, max_lr: f64, pct_start: f64, div: f64, final_div: f64) -> f64 {
    let initial = max_lr / div;
    let min = initial / final_div;
    let warm = pct_start * total as f64;
    let s = step as f64;
    if s <= warm && warm > 0.0 {
        cos_anneal(initial, max_lr, s / warm)
    } else {
        let span = total as f64 - warm;
        let frac = if span > 0.0 { ((s - warm) / span).clamp(0.0, 1.0) } else { 1.0 };
        cos_anneal(max_lr, min, frac)
    }
}

/// Shadow copy of every parameter, updated as `e = d e + (1 - d) p`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: store.iter().map(|(_, p)| p.value.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = self.decay;
        for (e, (_, p)) in self.shadow.iter_mut().zip(store.iter()) {
            for (x, y) in e.data_mut().iter_mut().zip(p.value.data()) {
                *x = T::c(d * x.f64() + (1.0 - d) * y.f64());
            }
        }
    }

    /// A parameter store holding the shadow values.
    pub fn store(&self, like: &ParamStore<T>) -> ParamStore<T> {
        let mut out = like.clone();
        for (p, e) in out.iter_mut().zip(&self.shadow) {
            p.value = e.clone();
        }
        out
    }
}
