//! Parameterised layers built from the tape primitives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spa_diff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

impl Init {
    /// Glorot-uniform bound for a layer with the given fan-in and fan-out.
    pub fn glorot(fan_in: usize, fan_out: usize) -> Init {
        Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn tensor<T: Scalar>(self, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(v) => Tensor::full(shape, T::c(v)),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| T::c(d.sample(rng)))
            }
            Init::Uniform(b) => Tensor::from_fn(shape, |_| T::c(rng.gen_range(-b..=b))),
        }
    }
}

/// Registers a parameter initialised from `init`.
pub fn param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: Vec<usize>,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Result<ParamId> {
    Ok(store.register(name, init.tensor(shape, rng))?)
}

/// `y = x W + b` over the last axis; `x` is `[N, in]` or `[B, N, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = param(store, &format!("{name}.weight"), vec![fan_in, fan_out], init, rng)?;
        let b = param(store, &format!("{name}.bias"), vec![fan_out], Init::Zeros, rng)?;
        Ok(Linear {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = t.matmul(x, t.param(s, self.w))?;
        Ok(t.add(y, t.param(s, self.b))?)
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: param(store, &format!("{name}.gamma"), vec![dim], Init::Const(1.0), rng)?,
            beta: param(store, &format!("{name}.beta"), vec![dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let axis = t.shape(x).len() - 1;
        let n = t.normalize(x, axis, LN_EPS)?;
        let n = t.mul(n, t.param(s, self.gamma))?;
        Ok(t.add(n, t.param(s, self.beta))?)
    }
}

/// Same-padded 2-D convolution on `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let init = Init::glorot(cin * k * k, cout * k * k);
        Ok(Conv2d {
            w: param(store, &format!("{name}.weight"), vec![cout, cin, k, k], init, rng)?,
            b: param(store, &format!("{name}.bias"), vec![cout], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(t.conv2d(x, t.param(s, self.w), t.param(s, self.b))?)
    }
}

/// Same-padded 3-D convolution on `[C, X, Y, Z]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Conv3d {
            w: param(store, &format!("{name}.weight"), vec![cout, cin, k, k, k], init, rng)?,
            b: param(store, &format!("{name}.bias"), vec![cout], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(t.conv3d(x, t.param(s, self.w), t.param(s, self.b))?)
    }
}
