use super::{need, Contribs};
use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Binary, Node, Op, Tape, Unary, Var};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor,
};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn apply_binary<T: Scalar>(kind: Binary, x: T, y: T) -> T {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
        Binary::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    }
}

/// Partial derivatives (d/dx, d/dy) of a binary primitive.
fn binary_partials<T: Scalar>(kind: Binary, x: T, y: T) -> (T, T) {
    match kind {
        Binary::Add => (T::one(), T::one()),
        Binary::Sub => (T::one(), -T::one()),
        Binary::Mul => (y, x),
        Binary::Div => (T::one() / y, -x / (y * y)),
        // Ties send the whole gradient to the first argument.
        Binary::Max => {
            if x >= y {
                (T::one(), T::zero())
            } else {
                (T::zero(), T::one())
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow for large |x|.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn apply_unary<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Sigmoid => sigmoid(x),
        Unary::LogSigmoid => log_sigmoid(x),
        Unary::Relu => {
            if x >= T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Unary::Gelu => gelu(x),
        Unary::Tanh => x.tanh(),
        Unary::Abs => x.abs(),
    }
}

fn unary_derivative<T: Scalar>(kind: Unary, x: T, y: T) -> T {
    match kind {
        Unary::Neg => -T::one(),
        Unary::Exp => y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::LogSigmoid => sigmoid(-x),
        // relu = max(x, 0) and |x| = max(x, -x): ties favour the first argument.
        Unary::Relu => {
            if x >= T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Gelu => gelu_grad(x),
        Unary::Tanh => T::one() - y * y,
        Unary::Abs => {
            if x >= T::zero() {
                T::one()
            } else {
                -T::one()
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&self, name: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let out = self.read(|n| {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            if x.shape() == y.shape() {
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| apply_binary(kind, p, q))
                    .collect();
                return Tensor::new(x.shape().to_vec(), data);
            }
            let shape = broadcast_shape(x.shape(), y.shape())
                .ok_or_else(|| DiffError::shapes(name, &[x.shape(), y.shape()]))?;
            let sa = broadcast_strides(x.shape(), &shape);
            let sb = broadcast_strides(y.shape(), &shape);
            let mut data = vec![T::zero(); shape.iter().product()];
            let (xd, yd) = (x.data(), y.data());
            for_each_broadcast(&shape, &sa, &sb, |f, oa, ob| {
                data[f] = apply_binary(kind, xd[oa], yd[ob]);
            });
            Tensor::new(shape, data)
        })?;
        self.push(name, out, Op::Binary(kind, a, b))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Binary::Div, a, b)
    }

    /// Elementwise maximum; at exact ties the gradient goes to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", Binary::Max, a, b)
    }

    fn unary(&self, name: &'static str, kind: Unary, a: Var) -> Result<Var> {
        let out = self.read(|n| n[a.0].value.map(|x| apply_unary(kind, x)));
        self.push(name, out, Op::Unary(kind, a))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", Unary::Neg, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, a)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", Unary::Sigmoid, a)
    }

    /// Numerically stable `ln(sigmoid(a))`.
    pub fn log_sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", Unary::LogSigmoid, a)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", Unary::Relu, a)
    }

    /// GELU, tanh form.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary("gelu", Unary::Gelu, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", Unary::Tanh, a)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary("abs", Unary::Abs, a)
    }

    /// `scale * a + shift` with compile-time constants.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::c(scale), T::c(shift));
        let out = self.read(|n| n[a.0].value.map(|x| s * x + t));
        self.push("affine", out, Op::Affine { a, scale })
    }

    pub fn scale(&self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn add_scalar(&self, a: Var, shift: f64) -> Result<Var> {
        self.affine(a, 1.0, shift)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }
}

pub(super) fn binary_backward<T: Scalar>(
    nodes: &[Node<T>],
    kind: Binary,
    a: Var,
    b: Var,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
    let (need_a, need_b) = (need(nodes, a), need(nodes, b));
    let out_shape = g.shape().to_vec();
    let n = g.numel();
    let mut ga = if need_a { vec![T::zero(); n] } else { vec![] };
    let mut gb = if need_b { vec![T::zero(); n] } else { vec![] };
    let sa = broadcast_strides(x.shape(), &out_shape);
    let sb = broadcast_strides(y.shape(), &out_shape);
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    for_each_broadcast(&out_shape, &sa, &sb, |f, oa, ob| {
        let (dx, dy) = binary_partials(kind, xd[oa], yd[ob]);
        if need_a {
            ga[f] = gd[f] * dx;
        }
        if need_b {
            gb[f] = gd[f] * dy;
        }
    });
    let mut out = Vec::new();
    if need_a {
        let full = Tensor::new(out_shape.clone(), ga).expect("grad shape");
        out.push((a, reduce_to_shape(&full, x.shape())));
    }
    if need_b {
        let full = Tensor::new(out_shape, gb).expect("grad shape");
        out.push((b, reduce_to_shape(&full, y.shape())));
    }
    out
}

pub(super) fn unary_backward<T: Scalar>(
    nodes: &[Node<T>],
    kind: Unary,
    a: Var,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Contribs<T> {
    let x = &nodes[a.0].value;
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xi, &yi), &gi)| gi * unary_derivative(kind, xi, yi))
        .collect();
    vec![(a, Tensor::new(x.shape().to_vec(), data).expect("grad shape"))]
}
