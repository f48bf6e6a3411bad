use super::{need, Contribs};
use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::{split_axis, Tensor};

/// Visits every 1-D lane along `axis` as (first offset, stride).
fn lanes(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize, mask: Option<&[bool]>) -> Tensor<T> {
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    lanes(x.shape(), axis, |base, stride, len| {
        let keep = |k: usize| mask.map_or(true, |m| m[base + k * stride]);
        let mut mx = T::neg_infinity();
        for k in 0..len {
            if keep(k) {
                mx = mx.max(xd[base + k * stride]);
            }
        }
        if mx == T::neg_infinity() {
            return; // fully masked lane stays zero
        }
        let mut total = T::zero();
        for k in 0..len {
            if keep(k) {
                let e = (xd[base + k * stride] - mx).exp();
                out[base + k * stride] = e;
                total = total + e;
            }
        }
        for k in 0..len {
            out[base + k * stride] = out[base + k * stride] / total;
        }
    });
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

impl<T: Scalar> Tape<T> {
    /// Softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            if axis >= x.ndim() {
                return Err(DiffError::invalid("softmax", format!("axis {axis} out of range")));
            }
            Ok(softmax_forward(x, axis, None))
        })?;
        self.push("softmax", out, Op::Softmax { a, axis })
    }

    /// Softmax along the last axis over entries where `mask` is true.
    /// Masked entries come out exactly zero; a fully masked row is all zero.
    pub fn masked_softmax(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let (out, axis) = self.read(|n| {
            let x = &n[a.0].value;
            if mask.len() != x.numel() {
                return Err(DiffError::invalid(
                    "masked_softmax",
                    format!("mask has {} entries for shape {:?}", mask.len(), x.shape()),
                ));
            }
            let axis = x.ndim() - 1;
            Ok((softmax_forward(x, axis, Some(mask)), axis))
        })?;
        // The Jacobian y_i(δ_ij - y_j) already vanishes on masked entries.
        self.push("masked_softmax", out, Op::Softmax { a, axis })
    }

    /// Zero-mean, unit-variance (biased) standardisation along `axis`.
    pub fn normalize(&self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            if axis >= x.ndim() {
                return Err(DiffError::invalid("normalize", format!("axis {axis} out of range")));
            }
            let xd = x.data();
            let mut out = vec![T::zero(); x.numel()];
            lanes(x.shape(), axis, |base, stride, len| {
                let (mean, inv) = moments(xd, base, stride, len, eps);
                for k in 0..len {
                    out[base + k * stride] = (xd[base + k * stride] - mean) * inv;
                }
            });
            Tensor::new(x.shape().to_vec(), out)
        })?;
        self.push("normalize", out, Op::Normalize { a, axis, eps })
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn l2norm(&self, a: Var) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            let d = *x.shape().last().expect("non-empty shape");
            let data: Vec<T> = x
                .data()
                .chunks(d)
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect();
            let mut shape = x.shape()[..x.ndim() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)
        })?;
        self.push("l2norm", out, Op::L2Norm(a))
    }

    /// `out[..., k] = prod_{j<k} a[..., j]` along the last axis (so `out[..., 0] = 1`).
    pub fn exclusive_cumprod(&self, a: Var) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            let d = *x.shape().last().expect("non-empty shape");
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(d) {
                let mut p = T::one();
                for &v in row {
                    data.push(p);
                    p = p * v;
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        })?;
        self.push("exclusive_cumprod", out, Op::ExclusiveCumprod(a))
    }
}

fn moments<T: Scalar>(xd: &[T], base: usize, stride: usize, len: usize, eps: f64) -> (T, T) {
    let nl = T::c(len as f64);
    let mean = (0..len).map(|k| xd[base + k * stride]).sum::<T>() / nl;
    let var = (0..len)
        .map(|k| {
            let d = xd[base + k * stride] - mean;
            d * d
        })
        .sum::<T>()
        / nl;
    (mean, T::one() / (var + T::c(eps)).sqrt())
}

pub(super) fn softmax_backward<T: Scalar>(
    a: Var,
    axis: usize,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.numel()];
    lanes(y.shape(), axis, |base, stride, len| {
        let dot: T = (0..len)
            .map(|k| yd[base + k * stride] * gd[base + k * stride])
            .sum();
        for k in 0..len {
            let i = base + k * stride;
            out[i] = yd[i] * (gd[i] - dot);
        }
    });
    vec![(a, Tensor::new(y.shape().to_vec(), out).expect("softmax grad"))]
}

pub(super) fn normalize_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    axis: usize,
    eps: f64,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Contribs<T> {
    let x = &nodes[a.0].value;
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    let mut out = vec![T::zero(); x.numel()];
    lanes(x.shape(), axis, |base, stride, len| {
        let (_, inv) = moments(xd, base, stride, len, eps);
        let nl = T::c(len as f64);
        let mut gm = T::zero();
        let mut gy = T::zero();
        for k in 0..len {
            let i = base + k * stride;
            gm = gm + gd[i];
            gy = gy + gd[i] * yd[i];
        }
        gm = gm / nl;
        gy = gy / nl;
        for k in 0..len {
            let i = base + k * stride;
            out[i] = inv * (gd[i] - gm - yd[i] * gy);
        }
    });
    vec![(a, Tensor::new(x.shape().to_vec(), out).expect("normalize grad"))]
}

pub(super) fn l2norm_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    y: &Tensor<T>,
    g: &Tensor<T>,
) -> Contribs<T> {
    let x = &nodes[a.0].value;
    let d = *x.shape().last().expect("shape");
    let mut out = Vec::with_capacity(x.numel());
    for (r, row) in x.data().chunks(d).enumerate() {
        let nrm = y.data()[r];
        for &v in row {
            // subgradient 0 at the origin
            out.push(if nrm > T::zero() {
                g.data()[r] * v / nrm
            } else {
                T::zero()
            });
        }
    }
    vec![(a, Tensor::new(x.shape().to_vec(), out).expect("l2norm grad"))]
}

pub(super) fn cumprod_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    p: &Tensor<T>,
    g: &Tensor<T>,
) -> Contribs<T> {
    if !need(nodes, a) {
        return vec![];
    }
    let x = &nodes[a.0].value;
    let d = *x.shape().last().expect("shape");
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..x.numel() / d {
        let o = r * d;
        // s_j = sum_{k>j} g_k prod_{j<i<k} x_i, computed back to front without division
        let mut s = T::zero();
        for j in (0..d).rev() {
            out[o + j] = p.data()[o + j] * s;
            s = g.data()[o + j] + x.data()[o + j] * s;
        }
    }
    vec![(a, Tensor::new(x.shape().to_vec(), out).expect("cumprod grad"))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_masked_row_is_zero() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let y = t
            .masked_softmax(x, &[true, false, true, false, false, false])
            .unwrap();
        let v = t.value(y);
        assert_eq!(&v.data()[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(v.data()[1], 0.0);
        assert!((v.data()[0] + v.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cumprod_values() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::new(vec![4], vec![2.0, 3.0, 0.5, 7.0]).unwrap());
        let y = t.exclusive_cumprod(x).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 6.0, 3.0]);
    }

    #[test]
    fn l2norm_at_zero_has_zero_gradient() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::zeros(vec![1, 3]));
        let n = t.l2norm(x).unwrap();
        let s = t.sum_all(n).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_moments() {
        let t = Tape::<f64>::new();
        let x = t.input(Tensor::from_fn(vec![3, 5], |i| (i * i) as f64));
        let y = t.value(t.normalize(x, 1, 0.0).unwrap());
        for row in y.data().chunks(5) {
            let m: f64 = row.iter().sum::<f64>() / 5.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }
}
