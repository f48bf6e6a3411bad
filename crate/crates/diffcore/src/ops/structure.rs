use std::sync::Arc;

use super::{need, Contribs};
use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::{split_axis, strides, Tensor};

fn permute_data<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let s: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let xd = x.data();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (inner_n, inner_s) = (out_shape[last], s[last]);
    let mut produced = 0;
    while produced < n {
        for j in 0..inner_n {
            data.push(xd[off + j * inner_s]);
        }
        produced += inner_n;
        for d in (0..last).rev() {
            idx[d] += 1;
            off += s[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= s[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

impl<T: Scalar> Tape<T> {
    /// Sums over `axis`, removing it unless `keepdim`.
    pub fn sum_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            if axis >= x.ndim() {
                return Err(DiffError::invalid("sum_axis", format!("axis {axis} out of range")));
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut data = vec![T::zero(); outer * inner];
            let xd = x.data();
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    let dst = &mut data[o * inner..(o + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(&xd[base..base + inner]) {
                        *d = *d + v;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
                if shape.is_empty() {
                    shape.push(1);
                }
            }
            Tensor::new(shape, data)
        })?;
        self.push("sum_axis", out, Op::SumAxis { a, axis })
    }

    pub fn mean_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let out = self.read(|n| Tensor::scalar(n[a.0].value.sum()));
        self.push("sum_all", out, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let len = self.read(|n| n[a.0].value.numel());
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.read(|n| n[a.0].value.clone().reshaped(shape.to_vec()))?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            let mut seen = vec![false; x.ndim()];
            if perm.len() != x.ndim()
                || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true))
            {
                return Err(DiffError::invalid("permute", format!("bad permutation {perm:?}")));
            }
            Ok(permute_data(x, perm))
        })?;
        self.push(
            "permute",
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = self.read(|n| {
            let first = &n[parts
                .first()
                .ok_or_else(|| DiffError::invalid("concat", "no inputs"))?
                .0]
                .value;
            let mut shape = first.shape().to_vec();
            if axis >= shape.len() {
                return Err(DiffError::invalid("concat", format!("axis {axis} out of range")));
            }
            let mut total = 0;
            for p in parts {
                let s = n[p.0].value.shape();
                let compatible = s.len() == shape.len()
                    && s.iter()
                        .zip(&shape)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(DiffError::shapes("concat", &[first.shape(), s]));
                }
                total += s[axis];
            }
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &n[p.0].value;
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(shape, data)
        })?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            if axis >= x.ndim() || start >= end || end > x.shape()[axis] {
                return Err(DiffError::invalid(
                    "slice",
                    format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, data)
        })?;
        self.push("slice", out, Op::Slice { a, axis, start })
    }

    /// Gathers rows (axis 0) by index; indices may repeat.
    pub fn index_select(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            let rows = x.shape()[0];
            let row = x.numel() / rows;
            if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
                return Err(DiffError::invalid(
                    "index_select",
                    format!("indices out of range for {rows} rows"),
                ));
            }
            let mut data = Vec::with_capacity(idx.len() * row);
            for &i in idx {
                data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
            let mut shape = x.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(shape, data)
        })?;
        self.push(
            "index_select",
            out,
            Op::IndexSelect {
                a,
                idx: Arc::from(idx),
            },
        )
    }

    /// Adjoint of [`index_select`](Self::index_select): row `k` of `a` is added
    /// into row `idx[k]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            if x.shape()[0] != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(DiffError::invalid(
                    "scatter_rows",
                    format!(
                        "{} source rows, {} indices, {rows} target rows",
                        x.shape()[0],
                        idx.len()
                    ),
                ));
            }
            let row = x.numel() / x.shape()[0];
            let mut data = vec![T::zero(); rows * row];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..row {
                    data[i * row + j] = data[i * row + j] + x.data()[k * row + j];
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            Tensor::new(shape, data)
        })?;
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows {
                a,
                idx: Arc::from(idx),
            },
        )
    }
}

pub(super) fn sum_axis_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    axis: usize,
    g: &Tensor<T>,
) -> Contribs<T> {
    let x = &nodes[a.0].value;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let gd = g.data();
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for _ in 0..len {
            data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    vec![(a, Tensor::new(x.shape().to_vec(), data).expect("sum grad"))]
}

pub(super) fn permute_backward<T: Scalar>(a: Var, perm: &[usize], g: &Tensor<T>) -> Contribs<T> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    vec![(a, permute_data(g, &inv))]
}

pub(super) fn concat_backward<T: Scalar>(
    nodes: &[Node<T>],
    parts: &[Var],
    axis: usize,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (outer, total, inner) = split_axis(g.shape(), axis);
    let mut out = Vec::new();
    let mut offset = 0;
    for &p in parts {
        let shape = nodes[p.0].value.shape().to_vec();
        let len = shape[axis];
        if need(nodes, p) {
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[base..base + len * inner]);
            }
            out.push((p, Tensor::new(shape, data).expect("concat grad")));
        }
        offset += len;
    }
    out
}

pub(super) fn slice_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    axis: usize,
    start: usize,
    g: &Tensor<T>,
) -> Contribs<T> {
    let shape = nodes[a.0].value.shape().to_vec();
    let (outer, len, inner) = split_axis(&shape, axis);
    let width = g.shape()[axis];
    let mut data = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let dst = o * len * inner + start * inner;
        let src = o * width * inner;
        data[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
    }
    vec![(a, Tensor::new(shape, data).expect("slice grad"))]
}

pub(super) fn index_select_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    idx: &[usize],
    g: &Tensor<T>,
) -> Contribs<T> {
    let shape = nodes[a.0].value.shape().to_vec();
    let row = g.numel() / idx.len();
    let mut data = vec![T::zero(); shape.iter().product()];
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..row {
            data[i * row + j] = data[i * row + j] + g.data()[k * row + j];
        }
    }
    vec![(a, Tensor::new(shape, data).expect("gather grad"))]
}

pub(super) fn scatter_rows_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    idx: &[usize],
    g: &Tensor<T>,
) -> Contribs<T> {
    let shape = nodes[a.0].value.shape().to_vec();
    let row = nodes[a.0].value.numel() / idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&g.data()[i * row..(i + 1) * row]);
    }
    vec![(a, Tensor::new(shape, data).expect("scatter grad"))]
}
