//! The closed primitive set. Every differentiable computation in the
//! workspace is a composition of the methods defined in these modules, and
//! each one is covered by a finite-difference check in `tests/primitives.rs`.

mod linalg;
mod nn;
mod pointwise;
mod sampling;
mod structure;

use crate::scalar::Scalar;
use crate::tape::{Node, Op, Var};
use crate::tensor::Tensor;

pub use sampling::{bilinear_point, trilinear_point, GridIndex};

pub(crate) type Contribs<T> = Vec<(Var, Tensor<T>)>;

#[inline]
pub(crate) fn need<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].needs_grad
}

/// Vector-Jacobian products of node `i` given its output gradient.
pub(crate) fn backward<T: Scalar>(nodes: &[Node<T>], i: usize, g: &Tensor<T>) -> Contribs<T> {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf | Op::Param => vec![],
        Op::Binary(kind, a, b) => pointwise::binary_backward(nodes, *kind, *a, *b, g),
        Op::Unary(kind, a) => pointwise::unary_backward(nodes, *kind, *a, &node.value, g),
        Op::Affine { a, scale } => vec![(*a, g.map(|x| x * T::c(*scale)))],
        Op::SumAxis { a, axis } => structure::sum_axis_backward(nodes, *a, *axis, g),
        Op::SumAll(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            vec![(*a, Tensor::full(shape, g.item()))]
        }
        Op::Reshape(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            vec![(*a, g.clone().reshaped(shape).expect("reshape backward"))]
        }
        Op::Permute { a, perm } => structure::permute_backward(*a, perm, g),
        Op::Concat { parts, axis } => structure::concat_backward(nodes, parts, *axis, g),
        Op::Slice { a, axis, start } => structure::slice_backward(nodes, *a, *axis, *start, g),
        Op::IndexSelect { a, idx } => structure::index_select_backward(nodes, *a, idx, g),
        Op::ScatterRows { a, idx } => structure::scatter_rows_backward(nodes, *a, idx, g),
        Op::MatMul(a, b) => linalg::matmul_backward(nodes, *a, *b, g),
        Op::Conv2d { x, w, b } => linalg::conv2d_backward(nodes, *x, *w, *b, g),
        Op::Conv3d { x, w, b } => linalg::conv3d_backward(nodes, *x, *w, *b, g),
        Op::PixelShuffle { a, r } => linalg::pixel_shuffle_backward(nodes, *a, *r, g),
        Op::Softmax { a, axis } => nn::softmax_backward(*a, *axis, &node.value, g),
        Op::Normalize { a, axis, eps } => {
            nn::normalize_backward(nodes, *a, *axis, *eps, &node.value, g)
        }
        Op::L2Norm(a) => nn::l2norm_backward(nodes, *a, &node.value, g),
        Op::ExclusiveCumprod(a) => nn::cumprod_backward(nodes, *a, &node.value, g),
        Op::Bilinear {
            maps,
            coords,
            views,
        } => sampling::bilinear_backward(nodes, *maps, *coords, views, g),
        Op::Trilinear { grid, points } => sampling::trilinear_backward(nodes, *grid, points, g),
        Op::TrilinearGrad { grid, points } => {
            sampling::trilinear_grad_backward(nodes, *grid, points, g)
        }
    }
}
