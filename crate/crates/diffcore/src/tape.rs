//! Wengert-list recorder: every primitive call appends one node holding its
//! forward value; [`Tape::backward`] replays the list in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::ops;
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Neg,
    Exp,
    Sigmoid,
    LogSigmoid,
    Relu,
    Gelu,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Param,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine { a: Var, scale: f64 },
    SumAxis { a: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, idx: Arc<[usize]> },
    ScatterRows { a: Var, idx: Arc<[usize]> },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    Conv3d { x: Var, w: Var, b: Var },
    PixelShuffle { a: Var, r: usize },
    Softmax { a: Var, axis: usize },
    Normalize { a: Var, axis: usize, eps: f64 },
    L2Norm(Var),
    ExclusiveCumprod(Var),
    Bilinear { maps: Var, coords: Var, views: Arc<[usize]> },
    Trilinear { grid: Var, points: Arc<[[f64; 3]]> },
    TrilinearGrad { grid: Var, points: Arc<[[f64; 3]]> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Affine { a, .. }
            | Op::SumAxis { a, .. }
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::IndexSelect { a, .. }
            | Op::ScatterRows { a, .. }
            | Op::PixelShuffle { a, .. }
            | Op::Softmax { a, .. }
            | Op::Normalize { a, .. }
            | Op::L2Norm(a)
            | Op::ExclusiveCumprod(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b } | Op::Conv3d { x, w, b } => vec![*x, *w, *b],
            Op::Bilinear { maps, coords, .. } => vec![*maps, *coords],
            Op::Trilinear { grid, .. } | Op::TrilinearGrad { grid, .. } => vec![*grid],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Records primitive evaluations for one forward pass.
///
/// All methods take `&self`; a tape is single-threaded but `Send`.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf that receives gradients.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter from `store`; repeated binds return the same leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = self.push_leaf(store.value(id).clone(), Op::Param, true);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Copies out the forward value of `v`.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push_leaf(&self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn read<R>(&self, f: impl FnOnce(&[Node<T>]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape().to_vec();
        if nodes[root.0].value.numel() != 1 {
            return Err(DiffError::NonScalarRoot { shape: root_shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_shape));
        let mut leaves = HashMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                leaves.insert(i, g);
                continue;
            }
            for (v, contrib) in ops::backward(&nodes, i, &g) {
                if !nodes[v.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(contrib.shape(), nodes[v.0].value.shape());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.0 <= root.0)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradients of every bound parameter that the root depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        let mut ps = self.params.clone();
        ps.sort();
        ps.into_iter()
            .filter_map(move |(id, v)| self.leaves.get(&v.0).map(|g| (id, g)))
    }
}
