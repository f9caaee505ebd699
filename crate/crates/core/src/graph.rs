//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Nodes are
//! appended in execution order, so the node index order is already a
//! topological order and `backward` is a single reverse sweep.
//!
//! A graph supports exactly one `backward` call; a second call is rejected
//! with [`TensorError::Contract`]. Build a fresh graph per step.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Result, TensorError};
use crate::ops::{self, UpsampleMode};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    Transpose2d(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    BceWithLogits {
        logits: Var,
        targets: Var,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
    branches: Cell<Option<u64>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            branches: Cell::new(None),
        }
    }

    /// A graph that fingerprints every discrete decision taken during the
    /// forward pass (relu signs, pooling winners, rank buckets).
    pub fn with_branch_tracking() -> Self {
        let g = Self::new();
        g.branches.set(Some(0xcbf2_9ce4_8422_2325));
        g
    }

    pub fn branch_digest(&self) -> Option<u64> {
        self.branches.get()
    }

    pub(crate) fn tracking_branches(&self) -> bool {
        self.branches.get().is_some()
    }

    pub(crate) fn record_branches(&self, decisions: impl IntoIterator<Item = u64>) {
        if let Some(mut h) = self.branches.get() {
            for d in decisions {
                h ^= d.wrapping_add(0x9e37_79b9_7f4a_7c15);
                h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
            }
            self.branches.set(Some(h));
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    #[cfg(test)]
    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let inputs = op_inputs(&op);
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if value.has_nan() && inputs.iter().all(|v| nodes[v.0].value.is_finite()) {
            panic!("NaN produced from finite inputs (node {})", nodes.len());
        }
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a single-element root, accumulating `grad` on every
    /// ancestor that requires one.
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(TensorError::Contract(
                "backward already ran on this graph; build a new graph per step".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        self.backward_done.set(true);
        if !nodes[root.0].requires_grad {
            return Ok(());
        }
        let seed_shape = nodes[root.0].value.shape().to_vec();
        nodes[root.0].grad = Some(Tensor::ones(&seed_shape));

        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = nodes[i].grad.take() else {
                continue;
            };
            let contributions = ops::backward(&nodes, i, &upstream);
            nodes[i].grad = Some(upstream);
            for (Var(j), g) in contributions {
                let node = &mut nodes[j];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Reshape(a)
        | Op::Transpose2d(a) => vec![*a],
        Op::Conv2d {
            input, weight, bias, ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::MaxPool { input, .. }
        | Op::Softmax { input, .. }
        | Op::Slice { input, .. }
        | Op::Upsample { input, .. } => vec![*input],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::BceWithLogits { logits, targets } => vec![*logits, *targets],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn diamond_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[0.5, 1.0, 2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.scale(x, -1.25);
        let y = g.add(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.75; 3]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d(x * stop(x))/dx = stop(x)
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn second_backward_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::Contract(_))));
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn tape_is_topological() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let y = g.relu(x);
        let z = g.matmul(y, x).unwrap();
        let nodes = g.nodes();
        for (i, n) in nodes.iter().enumerate() {
            for v in op_inputs(&n.op) {
                assert!(v.0 < i);
            }
        }
        assert_eq!(z.0, 2);
    }
}
