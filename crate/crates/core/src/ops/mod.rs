//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).
//!
//! Each family lives in its own file as an `impl Graph` block plus the
//! matching local backward rules; [`backward`] dispatches on the op tag.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod resample;
mod shape;

pub use resample::{upsample_tensor, UpsampleMode};

use crate::graph::{Node, Op, Var};
use crate::tensor::{Element, Tensor};

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Local backward rule of node `i`: gradient contributions for each input.
pub(crate) fn backward<T: Element>(nodes: &[Node<T>], i: usize, upstream: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => elementwise::add_backward(val(*a), val(*b), upstream, *a, *b, false),
        Op::Sub(a, b) => elementwise::add_backward(val(*a), val(*b), upstream, *a, *b, true),
        Op::Mul(a, b) => elementwise::mul_backward(val(*a), val(*b), upstream, *a, *b, wants),
        Op::Scale(a, c) => vec![(*a, upstream.map(|g| g * *c))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), upstream.item()))],
        Op::Mean(a) => {
            let x = val(*a);
            let n = T::from_usize(x.numel()).unwrap();
            vec![(*a, Tensor::full(x.shape(), upstream.item() / n))]
        }
        Op::MatMul(a, b) => linalg::matmul_backward(val(*a), val(*b), upstream, *a, *b, wants),
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => conv::conv2d_backward(val(*weight), cols, geom, upstream, (*input, *weight, *bias), wants),
        Op::MaxPool { input, argmax } => {
            vec![(*input, conv::maxpool_backward(val(*input), argmax, upstream))]
        }
        Op::Relu(a) => vec![(*a, elementwise::relu_backward(val(*a), upstream))],
        Op::Sigmoid(a) => vec![(*a, elementwise::sigmoid_backward(&node.value, upstream))],
        Op::Softmax { input, axis } => {
            vec![(*input, elementwise::softmax_backward(&node.value, upstream, *axis))]
        }
        Op::Reshape(a) => vec![(*a, upstream.reshaped(val(*a).shape()).unwrap())],
        Op::Transpose2d(a) => vec![(*a, shape::transpose_data(upstream))],
        Op::Concat { inputs, axis } => shape::concat_backward(nodes, inputs, *axis, upstream),
        Op::Slice { input, axis, start } => vec![(
            *input,
            shape::slice_backward(val(*input).shape(), *axis, *start, upstream),
        )],
        Op::Upsample { input, factor, mode } => vec![(
            *input,
            resample::upsample_backward(val(*input).shape(), *factor, *mode, upstream),
        )],
        Op::BceWithLogits { logits, targets } => {
            loss::bce_backward(val(*logits), val(*targets), upstream, *logits, *targets, wants)
        }
    }
}
