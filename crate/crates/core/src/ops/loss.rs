use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Element, Tensor};

use super::sigmoid_scalar;

/// `max(x, 0) - x t + ln(1 + e^{-|x|})`, the overflow-free form of
/// `-[t ln s(x) + (1 - t) ln(1 - s(x))]`.
pub(crate) fn bce_term<T: Element>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}

pub(crate) fn bce_backward<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    g: &Tensor<T>,
    vl: Var,
    vt: Var,
    wants: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor<T>)> {
    let scale = g.item() / T::from_usize(logits.numel()).unwrap();
    let mut out = Vec::with_capacity(2);
    if wants(vl) {
        let d = logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| (sigmoid_scalar(x) - t) * scale)
            .collect();
        out.push((vl, Tensor::new(logits.shape(), d).unwrap()));
    }
    if wants(vt) {
        out.push((vt, logits.map(|x| -x * scale)));
    }
    out
}

impl<T: Element> Graph<T> {
    /// Mean binary cross-entropy between logits and `{0, 1}` targets.
    pub fn bce_with_logits(&self, logits: Var, targets: Var) -> Result<Var> {
        let value = {
            let (x, t) = (self.value(logits), self.value(targets));
            if x.shape() != t.shape() {
                return Err(TensorError::Shape(format!(
                    "bce logits {:?} and targets {:?} differ",
                    x.shape(),
                    t.shape()
                )));
            }
            if t.data().iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(TensorError::Contract("bce targets must be 0 or 1".into()));
            }
            let total: T = x.data().iter().zip(t.data()).map(|(&a, &b)| bce_term(a, b)).sum();
            Tensor::scalar(total / T::from_usize(x.numel()).unwrap())
        };
        Ok(self.push(value, Op::BceWithLogits { logits, targets }))
    }
}
