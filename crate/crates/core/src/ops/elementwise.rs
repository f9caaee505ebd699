use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Element, Tensor};

use super::sigmoid_scalar;

/// Right-aligned broadcast of two shapes (size-1 axes stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::Shape(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast `input`.
pub(crate) fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to<T: Element>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(grad.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        dst[o] += g;
    }
    out
}

fn zip_broadcast<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(&shape, data)
}

pub(crate) fn add_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    va: Var,
    vb: Var,
    negate_b: bool,
) -> Vec<(Var, Tensor<T>)> {
    let ga = reduce_to(g, a.shape());
    let mut gb = reduce_to(g, b.shape());
    if negate_b {
        gb = gb.map(|v| -v);
    }
    vec![(va, ga), (vb, gb)]
}

pub(crate) fn mul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    va: Var,
    vb: Var,
    wants: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor<T>)> {
    let shape = g.shape();
    let mut out = Vec::with_capacity(2);
    let expand = |t: &Tensor<T>| -> Tensor<T> {
        if t.shape() == shape {
            t.clone()
        } else {
            let off = broadcast_offsets(shape, t.shape());
            Tensor::new(shape, off.iter().map(|&o| t.data()[o]).collect()).unwrap()
        }
    };
    if wants(va) {
        let bb = expand(b);
        let prod = Tensor::new(shape, g.data().iter().zip(bb.data()).map(|(&x, &y)| x * y).collect()).unwrap();
        out.push((va, reduce_to(&prod, a.shape())));
    }
    if wants(vb) {
        let aa = expand(a);
        let prod = Tensor::new(shape, g.data().iter().zip(aa.data()).map(|(&x, &y)| x * y).collect()).unwrap();
        out.push((vb, reduce_to(&prod, b.shape())));
    }
    out
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub(crate) fn sigmoid_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(g.data())
        .map(|(&s, &gv)| gv * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape(), data).unwrap()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut out = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                let p = base + j * inner;
                dot += yd[p] * gd[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                od[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    out
}

impl<T: Element> Graph<T> {
    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = zip_broadcast(&self.value(a), &self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = zip_broadcast(&self.value(a), &self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = zip_broadcast(&self.value(a), &self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            Tensor::scalar(x.sum() / T::from_usize(x.numel()).unwrap())
        };
        self.push(value, Op::Mean(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.tracking_branches() {
            let x = self.value(a);
            let words = x.data().chunks(64).map(|chunk| {
                chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |w, (i, &v)| w | (u64::from(v > T::zero()) << i))
            });
            self.record_branches(words.collect::<Vec<_>>());
        }
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a))
    }

    /// Softmax normalised along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let x = self.value(a);
            if axis >= x.rank() {
                return Err(TensorError::Shape(format!(
                    "softmax axis {axis} out of range for shape {:?}",
                    x.shape()
                )));
            }
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let mut out = Tensor::zeros(x.shape());
            let xd = x.data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = T::neg_infinity();
                    for j in 0..len {
                        max = max.max(xd[base + j * inner]);
                    }
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (xd[base + j * inner] - max).exp();
                        od[base + j * inner] = e;
                        total += e;
                    }
                    for j in 0..len {
                        od[base + j * inner] = od[base + j * inner] / total;
                    }
                }
            }
            out
        };
        Ok(self.push(value, Op::Softmax { input: a, axis }))
    }
}
