use crate::error::{Result, TensorError};
use crate::graph::{Graph, Node, Op, Var};
use crate::tensor::{check_shape, Element, Tensor};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(crate) fn transpose_data<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let &[r, c] = t.shape() else {
        unreachable!("transpose of non-matrix")
    };
    let d = t.data();
    Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r])
}

fn slice_data<T: Element>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = t.shape();
    let (outer, inner) = outer_inner(shape, axis);
    let full = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::new(&out_shape, data).unwrap()
}

pub(crate) fn slice_backward<T: Element>(shape: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, inner) = outer_inner(shape, axis);
    let full = shape[axis];
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

pub(crate) fn concat_backward<T: Element>(
    nodes: &[Node<T>],
    inputs: &[Var],
    axis: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let mut start = 0;
    inputs
        .iter()
        .map(|&v| {
            let len = nodes[v.0].value.shape()[axis];
            let piece = slice_data(g, axis, start, len);
            start += len;
            (v, piece)
        })
        .collect()
}

impl<T: Element> Graph<T> {
    /// Reinterprets the element buffer under a new shape (row-major order kept).
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let value = {
            let x = self.value(a);
            if shape.iter().product::<usize>() != x.numel() {
                return Err(TensorError::Shape(format!(
                    "cannot reshape {:?} into {:?}",
                    x.shape(),
                    shape
                )));
            }
            x.reshaped(shape)?
        };
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn transpose2d(&self, a: Var) -> Result<Var> {
        let value = {
            let x = self.value(a);
            if x.rank() != 2 {
                return Err(TensorError::Shape(format!(
                    "transpose2d needs a matrix, got {:?}",
                    x.shape()
                )));
            }
            transpose_data(&x)
        };
        Ok(self.push(value, Op::Transpose2d(a)))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            if inputs.is_empty() {
                return Err(TensorError::Shape("concat of zero tensors".into()));
            }
            let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
            let base = values[0].shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::Shape(format!(
                    "concat axis {axis} out of range for shape {base:?}"
                )));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let agrees =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !agrees {
                    return Err(TensorError::Shape(format!(
                        "concat along axis {axis}: shape {s:?} does not match {base:?}"
                    )));
                }
                total += s[axis];
            }
            let (outer, inner) = outer_inner(&base, axis);
            let mut out_shape = base.clone();
            out_shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(&out_shape, data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let x = self.value(a);
            if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
                return Err(TensorError::Shape(format!(
                    "slice [{start}, {}) on axis {axis} out of range for {:?}",
                    start + len,
                    x.shape()
                )));
            }
            slice_data(&x, axis, start, len)
        };
        Ok(self.push(value, Op::Slice { input: a, axis, start }))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::Shape(format!(
                "split sizes {sizes:?} do not partition axis {axis} of {shape:?}"
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.slice(a, axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// Splits along `axis` into unit-width pieces.
    pub fn unbind(&self, a: Var, axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        let n = *shape
            .get(axis)
            .ok_or_else(|| TensorError::Shape(format!("axis {axis} out of range for {shape:?}")))?;
        self.split(a, axis, &vec![1; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_keeps_order() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = g.reshape(x, &[3, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(g.reshape(x, &[4, 2]).is_err());
    }

    #[test]
    fn transpose_moves_entries() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = g.transpose2d(x).unwrap();
        assert_eq!(g.shape(y), vec![3, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn split_concat_round_trip() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 4, 2], |i| (i as f64).sin()));
        for axis in 0..3 {
            let n = g.shape(x)[axis];
            let parts = g.split(x, axis, &[1, n - 1]).unwrap();
            let y = g.concat(&parts, axis).unwrap();
            assert_eq!(*g.value(y), *g.value(x));
        }
    }

    #[test]
    fn concat_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.concat(&[a, b], 0).is_ok());
        assert!(matches!(g.concat(&[a, b], 1), Err(TensorError::Shape(_))));
    }

    #[test]
    fn concat_gradient_routes_slices() {
        let g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[1, 2]));
        let b = g.param(Tensor::zeros(&[2, 2]));
        let c = g.concat(&[a, b], 0).unwrap();
        let w = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let y = g.mul(c, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }
}
