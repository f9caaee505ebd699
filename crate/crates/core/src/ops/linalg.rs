use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Element, Tensor};

fn dims2(t: &Tensor<impl Element>) -> Option<(usize, usize)> {
    match t.shape() {
        &[r, c] => Some((r, c)),
        _ => None,
    }
}

pub(crate) fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    va: Var,
    vb: Var,
    wants: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor<T>)> {
    let (m, k) = dims2(a).unwrap();
    let (_, n) = dims2(b).unwrap();
    let mut out = Vec::with_capacity(2);
    if wants(va) {
        // dA = dC * B^T
        let mut da = Tensor::zeros(&[m, k]);
        let (nn, kk) = (n as isize, k as isize);
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g.data(),
            nn,
            1,
            b.data(),
            1,
            nn,
            T::zero(),
            da.data_mut(),
            kk,
            1,
        );
        out.push((va, da));
    }
    if wants(vb) {
        // dB = A^T * dC
        let mut db = Tensor::zeros(&[k, n]);
        let (nn, kk) = (n as isize, k as isize);
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a.data(),
            1,
            kk,
            g.data(),
            nn,
            1,
            T::zero(),
            db.data_mut(),
            nn,
            1,
        );
        out.push((vb, db));
    }
    out
}

impl<T: Element> Graph<T> {
    /// Matrix product of an `M x K` and a `K x N` tensor.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (Some((m, k)), Some((k2, n))) = (dims2(&ta), dims2(&tb)) else {
                return Err(TensorError::Shape(format!(
                    "matmul needs two matrices, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            };
            if k != k2 {
                return Err(TensorError::Shape(format!(
                    "matmul inner dimensions differ: {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut c = Tensor::zeros(&[m, n]);
            let (kk, nn) = (k as isize, n as isize);
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ta.data(),
                kk,
                1,
                tb.data(),
                nn,
                1,
                T::zero(),
                c.data_mut(),
                nn,
                1,
            );
            c
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }
}
