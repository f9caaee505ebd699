//! 2-D convolution (cross-correlation, via im2col + GEMM) and max pooling.

use crate::error::{Result, TensorError};
use crate::graph::{ConvGeom, Graph, Op, Var};
use crate::tensor::{Element, Tensor};

/// Output extent of a convolution along one axis, if positive.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

fn im2col<T: Element>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        dilation,
        h_out,
        w_out,
        ..
    } = *geom;
    let cols_per_row = h_out * w_out;
    let mut cols = vec![T::zero(); c_in * k * k * cols_per_row];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(c * h + iy as usize) * w..][..w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], geom: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        padding,
        dilation,
        h_out,
        w_out,
        ..
    } = *geom;
    let cols_per_row = h_out * w_out;
    let mut x = vec![T::zero(); c_in * h * w];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_backward<T: Element>(
    weight: &Tensor<T>,
    cols: &[T],
    geom: &ConvGeom,
    g: &Tensor<T>,
    (input, wvar, bias): (Var, Var, Option<Var>),
    wants: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor<T>)> {
    let ckk = geom.c_in * geom.k * geom.k;
    let p = geom.h_out * geom.w_out;
    let co = geom.c_out;
    let mut out = Vec::with_capacity(3);
    if wants(wvar) {
        // dW = dOut * cols^T
        let mut dw = Tensor::zeros(weight.shape());
        T::gemm(
            co,
            p,
            ckk,
            T::one(),
            g.data(),
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::zero(),
            dw.data_mut(),
            ckk as isize,
            1,
        );
        out.push((wvar, dw));
    }
    if let Some(b) = bias.filter(|&b| wants(b)) {
        let db = g.data().chunks(p).map(|row| row.iter().copied().sum()).collect();
        out.push((b, Tensor::new(&[co], db).unwrap()));
    }
    if wants(input) {
        // dCols = W^T * dOut
        let mut dcols = vec![T::zero(); ckk * p];
        T::gemm(
            ckk,
            co,
            p,
            T::one(),
            weight.data(),
            1,
            ckk as isize,
            g.data(),
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        let dx = col2im(&dcols, geom);
        out.push((input, Tensor::new(&[geom.c_in, geom.h, geom.w], dx).unwrap()));
    }
    out
}

pub(crate) fn maxpool_backward<T: Element>(x: &Tensor<T>, argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape());
    let d = dx.data_mut();
    for (&src, &gv) in argmax.iter().zip(g.data()) {
        d[src] += gv;
    }
    dx
}

impl<T: Element> Graph<T> {
    /// Cross-correlation of a `C_in x H x W` input with a `C_out x C_in x k x k`
    /// kernel, zero padding, optional per-output-channel bias.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (value, geom, cols) = {
            let x = self.value(input);
            let wt = self.value(weight);
            let (c_in, h, w) = x.chw()?;
            let &[c_out, wc, k, k2] = wt.shape() else {
                return Err(TensorError::Shape(format!(
                    "conv2d kernel must be C_out x C_in x k x k, got {:?}",
                    wt.shape()
                )));
            };
            if wc != c_in || k != k2 {
                return Err(TensorError::Shape(format!(
                    "conv2d kernel {:?} does not fit input {:?}",
                    wt.shape(),
                    x.shape()
                )));
            }
            if stride == 0 || dilation == 0 {
                return Err(TensorError::Param(format!(
                    "conv2d stride ({stride}) and dilation ({dilation}) must be >= 1"
                )));
            }
            if let Some(b) = bias {
                let bs = self.shape(b);
                if bs != [c_out] {
                    return Err(TensorError::Shape(format!(
                        "conv2d bias shape {bs:?} does not match {c_out} output channels"
                    )));
                }
            }
            let (Some(h_out), Some(w_out)) = (
                conv_output_extent(h, k, stride, padding, dilation),
                conv_output_extent(w, k, stride, padding, dilation),
            ) else {
                return Err(TensorError::Shape(format!(
                    "conv2d output extent is not positive for input {:?}, k={k}, stride={stride}, padding={padding}, dilation={dilation}",
                    x.shape()
                )));
            };
            let geom = ConvGeom {
                c_in,
                h,
                w,
                c_out,
                k,
                stride,
                padding,
                dilation,
                h_out,
                w_out,
            };
            let cols = im2col(x.data(), &geom);
            let p = h_out * w_out;
            let ckk = c_in * k * k;
            let mut out = vec![T::zero(); c_out * p];
            if let Some(b) = bias {
                let bv = self.value(b);
                for (row, &bias) in out.chunks_mut(p).zip(bv.data()) {
                    row.fill(bias);
                }
            }
            T::gemm(
                c_out,
                ckk,
                p,
                T::one(),
                wt.data(),
                ckk as isize,
                1,
                &cols,
                p as isize,
                1,
                T::one(),
                &mut out,
                p as isize,
                1,
            );
            (Tensor::new(&[c_out, h_out, w_out], out)?, geom, cols)
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Non-overlapping `window x window` max pooling. Ties go to the first
    /// element in row-major scan order.
    pub fn maxpool2d(&self, input: Var, window: usize) -> Result<Var> {
        let (value, argmax) = {
            let x = self.value(input);
            let (c, h, w) = x.chw()?;
            if window == 0 || h % window != 0 || w % window != 0 {
                return Err(TensorError::Shape(format!(
                    "maxpool window {window} does not divide extent {h}x{w}"
                )));
            }
            let (ho, wo) = (h / window, w / window);
            let xd = x.data();
            let mut out = Vec::with_capacity(c * ho * wo);
            let mut argmax = Vec::with_capacity(c * ho * wo);
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = (ch * h + oy * window) * w + ox * window;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::new(&[c, ho, wo], out)?, argmax)
        };
        if self.tracking_branches() {
            self.record_branches(argmax.iter().map(|&i| i as u64));
        }
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }
}
