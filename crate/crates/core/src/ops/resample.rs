//! Integer-factor upsampling.
//!
//! Bilinear mode uses the align-corners-false convention: output index `o`
//! samples source coordinate `s = (o + 0.5) / factor - 0.5`, clamped to
//! `[0, n - 1]`, interpolating between `floor(s)` and `min(floor(s) + 1, n - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Per-output-index `(lo, hi, weight_of_hi)` for one axis.
fn bilinear_taps<T: Element>(n: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = T::from_usize(factor).unwrap();
    let half = T::from_f64_lossy(0.5);
    let last = n - 1;
    (0..n * factor)
        .map(|o| {
            let s = (T::from_usize(o).unwrap() + half) / f - half;
            let s = s.max(T::zero());
            let lo = s.floor().to_usize().unwrap().min(last);
            let hi = (lo + 1).min(last);
            let t = s - T::from_usize(lo).unwrap();
            (lo, hi, if lo == hi { T::zero() } else { t })
        })
        .collect()
}

fn upsample_data<T: Element>(x: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Tensor<T> {
    let (c, h, w) = x.chw().unwrap();
    let (ho, wo) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); c * ho * wo];
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for oy in 0..ho {
                    let src = &xd[(ch * h + oy / factor) * w..][..w];
                    let dst = &mut out[(ch * ho + oy) * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps::<T>(h, factor);
            let tx = bilinear_taps::<T>(w, factor);
            for ch in 0..c {
                let plane = &xd[ch * h * w..][..h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                        let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                        out[(ch * ho + oy) * wo + ox] = top * (T::one() - ly) + bot * ly;
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out).unwrap()
}

pub(crate) fn upsample_backward<T: Element>(
    shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h * factor, w * factor);
    let gd = g.data();
    let mut dx = Tensor::zeros(shape);
    let d = dx.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        d[(ch * h + oy / factor) * w + ox / factor] += gd[(ch * ho + oy) * wo + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps::<T>(h, factor);
            let tx = bilinear_taps::<T>(w, factor);
            for ch in 0..c {
                let plane = &mut d[ch * h * w..][..h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let gv = gd[(ch * ho + oy) * wo + ox];
                        let top = gv * (T::one() - ly);
                        let bot = gv * ly;
                        plane[y0 * w + x0] += top * (T::one() - lx);
                        plane[y0 * w + x1] += top * lx;
                        plane[y1 * w + x0] += bot * (T::one() - lx);
                        plane[y1 * w + x1] += bot * lx;
                    }
                }
            }
        }
    }
    dx
}

/// Upsamples a raw `C x H x W` tensor outside any graph.
pub fn upsample_tensor<T: Element>(x: &Tensor<T>, factor: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    x.chw()?;
    if factor == 0 {
        return Err(TensorError::Param("upsample factor must be >= 1".into()));
    }
    Ok(upsample_data(x, factor, mode))
}

impl<T: Element> Graph<T> {
    pub fn upsample(&self, a: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let value = upsample_tensor(&self.value(a), factor, mode)?;
        Ok(self.push(value, Op::Upsample { input: a, factor, mode }))
    }
}
