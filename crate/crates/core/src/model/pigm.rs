//! Prior-guided refinement of the deepest feature map.
//!
//! Spatial stage: every channel of `F5` attends over the coarse logit map
//! `M5`. With `q = vec(F5[i])` (N x 1) and `k = vec(M5)` (1 x N), the
//! attention `T = softmax_rows(q k)` is N x N, normalised over the key axis,
//! and the attended map is `vec(F5[i])^T T`. The channel maps are stacked
//! into `C5` and `R5 = alpha * C5 + F5`.
//!
//! Channel stage: `S5 = sigmoid(reshape(R5, C x N) vec(M5))` is one gate per
//! channel and `G5 = beta * S5 * R5 + R5`.
//!
//! Channels are processed one at a time so only one N x N attention matrix
//! is live per step of the forward pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PigmMode {
    Off,
    #[serde(rename = "sc")]
    SpatialOnly,
    #[serde(rename = "cc")]
    ChannelOnly,
    #[default]
    #[serde(rename = "sc_cc")]
    SpatialChannel,
}

impl PigmMode {
    pub const ALL: [PigmMode; 4] = [
        PigmMode::Off,
        PigmMode::SpatialOnly,
        PigmMode::ChannelOnly,
        PigmMode::SpatialChannel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PigmMode::Off => "off",
            PigmMode::SpatialOnly => "sc",
            PigmMode::ChannelOnly => "cc",
            PigmMode::SpatialChannel => "sc_cc",
        }
    }
}

impl fmt::Display for PigmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PigmMode {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        PigmMode::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| TensorError::Config(format!("unknown pigm mode {s:?} (off, sc, cc, sc_cc)")))
    }
}

fn check_extents<T: Element>(g: &Graph<T>, f5: Var, m5: Var) -> Result<(usize, usize, usize)> {
    let (fs, ms) = (g.shape(f5), g.shape(m5));
    match (&fs[..], &ms[..]) {
        (&[c, h, w], &[1, mh, mw]) if (h, w) == (mh, mw) => Ok((c, h, w)),
        _ => Err(TensorError::Shape(format!(
            "prior map {ms:?} must be 1 x H x W matching feature {fs:?}"
        ))),
    }
}

/// Spatial stage; also returns the per-channel N x N attention matrices.
pub fn spatial_attention_with_maps<T: Element>(g: &Graph<T>, f5: Var, m5: Var, alpha: Var) -> Result<(Var, Vec<Var>)> {
    let (c, h, w) = check_extents(g, f5, m5)?;
    let n = h * w;
    let key = g.reshape(m5, &[1, n])?;
    let mut attended = Vec::with_capacity(c);
    let mut maps = Vec::with_capacity(c);
    for channel in g.unbind(f5, 0)? {
        let value = g.reshape(channel, &[1, n])?;
        let query = g.transpose2d(value)?;
        let logits = g.matmul(query, key)?;
        let t = g.softmax(logits, 1)?;
        let o = g.matmul(value, t)?;
        attended.push(g.reshape(o, &[1, h, w])?);
        maps.push(t);
    }
    let c5 = g.concat(&attended, 0)?;
    let scaled = g.mul(c5, alpha)?;
    Ok((g.add(scaled, f5)?, maps))
}

/// `R5 = alpha * C5 + F5`.
pub fn spatial_cross_attention<T: Element>(g: &Graph<T>, f5: Var, m5: Var, alpha: Var) -> Result<Var> {
    spatial_attention_with_maps(g, f5, m5, alpha).map(|(r5, _)| r5)
}

/// Per-channel gate `S5` (shape `C x 1 x 1`).
pub fn channel_weights<T: Element>(g: &Graph<T>, r5: Var, m5: Var) -> Result<Var> {
    let (c, h, w) = check_extents(g, r5, m5)?;
    let n = h * w;
    let keys = g.reshape(r5, &[c, n])?;
    let query = g.reshape(m5, &[n, 1])?;
    let scores = g.matmul(keys, query)?;
    let s5 = g.sigmoid(scores);
    g.reshape(s5, &[c, 1, 1])
}

/// `G5 = beta * S5 * R5 + R5`.
pub fn channel_gate<T: Element>(g: &Graph<T>, r5: Var, m5: Var, beta: Var) -> Result<Var> {
    let s5 = channel_weights(g, r5, m5)?;
    let gated = g.mul(s5, r5)?;
    let scaled = g.mul(gated, beta)?;
    g.add(scaled, r5)
}

pub fn pigm_forward<T: Element>(g: &Graph<T>, f5: Var, m5: Var, alpha: Var, beta: Var, mode: PigmMode) -> Result<Var> {
    check_extents(g, f5, m5)?;
    match mode {
        PigmMode::Off => Ok(f5),
        PigmMode::SpatialOnly => spatial_cross_attention(g, f5, m5, alpha),
        PigmMode::ChannelOnly => channel_gate(g, f5, m5, beta),
        PigmMode::SpatialChannel => {
            let r5 = spatial_cross_attention(g, f5, m5, alpha)?;
            channel_gate(g, r5, m5, beta)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn feature(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0)
    }

    #[test]
    fn zero_alpha_is_identity() {
        let g = Graph::<f64>::new();
        let f5 = g.constant(feature(3, 4, 4));
        let m5 = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.3 - 2.0));
        let a = g.constant(Tensor::scalar(0.0));
        let r5 = spatial_cross_attention(&g, f5, m5, a).unwrap();
        assert_eq!(*g.value(r5), *g.value(f5));
    }

    #[test]
    fn constant_prior_attends_to_channel_mean() {
        // 1 x 2 x 2 feature [1, 2, 3, 6]: mean 3, so R5 = alpha * 3 + F5.
        let g = Graph::<f64>::new();
        let f5 = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        let m5 = g.constant(Tensor::full(&[1, 2, 2], 0.8));
        let a = g.constant(Tensor::scalar(0.5));
        let (r5, maps) = spatial_attention_with_maps(&g, f5, m5, a).unwrap();
        assert!(!g.value(maps[0]).data().is_empty());
        let expect = [2.5, 3.5, 4.5, 7.5];
        for (v, e) in g.value(r5).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let g = Graph::<f64>::new();
        let f5 = g.constant(feature(3, 4, 4));
        let m5 = g.constant(Tensor::from_fn(&[1, 4, 4], |i| (i as f64).sin() * 3.0));
        let a = g.constant(Tensor::scalar(1.0));
        let (_, maps) = spatial_attention_with_maps(&g, f5, m5, a).unwrap();
        assert_eq!(maps.len(), 3);
        for t in maps {
            let v = g.value(t);
            assert_eq!(v.shape(), &[16, 16]);
            for row in v.data().chunks(16) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_with_zero_prior_is_half() {
        let g = Graph::<f64>::new();
        let r5 = g.constant(feature(3, 4, 4));
        let m5 = g.constant(Tensor::zeros(&[1, 4, 4]));
        let beta = 0.8;
        let b = g.constant(Tensor::scalar(beta));
        let g5 = channel_gate(&g, r5, m5, b).unwrap();
        for (o, i) in g.value(g5).data().iter().zip(g.value(r5).data()) {
            assert!((o - (1.0 + 0.5 * beta) * i).abs() < 1e-15);
        }
        let b0 = g.constant(Tensor::scalar(0.0));
        let id = channel_gate(&g, r5, m5, b0).unwrap();
        assert_eq!(*g.value(id), *g.value(r5));
    }

    #[test]
    fn gate_values_in_open_unit_interval() {
        let g = Graph::<f64>::new();
        let r5 = g.constant(feature(5, 2, 2));
        let m5 = g.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64 - 1.5));
        let s = channel_weights(&g, r5, m5).unwrap();
        assert_eq!(g.shape(s), vec![5, 1, 1]);
        assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn modes_and_identity() {
        let g = Graph::<f64>::new();
        let f5 = g.constant(feature(3, 4, 4));
        let m5 = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64 * 0.1));
        let zero = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let off = pigm_forward(&g, f5, m5, one, one, PigmMode::Off).unwrap();
        assert_eq!(*g.value(off), *g.value(f5));
        let both = pigm_forward(&g, f5, m5, zero, zero, PigmMode::SpatialChannel).unwrap();
        assert_eq!(*g.value(both), *g.value(f5));
        for mode in PigmMode::ALL {
            let out = pigm_forward(&g, f5, m5, one, one, mode).unwrap();
            assert_eq!(g.shape(out), g.shape(f5));
        }
        let bad = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            pigm_forward(&g, f5, bad, one, one, PigmMode::Off),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn mode_labels_parse() {
        for m in PigmMode::ALL {
            assert_eq!(m.label().parse::<PigmMode>().unwrap(), m);
        }
        assert!("both".parse::<PigmMode>().is_err());
    }
}
