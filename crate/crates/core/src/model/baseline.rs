//! Five-stage convolutional encoder, multi-branch dilation enhancement of
//! E2..E5, and an additive top-down feature pyramid producing F1..F5 and the
//! coarse logit map M5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::UpsampleMode;
use crate::params::{Bound, ParamStore};
use crate::tensor::Element;

use super::Conv;

/// Input extents must be multiples of this (four 2x poolings).
pub const EXTENT_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub dilation_rates: Vec<usize>,
    pub head_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_channels: vec![8, 16, 32, 64, 64],
            convs_per_stage: 2,
            dilation_rates: vec![1, 2, 4],
            head_channels: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 5 {
            return Err(TensorError::Config(format!(
                "encoder.stage_channels needs exactly 5 entries, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.head_channels == 0 || self.convs_per_stage == 0 {
            return Err(TensorError::Config(
                "encoder channel counts and convs_per_stage must be positive".into(),
            ));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return Err(TensorError::Config(
                "encoder.dilation_rates must be non-empty with every rate >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn check_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(EXTENT_MULTIPLE) || !w.is_multiple_of(EXTENT_MULTIPLE) {
        return Err(TensorError::Shape(format!(
            "input extent {h}x{w} must be a positive multiple of {EXTENT_MULTIPLE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Vec<Conv>>,
}

impl Encoder {
    pub fn new<T: Element>(
        cfg: &EncoderConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = in_channels;
        let mut stages = Vec::with_capacity(5);
        for (s, &c_out) in cfg.stage_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(cfg.convs_per_stage);
            for j in 0..cfg.convs_per_stage {
                convs.push(Conv::same(
                    store,
                    rng,
                    &format!("enc.s{}.c{}", s + 1, j + 1),
                    c_in,
                    c_out,
                    3,
                    1,
                )?);
                c_in = c_out;
            }
            stages.push(convs);
        }
        Ok(Encoder { stages })
    }

    /// E1..E5; stages 2-5 start with a 2x max pool.
    pub fn encode<T: Element>(&self, g: &Graph<T>, p: &Bound, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image);
        let &[_, h, w] = &shape[..] else {
            return Err(TensorError::Shape(format!("image must be C x H x W, got {shape:?}")));
        };
        check_extent(h, w)?;
        let mut x = image;
        let mut out = Vec::with_capacity(5);
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                x = g.maxpool2d(x, 2)?;
            }
            for conv in convs {
                x = conv.forward(g, p, x)?;
                x = g.relu(x);
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// Parallel dilated 3x3 branches, concatenated, merged by a 1x1 conv back to
/// the input width, plus the input (residual).
#[derive(Clone, Debug)]
pub struct DilationBlock {
    branches: Vec<Conv>,
    merge: Conv,
}

impl DilationBlock {
    pub fn new<T: Element>(
        name: &str,
        channels: usize,
        rates: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let branches = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv::same(store, rng, &format!("{name}.b{}", i + 1), channels, channels, 3, r))
            .collect::<Result<Vec<_>>>()?;
        let merge = Conv::same(
            store,
            rng,
            &format!("{name}.merge"),
            channels * rates.len(),
            channels,
            1,
            1,
        )?;
        Ok(DilationBlock { branches, merge })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let outs = self
            .branches
            .iter()
            .map(|b| Ok(g.relu(b.forward(g, p, x)?)))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs, 0)?;
        let merged = self.merge.forward(g, p, cat)?;
        g.add(merged, x)
    }
}

/// Decoder features `F1..F5` (index 0 is F1, full resolution) and the coarse
/// logit map `M5` at F5's extent.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub f: [Var; 5],
    pub m5: Var,
}

impl FeaturePyramid {
    /// `F_level`, 1-based.
    pub fn level(&self, level: usize) -> Var {
        self.f[level - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    lateral: Vec<Conv>,
    smooth: Vec<Conv>,
    head: Conv,
}

impl Fpn {
    pub fn new<T: Element>(
        in_channels: &[usize],
        head_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv::same(store, rng, &format!("fpn.lat{}", i + 1), c, head_channels, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let smooth = (0..in_channels.len())
            .map(|i| {
                Conv::same(
                    store,
                    rng,
                    &format!("fpn.smooth{}", i + 1),
                    head_channels,
                    head_channels,
                    3,
                    1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::same(store, rng, "fpn.head", head_channels, 1, 3, 1)?;
        Ok(Fpn { lateral, smooth, head })
    }

    pub fn decode<T: Element>(&self, g: &Graph<T>, p: &Bound, e: &[Var]) -> Result<FeaturePyramid> {
        if e.len() != 5 {
            return Err(TensorError::Shape(format!(
                "fpn needs 5 encoder levels, got {}",
                e.len()
            )));
        }
        let mut merged: Vec<Var> = Vec::with_capacity(5);
        let mut above: Option<Var> = None;
        for i in (0..5).rev() {
            let lat = self.lateral[i].forward(g, p, e[i])?;
            let m = match above {
                Some(deeper) => {
                    let up = g.upsample(deeper, 2, UpsampleMode::Nearest)?;
                    g.add(lat, up)?
                }
                None => lat,
            };
            merged.push(m);
            above = Some(m);
        }
        merged.reverse();
        let f = merged
            .iter()
            .zip(&self.smooth)
            .map(|(&m, conv)| conv.forward(g, p, m))
            .collect::<Result<Vec<_>>>()?;
        let m5 = self.head.forward(g, p, f[4])?;
        Ok(FeaturePyramid {
            f: [f[0], f[1], f[2], f[3], f[4]],
            m5,
        })
    }
}
