//! Uncertainty ranking and rank-weighted top-down fusion.
//!
//! For a logit map `M`, the foreground and background uncertainties are
//! `U_f = sigmoid(M) - 0.5` and `U_b = 0.5 - sigmoid(M)`. Each is bucketed
//! into an integer rank:
//!
//! | U            | rank |
//! |--------------|------|
//! | `[-0.5, 0)`  | 0    |
//! | `[0, 0.1)`   | 5    |
//! | `[0.1, 0.2)` | 4    |
//! | `[0.2, 0.3)` | 3    |
//! | `[0.3, 0.4)` | 2    |
//! | `[0.4, 0.5]` | 1    |
//!
//! [`UraFormula::Floor`] instead evaluates `floor((0.5 - U) / 0.1)` for
//! `U >= 0`, which disagrees with the table (e.g. `U = 0.05` gives 4 and
//! `U = 0.45` gives 0); it is kept for comparison runs.
//!
//! Rank maps enter the fusion as constant multiplicative weights (no
//! gradient flows through the bucketing).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::ops::{sigmoid_scalar, UpsampleMode};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};

use super::{Conv, FeaturePyramid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UraFormula {
    #[default]
    Prose,
    Floor,
}

impl FromStr for UraFormula {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose" => Ok(UraFormula::Prose),
            "floor" => Ok(UraFormula::Floor),
            _ => Err(TensorError::Config(format!("unknown ura formula {s:?} (prose, floor)"))),
        }
    }
}

impl fmt::Display for UraFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UraFormula::Prose => "prose",
            UraFormula::Floor => "floor",
        })
    }
}

/// Rank of one uncertainty value in `[-0.5, 0.5]`.
pub fn ura(u: f64, formula: UraFormula) -> Result<u8> {
    if u.is_nan() {
        return Err(TensorError::NonFinite("uncertainty is NaN".into()));
    }
    if !(-0.5..=0.5).contains(&u) {
        return Err(TensorError::Contract(format!("uncertainty {u} outside [-0.5, 0.5]")));
    }
    if u < 0.0 {
        return Ok(0);
    }
    Ok(match formula {
        UraFormula::Prose => {
            if u < 0.1 {
                5
            } else if u < 0.2 {
                4
            } else if u < 0.3 {
                3
            } else if u < 0.4 {
                2
            } else {
                1
            }
        }
        UraFormula::Floor => ((0.5 - u) / 0.1).floor() as u8,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyPair<T> {
    pub foreground: Tensor<T>,
    pub background: Tensor<T>,
}

pub fn uncertainty_maps<T: Element>(m: &Tensor<T>) -> Result<UncertaintyPair<T>> {
    let (c, _, _) = m.chw()?;
    if c != 1 {
        return Err(TensorError::Shape(format!(
            "uncertainty needs a single-channel logit map, got {:?}",
            m.shape()
        )));
    }
    let half = T::from_f64_lossy(0.5);
    let prob = m.map(sigmoid_scalar);
    Ok(UncertaintyPair {
        foreground: prob.map(|s| s - half),
        background: prob.map(|s| half - s),
    })
}

/// Integer rank rasters for one logit map, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankMaps {
    pub foreground: Vec<u8>,
    pub background: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl RankMaps {
    fn as_tensor<T: Element>(&self, ranks: &[u8]) -> Tensor<T> {
        Tensor::new(
            &[1, self.height, self.width],
            ranks.iter().map(|&r| T::from_u8(r).unwrap()).collect(),
        )
        .unwrap()
    }

    pub fn foreground_weights<T: Element>(&self) -> Tensor<T> {
        self.as_tensor(&self.foreground)
    }

    pub fn background_weights<T: Element>(&self) -> Tensor<T> {
        self.as_tensor(&self.background)
    }
}

pub fn rank_maps<T: Element>(m: &Tensor<T>, formula: UraFormula) -> Result<RankMaps> {
    let u = uncertainty_maps(m)?;
    let (_, height, width) = m.chw()?;
    let bucket = |t: &Tensor<T>| -> Result<Vec<u8>> {
        t.data()
            .iter()
            .map(|v| ura(v.to_f64().unwrap_or(f64::NAN), formula))
            .collect()
    };
    Ok(RankMaps {
        foreground: bucket(&u.foreground)?,
        background: bucket(&u.background)?,
        height,
        width,
    })
}

/// Feature interaction used when fusing adjacent levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FusionCase {
    /// Plain concatenation of the upsampled deeper feature and the shallower one.
    Concat,
    /// Both features weighted by `sigmoid(M)`.
    Sigmoid,
    /// Both features weighted by the foreground rank map only.
    ForegroundOnly,
    /// Foreground and background rank maps, concatenated then projected.
    #[default]
    Full,
}

impl FusionCase {
    pub const ALL: [FusionCase; 4] = [
        FusionCase::Concat,
        FusionCase::Sigmoid,
        FusionCase::ForegroundOnly,
        FusionCase::Full,
    ];

    pub fn number(self) -> u8 {
        match self {
            FusionCase::Concat => 1,
            FusionCase::Sigmoid => 2,
            FusionCase::ForegroundOnly => 3,
            FusionCase::Full => 4,
        }
    }

    /// Channel multiplier feeding the 1x1 projections (0 = no projection).
    fn projection_fan(self) -> usize {
        match self {
            FusionCase::Concat => 0,
            FusionCase::Sigmoid | FusionCase::ForegroundOnly => 1,
            FusionCase::Full => 2,
        }
    }
}

impl TryFrom<u8> for FusionCase {
    type Error = TensorError;

    fn try_from(n: u8) -> Result<Self> {
        FusionCase::ALL
            .into_iter()
            .find(|c| c.number() == n)
            .ok_or_else(|| TensorError::Config(format!("unknown fusion case {n} (1-4)")))
    }
}

impl From<FusionCase> for u8 {
    fn from(c: FusionCase) -> u8 {
        c.number()
    }
}

impl fmt::Display for FusionCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "case{}", self.number())
    }
}

/// Weights of one fusion step `(G_i, F_{i-1}, M_i) -> (G_{i-1}, M_{i-1})`.
#[derive(Clone, Debug)]
pub struct FusionLevel {
    pub case: FusionCase,
    g_proj: Option<Conv>,
    f_proj: Option<Conv>,
    fuse: Conv,
    head: Conv,
}

impl FusionLevel {
    pub fn new<T: Element>(
        name: &str,
        case: FusionCase,
        g_channels: usize,
        f_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan = case.projection_fan();
        let (g_proj, f_proj) = if fan > 0 {
            (
                Some(Conv::same(
                    store,
                    rng,
                    &format!("{name}.gproj"),
                    fan * g_channels,
                    g_channels,
                    1,
                    1,
                )?),
                Some(Conv::same(
                    store,
                    rng,
                    &format!("{name}.fproj"),
                    fan * f_channels,
                    f_channels,
                    1,
                    1,
                )?),
            )
        } else {
            (None, None)
        };
        let fuse = Conv::same(
            store,
            rng,
            &format!("{name}.fuse"),
            g_channels + f_channels,
            g_channels,
            3,
            1,
        )?;
        let head = Conv::same(store, rng, &format!("{name}.head"), g_channels, 1, 3, 1)?;
        Ok(FusionLevel {
            case,
            g_proj,
            f_proj,
            fuse,
            head,
        })
    }

    /// Returns `(G_{i-1}, M_{i-1})`.
    pub fn fuse<T: Element>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        gi: Var,
        f_prev: Var,
        mi: Var,
        formula: UraFormula,
    ) -> Result<(Var, Var)> {
        let (gs, fs, ms) = (g.shape(gi), g.shape(f_prev), g.shape(mi));
        let ok = matches!((&gs[..], &fs[..], &ms[..]),
            (&[_, h, w], &[_, fh, fw], &[1, mh, mw]) if fh == 2 * h && fw == 2 * w && (mh, mw) == (h, w));
        if !ok {
            return Err(TensorError::Shape(format!(
                "fusion needs G {gs:?} and M {ms:?} at half the extent of F {fs:?}"
            )));
        }

        let (g_u, f_u) = match self.case {
            FusionCase::Concat => (gi, f_prev),
            FusionCase::Sigmoid => {
                let s = g.sigmoid(mi);
                let s_up = g.upsample(s, 2, UpsampleMode::Nearest)?;
                (g.mul(gi, s)?, g.mul(f_prev, s_up)?)
            }
            FusionCase::ForegroundOnly | FusionCase::Full => {
                let ranks = rank_maps(&g.value(mi), formula)?;
                g.record_branches(
                    ranks
                        .foreground
                        .iter()
                        .zip(&ranks.background)
                        .map(|(&a, &b)| u64::from(a) << 8 | u64::from(b)),
                );
                let weigh = |x: Var, w: Tensor<T>, up: bool| -> Result<Var> {
                    let w = if up {
                        crate::ops::upsample_tensor(&w, 2, UpsampleMode::Nearest)?
                    } else {
                        w
                    };
                    let wv = g.constant(w);
                    g.mul(x, wv)
                };
                let rf = ranks.foreground_weights::<T>();
                if self.case == FusionCase::ForegroundOnly {
                    (weigh(gi, rf.clone(), false)?, weigh(f_prev, rf, true)?)
                } else {
                    let rb = ranks.background_weights::<T>();
                    let g_cat = g.concat(&[weigh(gi, rf.clone(), false)?, weigh(gi, rb.clone(), false)?], 0)?;
                    let f_cat = g.concat(&[weigh(f_prev, rf, true)?, weigh(f_prev, rb, true)?], 0)?;
                    (g_cat, f_cat)
                }
            }
        };
        let g_u = match &self.g_proj {
            Some(conv) => conv.forward(g, p, g_u)?,
            None => g_u,
        };
        let f_u = match &self.f_proj {
            Some(conv) => conv.forward(g, p, f_u)?,
            None => f_u,
        };
        let g_up = g.upsample(g_u, 2, UpsampleMode::Nearest)?;
        let cat = g.concat(&[g_up, f_u], 0)?;
        let g_next = self.fuse.forward(g, p, cat)?;
        let m_next = self.head.forward(g, p, g_next)?;
        Ok((g_next, m_next))
    }
}

/// Logit maps `M1..M5` (index 0 is M1) from the top-down cascade.
#[derive(Clone, Debug)]
pub struct CascadeMaps {
    pub m: [Var; 5],
}

impl CascadeMaps {
    /// `M_level`, 1-based.
    pub fn level(&self, level: usize) -> Var {
        self.m[level - 1]
    }
}

/// Four fusion steps from `(G5, F4, M5)` down to `(G1, M1)`.
/// `levels[0]` fuses into level 4, `levels[3]` into level 1.
pub fn cascade<T: Element>(
    g: &Graph<T>,
    p: &Bound,
    levels: &[FusionLevel],
    pyramid: &FeaturePyramid,
    g5: Var,
    formula: UraFormula,
) -> Result<CascadeMaps> {
    if levels.len() != 4 {
        return Err(TensorError::Shape(format!(
            "cascade needs 4 fusion levels, got {}",
            levels.len()
        )));
    }
    let mut maps = [pyramid.m5; 5];
    let (mut gi, mut mi) = (g5, pyramid.m5);
    for (step, level) in levels.iter().enumerate() {
        let target = 4 - step;
        let (gn, mn) = level.fuse(g, p, gi, pyramid.level(target), mi, formula)?;
        maps[target - 1] = mn;
        gi = gn;
        mi = mn;
    }
    Ok(CascadeMaps { m: maps })
}
