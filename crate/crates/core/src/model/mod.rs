//! The segmentation network: encoder/FPN baseline, prior-guided refinement of
//! the deepest feature, and the rank-weighted fusion cascade.

pub mod baseline;
pub mod pigm;
pub mod uafm;
mod uanet;

pub use baseline::{DilationBlock, Encoder, EncoderConfig, FeaturePyramid, Fpn};
pub use pigm::{channel_gate, pigm_forward, spatial_cross_attention, PigmMode};
pub use uafm::{
    cascade, rank_maps, uncertainty_maps, ura, FusionCase, FusionLevel, RankMaps, UncertaintyPair, UraFormula,
};
pub use uanet::{NetConfig, Predictions, UaNet};

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Square-kernel convolution with its parameters registered in a store.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv {
    /// `k x k` kernel, stride 1, "same" padding `dilation * (k - 1) / 2`.
    pub fn same<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = store.add(&format!("{name}.w"), kaiming_uniform(rng, &[c_out, c_in, k, k], fan_in))?;
        let bias = store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Conv {
            weight,
            bias: Some(bias),
            padding: dilation * (k - 1) / 2,
            dilation,
        })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            1,
            self.padding,
            self.dilation,
        )
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}
