use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

use super::baseline::{DilationBlock, Encoder, EncoderConfig, Fpn};
use super::pigm::{pigm_forward, PigmMode};
use super::uafm::{cascade, FusionCase, FusionLevel, UraFormula};
use super::Conv;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub pigm: PigmMode,
    /// `None` runs the plain encoder/FPN baseline with a single full-resolution head.
    pub uafm: Option<FusionCase>,
    pub ura: UraFormula,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            encoder: EncoderConfig::default(),
            pigm: PigmMode::default(),
            uafm: Some(FusionCase::default()),
            ura: UraFormula::default(),
        }
    }
}

impl NetConfig {
    pub fn baseline(encoder: EncoderConfig) -> Self {
        NetConfig {
            encoder,
            pigm: PigmMode::Off,
            uafm: None,
            ura: UraFormula::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.uafm.is_none() && self.pigm != PigmMode::Off {
            return Err(TensorError::Config(
                "pigm needs the fusion cascade; set pigm.mode = \"off\" for the baseline".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.uafm {
            None => "baseline".to_string(),
            Some(case) => format!("{case}+pigm_{}", self.pigm),
        }
    }
}

/// Logit maps of one forward pass, ordered coarse to fine.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `(level, M_level)` pairs, level descending.
    pub maps: Vec<(usize, Var)>,
}

impl Predictions {
    pub fn level(&self, level: usize) -> Option<Var> {
        self.maps.iter().find(|(l, _)| *l == level).map(|&(_, v)| v)
    }

    /// The finest map (M1).
    pub fn final_map(&self) -> Var {
        self.maps.last().expect("at least one prediction").1
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.iter().map(|&(l, _)| l)
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Baseline {
        head: Conv,
    },
    Cascade {
        alpha: ParamId,
        beta: ParamId,
        levels: Vec<FusionLevel>,
    },
}

#[derive(Clone, Debug)]
pub struct UaNet {
    pub cfg: NetConfig,
    encoder: Encoder,
    enhance: Vec<DilationBlock>,
    fpn: Fpn,
    decoder: Decoder,
}

impl UaNet {
    pub const IN_CHANNELS: usize = 3;

    pub fn new<T: Element>(cfg: &NetConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let enc = &cfg.encoder;
        let encoder = Encoder::new(enc, Self::IN_CHANNELS, store, rng)?;
        let enhance = (1..5)
            .map(|i| {
                DilationBlock::new(
                    &format!("dil.e{}", i + 1),
                    enc.stage_channels[i],
                    &enc.dilation_rates,
                    store,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fpn = Fpn::new(&enc.stage_channels, enc.head_channels, store, rng)?;
        let head = enc.head_channels;
        let decoder = match cfg.uafm {
            None => Decoder::Baseline {
                head: Conv::same(store, rng, "base.head", head, 1, 3, 1)?,
            },
            Some(case) => {
                let alpha = store.add("pigm.alpha", Tensor::zeros(&[1]))?;
                let beta = store.add("pigm.beta", Tensor::zeros(&[1]))?;
                let levels = (1..5)
                    .rev()
                    .map(|l| FusionLevel::new(&format!("uafm.l{l}"), case, head, head, store, rng))
                    .collect::<Result<Vec<_>>>()?;
                Decoder::Cascade { alpha, beta, levels }
            }
        };
        Ok(UaNet {
            cfg: cfg.clone(),
            encoder,
            enhance,
            fpn,
            decoder,
        })
    }

    pub fn forward<T: Element>(&self, g: &Graph<T>, p: &Bound, image: Var) -> Result<Predictions> {
        // centre [0, 1] pixels on zero
        let shift = g.constant(Tensor::scalar(T::from_f64_lossy(-0.5)));
        let centred = g.add(image, shift)?;
        let mut e = self.encoder.encode(g, p, centred)?;
        for (block, ei) in self.enhance.iter().zip(&mut e[1..]) {
            *ei = block.forward(g, p, *ei)?;
        }
        let pyramid = self.fpn.decode(g, p, &e)?;
        match &self.decoder {
            Decoder::Baseline { head } => {
                let m1 = head.forward(g, p, pyramid.level(1))?;
                Ok(Predictions {
                    maps: vec![(5, pyramid.m5), (1, m1)],
                })
            }
            Decoder::Cascade { alpha, beta, levels } => {
                let g5 = pigm_forward(
                    g,
                    pyramid.level(5),
                    pyramid.m5,
                    p.var(*alpha),
                    p.var(*beta),
                    self.cfg.pigm,
                )?;
                let maps = cascade(g, p, levels, &pyramid, g5, self.cfg.ura)?;
                Ok(Predictions {
                    maps: (1..=5).rev().map(|l| (l, maps.level(l))).collect(),
                })
            }
        }
    }

    /// Forward pass with frozen weights; returns `(level, logits)` pairs.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(image.clone());
        let preds = self.forward(&g, &p, x)?;
        Ok(preds.maps.iter().map(|&(l, v)| (l, g.value(v).clone())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![2, 3, 3, 4, 4],
            convs_per_stage: 1,
            dilation_rates: vec![1, 2],
            head_channels: 3,
        }
    }

    #[test]
    fn ladder_of_predictions() {
        let cfg = NetConfig {
            encoder: small(),
            ..NetConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let net = UaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::from_fn(&[3, 32, 32], |i| (i % 17) as f32 / 17.0);
        let out = net.predict(&store, &img).unwrap();
        let levels: Vec<_> = out.iter().map(|(l, _)| *l).collect();
        assert_eq!(levels, vec![5, 4, 3, 2, 1]);
        for (l, m) in &out {
            let side = 32 >> (l - 1);
            assert_eq!(m.shape(), &[1, side, side]);
        }
    }

    #[test]
    fn baseline_has_two_heads() {
        let cfg = NetConfig::baseline(small());
        let mut store = ParamStore::<f32>::new();
        let net = UaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.id("pigm.alpha").is_none());
        let out = net.predict(&store, &Tensor::zeros(&[3, 16, 16])).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].1.shape(), &[1, 16, 16]);
    }

    #[test]
    fn pigm_without_cascade_is_rejected() {
        let mut cfg = NetConfig::baseline(small());
        cfg.pigm = PigmMode::SpatialOnly;
        assert!(matches!(cfg.validate(), Err(TensorError::Config(_))));
    }

    #[test]
    fn deterministic_init() {
        let cfg = NetConfig {
            encoder: small(),
            ..NetConfig::default()
        };
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        UaNet::new(&cfg, &mut a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        UaNet::new(&cfg, &mut b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
