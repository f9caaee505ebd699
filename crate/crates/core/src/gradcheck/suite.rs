//! Randomised gradient checks for every differentiable op and for the
//! composite modules. Each case is reduced to a scalar with a fixed random
//! weighting so that no op is checked only through a symmetric sum.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::baseline::{DilationBlock, Encoder, EncoderConfig, FeaturePyramid, Fpn};
use crate::model::{pigm_forward, FusionCase, FusionLevel, NetConfig, PigmMode, UaNet, UraFormula};
use crate::ops::UpsampleMode;
use crate::params::{Bound, ParamStore};
use crate::seed;
use crate::tensor::{Element, Tensor};
use crate::train::deep_supervision_loss;

use super::{check_analytic, finite_diff_check_with, CheckOptions, GradCheckReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    MatMul,
    Conv2d,
    MaxPool,
    Relu,
    Sigmoid,
    Softmax,
    Add,
    Sub,
    Mul,
    Scale,
    Mean,
    Reshape,
    Transpose,
    Concat,
    Split,
    UpsampleNearest,
    UpsampleBilinear,
    Bce,
    Pigm,
    Uafm(FusionCase),
    DilationBlock,
    Encoder,
    Fpn,
    UaNet,
}

impl Case {
    pub const OPS: [Case; 18] = [
        Case::MatMul,
        Case::Conv2d,
        Case::MaxPool,
        Case::Relu,
        Case::Sigmoid,
        Case::Softmax,
        Case::Add,
        Case::Sub,
        Case::Mul,
        Case::Scale,
        Case::Mean,
        Case::Reshape,
        Case::Transpose,
        Case::Concat,
        Case::Split,
        Case::UpsampleNearest,
        Case::UpsampleBilinear,
        Case::Bce,
    ];

    pub const COMPOSITES: [Case; 9] = [
        Case::Pigm,
        Case::Uafm(FusionCase::Concat),
        Case::Uafm(FusionCase::Sigmoid),
        Case::Uafm(FusionCase::ForegroundOnly),
        Case::Uafm(FusionCase::Full),
        Case::DilationBlock,
        Case::Encoder,
        Case::Fpn,
        Case::UaNet,
    ];

    pub fn all() -> impl Iterator<Item = Case> {
        Case::OPS.into_iter().chain(Case::COMPOSITES)
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Case::Uafm(c) => write!(f, "uafm_{c}"),
            other => write!(f, "{}", format!("{other:?}").to_lowercase()),
        }
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    // sum of uniforms: cheap, smooth enough, bounded
    Tensor::from_fn(shape, |_| scale * (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>())
}

/// Inputs of one case at one seed plus the small integer choices that shape it.
#[derive(Clone, Debug)]
pub struct Instance {
    pub case: Case,
    pub seed: u64,
    pub inputs: Vec<Tensor<f64>>,
    dims: Vec<usize>,
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        stage_channels: vec![2, 3, 3, 4, 4],
        convs_per_stage: 1,
        dilation_rates: vec![1, 2],
        head_channels: 3,
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        encoder: tiny_encoder(),
        pigm: PigmMode::SpatialChannel,
        uafm: Some(FusionCase::Full),
        ura: UraFormula::Prose,
    }
}

/// Module weights for a composite case, built identically for any width.
struct Module<T> {
    store: ParamStore<T>,
    kind: ModuleKind,
}

enum ModuleKind {
    Fusion(FusionLevel),
    Dilation(DilationBlock),
    Encoder(Encoder),
    Fpn(Fpn),
    Net(UaNet),
}

fn module<T: Element>(case: Case, seed: u64) -> Result<Option<Module<T>>> {
    let mut store = ParamStore::new();
    let mut rng = seed::rng(seed, "module");
    let kind = match case {
        Case::Uafm(c) => ModuleKind::Fusion(FusionLevel::new("u", c, 3, 3, &mut store, &mut rng)?),
        Case::DilationBlock => ModuleKind::Dilation(DilationBlock::new("d", 4, &[1, 2, 4], &mut store, &mut rng)?),
        Case::Encoder => ModuleKind::Encoder(Encoder::new(&tiny_encoder(), 3, &mut store, &mut rng)?),
        Case::Fpn => ModuleKind::Fpn(Fpn::new(&tiny_encoder().stage_channels, 3, &mut store, &mut rng)?),
        Case::UaNet => {
            let net = UaNet::new(&tiny_net(), &mut store, &mut rng)?;
            // open the attention and gate paths
            for (name, v) in [("pigm.alpha", 0.5), ("pigm.beta", 0.7)] {
                let id = store.id(name).expect("pigm gains exist");
                *store.value_mut(id) = Tensor::full(&[1], T::from_f64_lossy(v));
            }
            ModuleKind::Net(net)
        }
        _ => return Ok(None),
    };
    Ok(Some(Module { store, kind }))
}

impl Instance {
    pub fn new(case: Case, seed_value: u64) -> Result<Self> {
        let mut rng = seed::rng(seed_value, &format!("gradcheck.{case}"));
        let r = &mut rng;
        let mut dims = Vec::new();
        let mut inputs = match case {
            Case::MatMul => {
                let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
                vec![normal(r, &[m, k], 1.0), normal(r, &[k, n], 1.0)]
            }
            Case::Conv2d => {
                let (c_in, c_out) = (r.gen_range(1..4), r.gen_range(1..4));
                let k = r.gen_range(1..4);
                let (stride, padding, dilation) = (r.gen_range(1..3), r.gen_range(0..3), r.gen_range(1..3));
                let min = dilation * (k - 1) + 1;
                let (h, w) = (
                    r.gen_range(min.max(4)..min.max(4) + 4),
                    r.gen_range(min.max(4)..min.max(4) + 4),
                );
                dims = vec![stride, padding, dilation];
                vec![
                    normal(r, &[c_in, h, w], 1.0),
                    normal(r, &[c_out, c_in, k, k], 0.5),
                    normal(r, &[c_out], 0.5),
                ]
            }
            Case::MaxPool => {
                // distinct values keep every window's winner away from ties
                let c = r.gen_range(1..3);
                let mut vals: Vec<f64> = (0..c * 16).map(|i| i as f64 * 0.1).collect();
                vals.shuffle(r);
                vec![Tensor::new(&[c, 4, 4], vals)?]
            }
            Case::Relu | Case::Sigmoid | Case::Scale | Case::Mean | Case::UpsampleNearest | Case::UpsampleBilinear => {
                dims = vec![r.gen_range(1..4)];
                vec![normal(r, &[2, 3, 4], 1.5)]
            }
            Case::Softmax => {
                dims = vec![r.gen_range(0..3)];
                vec![normal(r, &[3, 4, 5], 1.5)]
            }
            Case::Add | Case::Sub | Case::Mul => {
                let shapes: [&[usize]; 5] = [&[3, 4, 5], &[1, 4, 1], &[3, 1, 5], &[5], &[1]];
                let b = shapes.choose(r).unwrap();
                vec![normal(r, &[3, 4, 5], 1.0), normal(r, b, 1.0)]
            }
            Case::Reshape | Case::Split => vec![normal(r, &[3, 6, 4], 1.0)],
            Case::Transpose => {
                let (m, n) = (r.gen_range(1..6), r.gen_range(1..6));
                vec![normal(r, &[m, n], 1.0)]
            }
            Case::Concat => {
                let axis = r.gen_range(0..3);
                dims = vec![axis];
                (0..r.gen_range(2..4))
                    .map(|_| {
                        let mut s = vec![2, 3, 4];
                        s[axis] = r.gen_range(1..4);
                        normal(r, &s, 1.0)
                    })
                    .collect()
            }
            Case::Bce => vec![normal(r, &[3, 3], 2.0)],
            Case::Pigm => {
                dims = vec![r.gen_range(0..PigmMode::ALL.len())];
                vec![
                    normal(r, &[3, 4, 4], 1.0),
                    normal(r, &[1, 4, 4], 1.0),
                    Tensor::scalar(r.gen_range(0.2..1.0)),
                    Tensor::scalar(r.gen_range(0.2..1.0)),
                ]
            }
            // M spans every rank bucket; G and F are the fused features
            Case::Uafm(_) => vec![
                normal(r, &[3, 4, 4], 1.0),
                normal(r, &[3, 8, 8], 1.0),
                normal(r, &[1, 4, 4], 1.5),
            ],
            Case::DilationBlock => vec![normal(r, &[4, 8, 8], 1.0)],
            Case::Encoder => vec![Tensor::from_fn(&[3, 16, 16], |_| r.gen_range(0.0..1.0))],
            Case::Fpn => {
                let ch = tiny_encoder().stage_channels;
                (0..5).map(|i| normal(r, &[ch[i], 16 >> i, 16 >> i], 1.0)).collect()
            }
            Case::UaNet => vec![Tensor::from_fn(&[3, 32, 32], |_| r.gen_range(0.0..1.0))],
        };
        if let Some(m) = module::<f64>(case, seed_value)? {
            inputs.extend(m.store.values().iter().cloned());
        }
        Ok(Instance {
            case,
            seed: seed_value,
            inputs,
            dims,
        })
    }

    /// Copy with every input rounded to 32-bit precision.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.inputs {
            *t = t.cast::<f32>().cast();
        }
        out
    }

    fn output<T: Element>(&self, g: &Graph<T>, v: &[Var]) -> Result<Var> {
        let d = &self.dims;
        let binary = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        Ok(match self.case {
            Case::MatMul => g.matmul(v[0], v[1])?,
            Case::Conv2d => g.conv2d(v[0], v[1], Some(v[2]), d[0], d[1], d[2])?,
            Case::MaxPool => g.maxpool2d(v[0], 2)?,
            Case::Relu => g.relu(v[0]),
            Case::Sigmoid => g.sigmoid(v[0]),
            Case::Softmax => g.softmax(v[0], d[0])?,
            Case::Add => g.add(v[0], v[1])?,
            Case::Sub => g.sub(v[0], v[1])?,
            Case::Mul => g.mul(v[0], v[1])?,
            Case::Scale => g.scale(v[0], T::from_f64_lossy(-1.75)),
            Case::Mean => g.mean(v[0]),
            Case::Reshape => g.reshape(v[0], &[4, 18])?,
            Case::Transpose => g.transpose2d(v[0])?,
            Case::Concat => g.concat(v, d[0])?,
            Case::Split => {
                let parts = g.split(v[0], 1, &[2, 4])?;
                let a = g.reshape(parts[0], &[3, 8])?;
                let b = g.reshape(parts[1], &[3, 16])?;
                g.concat(&[b, a], 1)?
            }
            Case::UpsampleNearest => g.upsample(v[0], d[0], UpsampleMode::Nearest)?,
            Case::UpsampleBilinear => g.upsample(v[0], d[0], UpsampleMode::Bilinear)?,
            Case::Bce => {
                let t = g.constant(Tensor::from_f64(&[3, 3], &binary)?);
                g.bce_with_logits(v[0], t)?
            }
            Case::Pigm => pigm_forward(g, v[0], v[1], v[2], v[3], PigmMode::ALL[d[0]])?,
            _ => {
                let m = module::<T>(self.case, self.seed)?.expect("composite case has weights");
                return self.composite(g, v, m);
            }
        })
    }

    fn composite<T: Element>(&self, g: &Graph<T>, v: &[Var], m: Module<T>) -> Result<Var> {
        let n_data = v.len() - m.store.len();
        let p = Bound::new(v[n_data..].to_vec());
        match m.kind {
            ModuleKind::Fusion(level) => {
                let (gn, mn) = level.fuse(g, &p, v[0], v[1], v[2], UraFormula::Prose)?;
                let a = g.reshape(gn, &[3 * 64])?;
                let b = g.reshape(mn, &[64])?;
                g.concat(&[a, b], 0)
            }
            ModuleKind::Dilation(block) => block.forward(g, &p, v[0]),
            ModuleKind::Encoder(enc) => {
                let e = enc.encode(g, &p, v[0])?;
                let flat = e
                    .iter()
                    .map(|&x| {
                        let n = g.shape(x).iter().product();
                        g.reshape(x, &[n])
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&flat, 0)
            }
            ModuleKind::Fpn(fpn) => {
                let FeaturePyramid { f, m5 } = fpn.decode(g, &p, &v[..5])?;
                let flat = f
                    .iter()
                    .chain([&m5])
                    .map(|&x| {
                        let n = g.shape(x).iter().product();
                        g.reshape(x, &[n])
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&flat, 0)
            }
            ModuleKind::Net(net) => {
                let preds = net.forward(g, &p, v[0])?;
                let mut rng = seed::rng(self.seed, "gradcheck.mask");
                let mask = Tensor::from_fn(&[1, 32, 32], |_| T::from_f64_lossy(rng.gen_range(0..2) as f64));
                let gt = g.constant(mask);
                Ok(deep_supervision_loss(g, &preds, gt)?.0)
            }
        }
    }

    /// Scalar objective: the case output weighted by a fixed random tensor.
    pub fn objective<T: Element>(&self, g: &Graph<T>, v: &[Var]) -> Result<Var> {
        let out = self.output(g, v)?;
        let shape = g.shape(out);
        let mut rng: ChaCha8Rng = seed::rng(self.seed, "gradcheck.weights");
        let w = Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
        let w = g.constant(w);
        let weighted = g.mul(out, w)?;
        Ok(g.sum(weighted))
    }

    pub fn check(&self, opts: &CheckOptions) -> Result<GradCheckReport> {
        finite_diff_check_with(|g, v| self.objective(g, v), &self.inputs, opts)
    }

    /// Gradients from a 32-bit graph against 64-bit central differences.
    pub fn check_f32(&self, opts: &CheckOptions) -> Result<GradCheckReport> {
        let inst = self.rounded_to_f32();
        let g = Graph::<f32>::new();
        let vars: Vec<Var> = inst.inputs.iter().map(|t| g.param(t.cast())).collect();
        let root = inst.objective(&g, &vars)?;
        g.backward(root)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inst.inputs)
            .map(|(&v, t)| g.grad(v).map(|x| x.cast()).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        check_analytic(|g, v| inst.objective(g, v), &inst.inputs, &analytic, opts)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case: Case,
    pub seeds: usize,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub op_seeds: usize,
    pub composite_seeds: usize,
    pub precision: Precision,
    pub check: CheckOptions,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            op_seeds: 10,
            composite_seeds: 2,
            precision: Precision::F64,
            check: CheckOptions::default(),
        }
    }
}

impl Precision {
    /// Pass threshold for the max relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-4,
            Precision::F32 => 1e-2,
        }
    }
}

pub fn run_case(case: Case, seeds: usize, opts: &SuiteOptions) -> Result<CaseResult> {
    let mut report = GradCheckReport::default();
    for s in 0..seeds as u64 {
        let inst = Instance::new(case, s)?;
        let r = match opts.precision {
            Precision::F64 => inst.check(&opts.check)?,
            Precision::F32 => inst.check_f32(&opts.check)?,
        };
        report = report.merge(r);
    }
    Ok(CaseResult { case, seeds, report })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    Case::all()
        .map(|case| {
            let seeds = if Case::OPS.contains(&case) {
                opts.op_seeds
            } else {
                opts.composite_seeds
            };
            run_case(case, seeds, opts)
        })
        .collect()
}
