//! Deep-supervision loss, AdamW with a cosine schedule, the training loop
//! and held-out evaluation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::io;
use crate::metrics::{confusion, uncertainty_visual, Confusion};
use crate::model::{Predictions, UaNet};
use crate::ops::{upsample_tensor, UpsampleMode};
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::seed;
use crate::synth::Scene;
use crate::tensor::{Element, Tensor};

/// Sum of BCE terms, one per prediction level, each map bilinearly upsampled
/// to the mask extent. Returns the total and the per-level terms.
pub fn deep_supervision_loss<T: Element>(
    g: &Graph<T>,
    preds: &Predictions,
    gt: Var,
) -> Result<(Var, Vec<(usize, Var)>)> {
    let gs = g.shape(gt);
    let fs = g.shape(preds.final_map());
    if gs != fs {
        return Err(TensorError::Shape(format!(
            "ground truth {gs:?} must match the finest prediction {fs:?}"
        )));
    }
    let mut terms = Vec::with_capacity(preds.maps.len());
    for &(level, m) in &preds.maps {
        let ms = g.shape(m);
        let factor = gs[1] / ms[1];
        if factor == 0 || ms[1] * factor != gs[1] || ms[2] * factor != gs[2] {
            return Err(TensorError::Shape(format!(
                "M{level} {ms:?} does not divide the mask extent {gs:?}"
            )));
        }
        let up = if factor == 1 {
            m
        } else {
            g.upsample(m, factor, UpsampleMode::Bilinear)?
        };
        terms.push((level, g.bce_with_logits(up, gt)?));
    }
    let mut total = terms[0].1;
    for &(_, t) in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

/// `0.5 * (1 + cos(pi * step / total))`, clamped to `[0, 1]`.
pub fn cosine_factor(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 300,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Config(format!(
                "optim: need lr > 0, weight_decay >= 0, betas in [0, 1), eps > 0, batch_size > 0; got {self:?}"
            )))
        }
    }
}

/// AdamW state: first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    pub step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr * cosine_factor(self.step, self.cfg.steps)
    }

    /// One update of `params` from `grads`, then advances the step counter.
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(TensorError::Contract(format!(
                "optimizer holds {} buffers, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let t = self.step as i32 + 1;
        let c = &self.cfg;
        let lr = T::from_f64_lossy(self.lr());
        let decay = T::one() - lr * T::from_f64_lossy(c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = T::from_f64_lossy(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(TensorError::Contract(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let (values, grads) = store.values_and_grads_mut();
        self.apply(values, grads)
    }
}

/// Random horizontal and vertical flips applied identically to image and mask.
pub fn augment<T: Element>(scene: &Scene<T>, rng: &mut impl Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut image, mut mask) = (scene.image.clone(), scene.mask.clone());
    if rng.gen_bool(0.5) {
        image = image.flip_horizontal()?;
        mask = mask.flip_horizontal()?;
    }
    if rng.gen_bool(0.5) {
        image = image.flip_vertical()?;
        mask = mask.flip_vertical()?;
    }
    Ok((image, mask))
}

/// Seeded sampling order: a fresh permutation per pass over the data.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        BatchSampler {
            rng: seed::rng(seed, "batch"),
            order: (0..len).collect(),
            cursor: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// `(level, loss)`, coarse to fine.
    pub levels: Vec<(usize, f64)>,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from("step,lr,loss");
    if let Some(first) = rows.first() {
        for (l, _) in &first.levels {
            write!(out, ",m{l}").unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{:e},{:e}", r.step, r.lr, r.loss).unwrap();
        for (_, v) in &r.levels {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub seed: u64,
    pub augment: bool,
    pub exec: Exec,
    /// Where to write the last good weights if training diverges.
    pub rescue: Option<PathBuf>,
}

impl TrainOptions {
    pub fn new(optim: OptimConfig, seed: u64) -> Self {
        TrainOptions {
            optim,
            seed,
            augment: true,
            exec: Exec::default(),
            rescue: None,
        }
    }
}

/// Returned by the per-step observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

struct SampleResult<T> {
    loss: f64,
    levels: Vec<(usize, f64)>,
    grads: Vec<Tensor<T>>,
}

fn sample_gradient<T: Element>(
    net: &UaNet,
    store: &ParamStore<T>,
    image: Tensor<T>,
    mask: Tensor<T>,
) -> Result<SampleResult<T>> {
    let g = Graph::new();
    let p = store.bind(&g);
    let x = g.constant(image);
    let gt = g.constant(mask);
    let preds = net.forward(&g, &p, x)?;
    let (total, terms) = deep_supervision_loss(&g, &preds, gt)?;
    let scalar = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let loss = scalar(total);
    let levels = terms.iter().map(|&(l, v)| (l, scalar(v))).collect();
    if !loss.is_finite() {
        return Ok(SampleResult {
            loss,
            levels,
            grads: Vec::new(),
        });
    }
    g.backward(total)?;
    Ok(SampleResult {
        loss,
        levels,
        grads: store.collect_grads(&g, &p),
    })
}

/// Mean loss and gradient over `batch`; leaves the averaged gradient in `store`.
pub fn batch_gradient<T: Element>(
    net: &UaNet,
    store: &mut ParamStore<T>,
    batch: &[(Tensor<T>, Tensor<T>)],
    exec: Exec,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let shared: &ParamStore<T> = store;
    let results = exec
        .map(batch.len(), |i| {
            let (img, mask) = &batch[i];
            sample_gradient(net, shared, img.clone(), mask.clone())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    let mut levels = results[0].levels.clone();
    for (k, lv) in levels.iter_mut().enumerate() {
        lv.1 = results.iter().map(|r| r.levels[k].1).sum::<f64>() / n;
    }
    store.zero_grad();
    if loss.is_finite() {
        let scale = T::from_f64_lossy(1.0 / n);
        for r in &results {
            store.accumulate_grads(&r.grads, scale);
        }
    }
    Ok((loss, levels))
}

pub fn save_checkpoint<T: Element>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    io::write_archive(path, &store.to_named())
}

pub fn load_checkpoint<T: Element>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    store.load_named(&io::read_archive(path)?)
}

/// Runs `opts.optim.steps` AdamW steps. `observe(step, store)` is called
/// after each update and may stop training early.
pub fn train<T: Element>(
    net: &UaNet,
    store: &mut ParamStore<T>,
    scenes: &[Scene<T>],
    opts: &TrainOptions,
    mut observe: impl FnMut(usize, &ParamStore<T>) -> Control,
) -> Result<Vec<LogRow>> {
    opts.optim.validate()?;
    if scenes.is_empty() {
        return Err(TensorError::Contract("training needs at least one scene".into()));
    }
    let mut optim = AdamW::new(opts.optim.clone(), store);
    let mut sampler = BatchSampler::new(scenes.len(), opts.seed);
    let mut aug_rng = seed::rng(opts.seed, "augment");
    let mut last_good: Option<Vec<Tensor<T>>> = None;
    let mut log = Vec::with_capacity(opts.optim.steps);

    for step in 0..opts.optim.steps {
        let batch = sampler
            .next_batch(opts.optim.batch_size)
            .into_iter()
            .map(|i| {
                if opts.augment {
                    augment(&scenes[i], &mut aug_rng)
                } else {
                    Ok((scenes[i].image.clone(), scenes[i].mask.clone()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, levels) = match batch_gradient(net, store, &batch, opts.exec) {
            Ok(r) => r,
            Err(TensorError::NonFinite(_)) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            let rescue = match (&last_good, &opts.rescue) {
                (Some(values), Some(path)) => {
                    let mut good = store.clone();
                    for (id, v) in good.ids().collect::<Vec<_>>().into_iter().zip(values) {
                        *good.value_mut(id) = v.clone();
                    }
                    save_checkpoint(path, &good)?;
                    format!(
                        "last good weights (before step {}) written to {}",
                        step - 1,
                        path.display()
                    )
                }
                (Some(_), None) => format!("last good weights are those before step {}", step - 1),
                (None, _) => "no step completed with a finite loss".to_string(),
            };
            return Err(TensorError::Diverged {
                step,
                msg: format!("loss is {loss}; {rescue}"),
            });
        }
        last_good = Some(store.values().to_vec());
        log.push(LogRow {
            step,
            lr: optim.lr(),
            loss,
            levels,
        });
        optim.step(store)?;
        if observe(step, store) == Control::Stop {
            break;
        }
    }
    Ok(log)
}

/// Per-level confusion and mean uncertainty over a set of scenes. Each map
/// is bilinearly upsampled to the mask extent before thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelEval {
    pub level: usize,
    pub confusion: Confusion,
    pub mean_uncertainty: f64,
}

pub fn predict_full_res<T: Element>(
    net: &UaNet,
    store: &ParamStore<T>,
    image: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let (_, h, _) = image.chw()?;
    net.predict(store, image)?
        .into_iter()
        .map(|(l, m)| {
            let f = h / m.shape()[1];
            Ok((
                l,
                if f == 1 {
                    m
                } else {
                    upsample_tensor(&m, f, UpsampleMode::Bilinear)?
                },
            ))
        })
        .collect()
}

pub fn evaluate<T: Element>(
    net: &UaNet,
    store: &ParamStore<T>,
    scenes: &[Scene<T>],
    exec: Exec,
) -> Result<Vec<LevelEval>> {
    let per_scene = exec
        .map(scenes.len(), |i| -> Result<Vec<(usize, Confusion, f64)>> {
            predict_full_res(net, store, &scenes[i].image)?
                .into_iter()
                .map(|(l, m)| Ok((l, confusion(&m, &scenes[i].mask)?, uncertainty_visual(&m).1)))
                .collect()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = per_scene.first() else {
        return Ok(Vec::new());
    };
    let n = per_scene.len() as f64;
    Ok((0..first.len())
        .map(|k| LevelEval {
            level: first[k].0,
            confusion: per_scene.iter().map(|s| s[k].1).sum(),
            mean_uncertainty: per_scene.iter().map(|s| s[k].2).sum::<f64>() / n,
        })
        .collect())
}
