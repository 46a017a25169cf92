//! Router training loop with gradient accumulation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::model::Model;
use crate::scalar::{lit, Scalar};
use crate::tensorstore::{Tensor, TensorMap};
use crate::training::backprop::{grad_with_loss, trainable_names, GradMap, Trainable};
use crate::training::data::{Batch, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// `p -= lr · g`
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub trainable: Trainable,
    pub regime: Regime,
    pub epochs: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Keep corpus order instead of shuffling.
    pub no_shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            trainable: Trainable::Router,
            regime: Regime::Instruct,
            epochs: 1,
            batch_size: 1,
            grad_accum_steps: 16,
            learning_rate: 1e-4,
            schedule: Schedule::Constant,
            optimizer: Optimizer::Sgd,
            seed: 0,
            no_shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a non-negative number");
        }
        Ok(())
    }

    fn lr_at(&self, _step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,tokens_seen\n");
        for p in &self.points {
            writeln!(s, "{},{},{},{}", p.step, p.loss, p.lr, p.tokens_seen).unwrap();
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }
}

/// Trailing moving average over `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

struct AdamState<S> {
    m: GradMap<S>,
    v: GradMap<S>,
    t: i32,
}

/// Token-weighted loss and gradient over `batches`, reduced in index order.
pub fn window_gradient<S: Scalar>(
    model: &Model<S>,
    batches: &[&Batch],
    trainable: Trainable,
) -> Result<(f64, GradMap<S>, usize)> {
    let parts: Vec<(S, GradMap<S>, usize)> = batches
        .par_iter()
        .map(|b| grad_with_loss(model, b, trainable))
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.2).sum();
    let inv = S::one() / S::from_usize(total).unwrap();
    let mut acc = GradMap::zeros(model, trainable)?;
    let mut loss = S::zero();
    for (l, g, n) in &parts {
        let w = S::from_usize(*n).unwrap() * inv;
        acc.add_scaled(w, g);
        loss += *l * w;
    }
    Ok((loss.as_f64(), acc, total))
}

fn apply_step<S: Scalar>(
    model: &mut Model<S>,
    grads: &GradMap<S>,
    lr: f64,
    opt: &Optimizer,
    adam: &mut Option<AdamState<S>>,
) {
    match *opt {
        Optimizer::Sgd => {
            let lr: S = lit(lr);
            for (name, g) in &grads.grads {
                let p = model.param_mut(name).expect("trainable parameter");
                for (pv, &gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = adam.get_or_insert_with(|| AdamState {
                m: grads.zeros_like(),
                v: grads.zeros_like(),
                t: 0,
            });
            st.t += 1;
            let (b1, b2): (S, S) = (lit(beta1), lit(beta2));
            let c1 = S::one() - b1.powi(st.t);
            let c2 = S::one() - b2.powi(st.t);
            let (lr, eps): (S, S) = (lit(lr), lit(eps));
            for (name, g) in &grads.grads {
                let m = st.m.grads.get_mut(name).unwrap().as_mut_slice();
                let v = st.v.grads.get_mut(name).unwrap().as_mut_slice();
                let p = model.param_mut(name).expect("trainable parameter").as_mut_slice();
                for j in 0..p.len() {
                    let gv = g.as_slice()[j];
                    m[j] = b1 * m[j] + (S::one() - b1) * gv;
                    v[j] = b2 * v[j] + (S::one() - b2) * gv * gv;
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    p[j] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Train the routers (and optionally the embedding); every other weight is untouched.
pub fn train_routers<S: Scalar>(model: &Model<S>, corpus: &[Batch], cfg: &TrainConfig) -> Result<(Model<S>, LossCurve)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    trainable_names(model, cfg.trainable)?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = LossCurve::default();
    let mut adam = None;
    let mut tokens_seen = 0;
    let window = cfg.batch_size * cfg.grad_accum_steps;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        if !cfg.no_shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(window) {
            let batches: Vec<&Batch> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, grads, _) = window_gradient(&model, &batches, cfg.trainable)?;
            let step = curve.points.len();
            let lr = cfg.lr_at(step);
            tokens_seen += batches.iter().map(|b| b.inputs.len()).sum::<usize>();
            apply_step(&mut model, &grads, lr, &cfg.optimizer, &mut adam);
            curve.points.push(LossPoint {
                step: step + 1,
                loss,
                lr,
                tokens_seen,
            });
        }
    }
    Ok((model, curve))
}

/// Copy the trained parameters of `model` into `ckpt`, keeping each tensor's
/// stored dtype. Every other tensor stays byte-identical.
pub fn write_trained<S: Scalar>(ckpt: &TensorMap, model: &Model<S>, trainable: Trainable) -> Result<TensorMap> {
    let mut out = ckpt.clone();
    for name in trainable_names(model, trainable)? {
        let old = ckpt.require(&name)?;
        let p = model.param(&name).expect("trainable parameter");
        if old.to_vec::<S>() == p.as_slice() {
            continue;
        }
        let values: Vec<f64> = p.as_slice().iter().map(|v| v.as_f64()).collect();
        out.replace(name, Tensor::encode(old.dtype(), old.shape().to_vec(), &values));
    }
    Ok(out)
}
