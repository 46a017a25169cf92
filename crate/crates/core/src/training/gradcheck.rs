//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::runtime::model::Model;
use crate::training::backprop::{grad, GradMap, Trainable};
use crate::training::data::Batch;
use crate::training::loss::lm_loss;

/// Below this magnitude gradients are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Minimum number of entries sampled when a model has more.
pub const MIN_SAMPLES: usize = 64;

/// One checked gradient entry.
#[derive(Debug, Clone, Serialize)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation changed some top-K selection.
    pub skipped: usize,
    pub worst: Option<EntryCheck>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
    (a - n).abs() / denom
}

fn selections(model: &Model<f64>, tokens: &[u32]) -> Result<Vec<Vec<usize>>> {
    let (_, trace) = model.forward(tokens)?;
    Ok(trace.records.into_iter().map(|r| r.decision.indices).collect())
}

fn loss_of(model: &Model<f64>, batch: &Batch) -> Result<f64> {
    let (logits, _) = model.forward(&batch.inputs)?;
    lm_loss(&logits, &batch.targets, &batch.mask)
}

/// `(param, index)` pairs to check: all entries, or a seeded sample of at least
/// `samples` (and never fewer than [`MIN_SAMPLES`]).
pub fn sample_entries(grads: &GradMap<f64>, samples: usize, seed: u64) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = grads
        .grads
        .iter()
        .flat_map(|(k, g)| (0..g.as_slice().len()).map(move |i| (k.clone(), i)))
        .collect();
    let want = samples.max(MIN_SAMPLES);
    if all.len() <= want {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, all.len(), want).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

/// Compare `analytic` against central differences of the forward loss on `entries`.
pub fn compare_gradients(
    model: &Model<f64>,
    batch: &Batch,
    analytic: &GradMap<f64>,
    entries: &[(String, usize)],
    eps: f64,
) -> Result<GradCheckReport> {
    let base_sel = selections(model, &batch.inputs)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for (name, index) in entries {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::NothingToTrain(format!("no gradient for {name}")))?
            .as_slice()[*index];
        let orig = probe.param(name).expect("trainable parameter").as_slice()[*index];
        let mut eval = |v: f64| -> Result<(f64, bool)> {
            probe.param_mut(name).unwrap().as_mut_slice()[*index] = v;
            let same = selections(&probe, &batch.inputs)? == base_sel;
            Ok((loss_of(&probe, batch)?, same))
        };
        let (lp, same_p) = eval(orig + eps)?;
        let (lm, same_m) = eval(orig - eps)?;
        probe.param_mut(name).unwrap().as_mut_slice()[*index] = orig;
        if !(same_p && same_m) {
            report.skipped += 1;
            continue;
        }
        let n = (lp - lm) / (2.0 * eps);
        let e = rel_error(a, n);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(EntryCheck {
                param: name.clone(),
                index: *index,
                analytic: a,
                numeric: n,
                rel_error: e,
            });
        }
    }
    Ok(report)
}

/// Analytic gradients of `model` checked against central differences.
pub fn finite_diff_check(
    model: &Model<f64>,
    batch: &Batch,
    trainable: Trainable,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = grad(model, batch, trainable)?;
    let entries = sample_entries(&analytic, samples, seed);
    compare_gradients(model, batch, &analytic, &entries, eps)
}
