//! Top-K gating with an optional always-on expert.
//!
//! The selected set is the always-on expert (if any) plus the highest-logit
//! remaining experts, ties going to the lower index. Weights are a softmax over
//! the selected logits only. A gate-less site selects every expert with weight
//! `1/N`.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::runtime::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GateConfig {
    pub top_k: usize,
    pub always_on: Option<usize>,
}

/// Selected experts and their mixing weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateDecision<S> {
    pub indices: Vec<usize>,
    pub weights: Vec<S>,
}

impl<S: Scalar> GateDecision<S> {
    /// Highest-weighted expert; ties go to the lower index.
    pub fn top_expert(&self) -> usize {
        let mut best = (self.indices[0], self.weights[0]);
        for (&i, &w) in self.indices.iter().zip(&self.weights).skip(1) {
            if w > best.1 || (w == best.1 && i < best.0) {
                best = (i, w);
            }
        }
        best.0
    }

    pub fn weight_of(&self, expert: usize) -> Option<S> {
        self.indices
            .iter()
            .position(|&i| i == expert)
            .map(|p| self.weights[p])
    }

    pub fn to_f64(&self) -> GateDecision<f64> {
        GateDecision {
            indices: self.indices.clone(),
            weights: self.weights.iter().map(|w| w.as_f64()).collect(),
        }
    }
}

/// A routed site's gate: none (equal weights) or a linear router of shape `(N, hidden)`.
#[derive(Debug, Clone, Copy)]
pub enum Router<'a, S> {
    Gateless { num_experts: usize },
    Linear(&'a Matrix<S>),
}

impl<S: Scalar> Router<'_, S> {
    pub fn num_experts(&self) -> usize {
        match self {
            Router::Gateless { num_experts } => *num_experts,
            Router::Linear(m) => m.rows(),
        }
    }
}

/// Indices of the selected experts: always-on first, then by descending logit.
pub fn select_top_k<S: Scalar>(logits: &[S], top_k: usize, always_on: Option<usize>) -> Result<Vec<usize>> {
    let n = logits.len();
    if top_k == 0 {
        return Err(Error::InvalidRecipe("top_k must be at least 1".into()));
    }
    if top_k > n {
        return Err(Error::TopKTooLarge {
            top_k,
            num_experts: n,
        });
    }
    if let Some(a) = always_on {
        if a >= n {
            return Err(Error::InvalidRecipe(format!(
                "always_on expert {a} out of range for {n} experts"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| Some(i) != always_on).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = Vec::with_capacity(top_k);
    if let Some(a) = always_on {
        selected.push(a);
    }
    selected.extend(order.into_iter().take(top_k - selected.len()));
    Ok(selected)
}

pub fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gate decision plus the full logit vector (empty for gate-less sites).
pub fn gate_with_logits<S: Scalar>(
    router: Router<'_, S>,
    x: &[S],
    cfg: &GateConfig,
) -> Result<(GateDecision<S>, Vec<S>)> {
    match router {
        Router::Gateless { num_experts } => {
            if num_experts == 0 {
                return Err(Error::InvalidRecipe("no experts".into()));
            }
            let w = S::one() / S::from_usize(num_experts).unwrap();
            Ok((
                GateDecision {
                    indices: (0..num_experts).collect(),
                    weights: vec![w; num_experts],
                },
                Vec::new(),
            ))
        }
        Router::Linear(r) => {
            if r.cols() != x.len() {
                return Err(Error::Shape(format!(
                    "router expects hidden size {}, got {}",
                    r.cols(),
                    x.len()
                )));
            }
            let logits = r.matvec(x);
            let indices = select_top_k(&logits, cfg.top_k, cfg.always_on)?;
            let sel: Vec<S> = indices.iter().map(|&i| logits[i]).collect();
            let weights = softmax(&sel);
            Ok((GateDecision { indices, weights }, logits))
        }
    }
}

pub fn gate<S: Scalar>(router: Router<'_, S>, x: &[S], cfg: &GateConfig) -> Result<GateDecision<S>> {
    gate_with_logits(router, x, cfg).map(|(d, _)| d)
}
