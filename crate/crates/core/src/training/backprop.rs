//! Reverse-mode gradients of the LM loss with respect to routers and the embedding.
//!
//! Every other weight is frozen, so only activation gradients are propagated
//! through them. Top-K selection is treated as piecewise constant: gradients
//! reach a router only through the softmax over its selected logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::naming::{self, Proj, Site};
use crate::runtime::attention::{attention_backward, rmsnorm_backward, AttnShape};
use crate::runtime::ffn::{silu, silu_grad, ExpertRef, FfnRouting, MoeFfn, SwigluParts};
use crate::runtime::gate::GateDecision;
use crate::runtime::linalg::{axpy, dot, Matrix};
use crate::runtime::model::{AttnBlock, AttnForward, FfnBlock, FfnForward, Model};
use crate::scalar::Scalar;
use crate::training::data::Batch;
use crate::training::loss::lm_loss_grad;

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    Router,
    RouterPlusEmbed,
}

/// Gradients keyed by canonical parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<S> {
    pub grads: BTreeMap<String, Matrix<S>>,
}

impl<S: Scalar> GradMap<S> {
    /// Zero gradients for every trainable parameter of `model`.
    pub fn zeros(model: &Model<S>, trainable: Trainable) -> Result<Self> {
        let names = trainable_names(model, trainable)?;
        let grads = names
            .into_iter()
            .map(|n| {
                let p = model.param(&n).expect("listed parameter exists");
                let z = Matrix::zeros(p.rows(), p.cols());
                (n, z)
            })
            .collect();
        Ok(GradMap { grads })
    }

    pub fn zeros_like(&self) -> Self {
        GradMap {
            grads: self
                .grads
                .iter()
                .map(|(k, g)| (k.clone(), Matrix::zeros(g.rows(), g.cols())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<S>> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    /// `self += c · other`
    pub fn add_scaled(&mut self, c: S, other: &GradMap<S>) {
        for (k, g) in &mut self.grads {
            if let Some(o) = other.grads.get(k) {
                axpy(g.as_mut_slice(), c, o.as_slice());
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        self.grads.values_mut().for_each(|g| g.scale(c));
    }

    fn router_mut(&mut self, l: usize, site: Site) -> Option<&mut Matrix<S>> {
        self.grads.get_mut(&naming::router(l, site))
    }
}

/// Trainable parameter names of `model` in canonical order.
pub fn trainable_names<S: Scalar>(model: &Model<S>, trainable: Trainable) -> Result<Vec<String>> {
    let mut names = model.router_names();
    if names.is_empty() {
        return Err(Error::NothingToTrain(
            "the model has no routers (dense or gate-less)".into(),
        ));
    }
    if trainable == Trainable::RouterPlusEmbed {
        names.insert(0, naming::EMBED.to_string());
    }
    Ok(names)
}

/// Back through `w = softmax(R[sel] · x)`, given `dw` for the selected experts.
fn gate_backward<S: Scalar>(
    router: &Matrix<S>,
    x: &[S],
    d: &GateDecision<S>,
    dw: &[S],
    d_router: Option<&mut Matrix<S>>,
    dx: &mut [S],
) {
    let s: S = d.weights.iter().zip(dw).map(|(&w, &g)| w * g).sum();
    let dz: Vec<S> = d.weights.iter().zip(dw).map(|(&w, &g)| w * (g - s)).collect();
    if let Some(dr) = d_router {
        for (&i, &z) in d.indices.iter().zip(&dz) {
            axpy(dr.row_mut(i), z, x);
        }
    }
    for (&i, &z) in d.indices.iter().zip(&dz) {
        axpy(dx, z, router.row(i));
    }
}

/// Back through one SwiGLU evaluation whose output gradient is `dy`; adds into `dx`.
fn swiglu_backward<S: Scalar>(e: ExpertRef<'_, S>, p: &SwigluParts<S>, dy: &[S], dx: &mut [S]) {
    let dh = e.project_t(Proj::Down, dy);
    let da: Vec<S> = (0..dh.len()).map(|j| dh[j] * p.u[j] * silu_grad(p.a[j])).collect();
    let du: Vec<S> = (0..dh.len()).map(|j| dh[j] * silu(p.a[j])).collect();
    axpy(dx, S::one(), &e.project_t(Proj::Gate, &da));
    axpy(dx, S::one(), &e.project_t(Proj::Up, &du));
}

fn moe_backward<S: Scalar>(
    l: usize,
    m: &MoeFfn<S>,
    fw: &FfnForward<S>,
    x: &[S],
    dy: &[S],
    grads: &mut GradMap<S>,
) -> Result<Vec<S>> {
    let mut dx = vec![S::zero(); x.len()];
    match (fw, &m.routing) {
        (FfnForward::Moe(d, parts), routing) => {
            let mut dw = Vec::with_capacity(parts.len());
            for ((&i, &w), p) in d.indices.iter().zip(&d.weights).zip(parts) {
                dw.push(dot(dy, &p.y));
                let dyi: Vec<S> = dy.iter().map(|&v| v * w).collect();
                swiglu_backward(m.expert(i)?, p, &dyi, &mut dx);
            }
            if let FfnRouting::Ffn(Some(r)) = routing {
                gate_backward(r, x, d, &dw, grads.router_mut(l, Site::Ffn), &mut dx);
            }
        }
        (FfnForward::Fgmlp(p), routing) => {
            let [dg_dec, du_dec, dd_dec] = &p.decisions;
            let mut dh = vec![S::zero(); p.h.len()];
            let mut dw_down = Vec::with_capacity(dd_dec.indices.len());
            for ((&i, &w), out) in dd_dec.indices.iter().zip(&dd_dec.weights).zip(&p.d_out) {
                dw_down.push(dot(dy, out));
                axpy(&mut dh, w, &m.expert(i)?.project_t(Proj::Down, dy));
            }
            let dg: Vec<S> = (0..dh.len()).map(|j| dh[j] * p.u[j] * silu_grad(p.g[j])).collect();
            let du: Vec<S> = (0..dh.len()).map(|j| dh[j] * silu(p.g[j])).collect();
            let mut dw_gate = Vec::with_capacity(dg_dec.indices.len());
            for ((&i, &w), out) in dg_dec.indices.iter().zip(&dg_dec.weights).zip(&p.g_out) {
                dw_gate.push(dot(&dg, out));
                axpy(&mut dx, w, &m.expert(i)?.project_t(Proj::Gate, &dg));
            }
            let mut dw_up = Vec::with_capacity(du_dec.indices.len());
            for ((&i, &w), out) in du_dec.indices.iter().zip(&du_dec.weights).zip(&p.u_out) {
                dw_up.push(dot(&du, out));
                axpy(&mut dx, w, &m.expert(i)?.project_t(Proj::Up, &du));
            }
            if let FfnRouting::Fgmlp(Some([rg, ru, rd])) = routing {
                gate_backward(rg, x, dg_dec, &dw_gate, grads.router_mut(l, Site::FfnGate), &mut dx);
                gate_backward(ru, x, du_dec, &dw_up, grads.router_mut(l, Site::FfnUp), &mut dx);
                gate_backward(rd, x, dd_dec, &dw_down, grads.router_mut(l, Site::FfnDown), &mut dx);
            }
        }
        (FfnForward::Dense(_), _) => unreachable!("dense cache in a mixture layer"),
    }
    Ok(dx)
}

/// Loss, gradients of every trainable parameter, and the number of loss positions.
pub fn grad_with_loss<S: Scalar>(model: &Model<S>, batch: &Batch, trainable: Trainable) -> Result<(S, GradMap<S>, usize)> {
    let mut grads = GradMap::zeros(model, trainable)?;
    let f = model.run(&batch.inputs, true)?;
    let cache = f.cache.expect("cache requested");
    let (loss, dlogits, count) = lm_loss_grad(&f.logits, &batch.targets, &batch.mask)?;
    let shape = AttnShape::of(&model.arch);
    let n = batch.inputs.len();

    // Layers below the lowest router only matter for the embedding gradient.
    let lowest = match trainable {
        Trainable::RouterPlusEmbed => 0,
        Trainable::Router => grads
            .names()
            .filter_map(|k| crate::runtime::model::parse_router_name(k).map(|(l, _)| l))
            .min()
            .unwrap_or(0),
    };

    let mut dx: Vec<Vec<S>> = (0..n)
        .map(|t| {
            let dxn = model.lm_head.matvec_t(dlogits.row(t));
            rmsnorm_backward(&cache.x_final[t], &model.final_norm, cache.final_inv[t], &dxn)
        })
        .collect();

    for l in (lowest..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let lc = &cache.layers[l];
        // FFN sub-block: x_out = h + ffn(norm(h))
        let mut dh = dx.clone();
        for t in 0..n {
            let dxf = match &layer.ffn {
                FfnBlock::Dense(w) => {
                    let FfnForward::Dense(p) = &lc.ffn[t] else {
                        unreachable!("mixture cache in a dense layer")
                    };
                    let mut d = vec![S::zero(); lc.xf[t].len()];
                    swiglu_backward(ExpertRef::Full(w), p, &dx[t], &mut d);
                    d
                }
                FfnBlock::Moe(m) => moe_backward(l, m, &lc.ffn[t], &lc.xf[t], &dx[t], &mut grads)?,
            };
            let back = rmsnorm_backward(&lc.h[t], &layer.ffn_norm, lc.ffn_inv[t], &dxf);
            axpy(&mut dh[t], S::one(), &back);
        }
        // attention sub-block: h = x_in + attn(norm(x_in))
        let dxa = match (&layer.attn, &lc.attn) {
            (AttnBlock::Dense(w), AttnForward::Dense(c)) => attention_backward(w, c, &dh, shape, &model.rope),
            (AttnBlock::Mixed(m), AttnForward::Mixed { decisions, experts }) => {
                let mut dxa = vec![vec![S::zero(); model.arch.hidden_size]; n];
                for (i, slot) in experts.iter().enumerate() {
                    let Some((_, c)) = slot else { continue };
                    let d_out: Vec<Vec<S>> = (0..n)
                        .map(|t| match decisions[t].weight_of(i) {
                            Some(w) => dh[t].iter().map(|&v| v * w).collect(),
                            None => vec![S::zero(); dh[t].len()],
                        })
                        .collect();
                    let back = attention_backward(&m.experts[i], c, &d_out, shape, &model.rope);
                    for (acc, b) in dxa.iter_mut().zip(&back) {
                        axpy(acc, S::one(), b);
                    }
                }
                if let Some(r) = &m.router {
                    for t in 0..n {
                        let d = &decisions[t];
                        let dw: Vec<S> = d
                            .indices
                            .iter()
                            .map(|&i| dot(&dh[t], &experts[i].as_ref().unwrap().0[t]))
                            .collect();
                        gate_backward(r, &lc.xa[t], d, &dw, grads.router_mut(l, Site::Attn), &mut dxa[t]);
                    }
                }
                dxa
            }
            _ => unreachable!("attention cache does not match the block"),
        };
        for t in 0..n {
            let back = rmsnorm_backward(&lc.x_in[t], &layer.attn_norm, lc.attn_inv[t], &dxa[t]);
            axpy(&mut dh[t], S::one(), &back);
        }
        dx = dh;
    }

    if let Some(de) = grads.grads.get_mut(naming::EMBED) {
        for (t, &tok) in batch.inputs.iter().enumerate() {
            axpy(de.row_mut(tok as usize), S::one(), &dx[t]);
        }
    }
    Ok((loss, grads, count))
}

/// Gradients of the loss of `batch` for the trainable parameters.
pub fn grad<S: Scalar>(model: &Model<S>, batch: &Batch, trainable: Trainable) -> Result<GradMap<S>> {
    grad_with_loss(model, batch, trainable).map(|(_, g, _)| g)
}
