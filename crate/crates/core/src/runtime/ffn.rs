//! SwiGLU feed-forward experts and the routed FFN layers built from them.

use crate::error::{Error, Result};
use crate::naming::{Proj, Site};
use crate::runtime::gate::{gate, GateConfig, GateDecision, Router};
use crate::runtime::linalg::{axpy, Matrix};
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// d silu / dx
#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<S> {
    /// `(intermediate, hidden)`
    pub gate: Matrix<S>,
    /// `(intermediate, hidden)`
    pub up: Matrix<S>,
    /// `(hidden, intermediate)`
    pub down: Matrix<S>,
}

impl<S: Scalar> FfnWeights<S> {
    pub fn new(gate: Matrix<S>, up: Matrix<S>, down: Matrix<S>) -> Result<Self> {
        let w = FfnWeights { gate, up, down };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<()> {
        let (f, h) = (self.gate.rows(), self.gate.cols());
        if self.up.rows() != f || self.up.cols() != h || self.down.rows() != h || self.down.cols() != f {
            return Err(Error::Shape(format!(
                "ffn projections disagree: gate {}x{}, up {}x{}, down {}x{}",
                f,
                h,
                self.up.rows(),
                self.up.cols(),
                self.down.rows(),
                self.down.cols()
            )));
        }
        Ok(())
    }

    pub fn proj(&self, p: Proj) -> &Matrix<S> {
        match p {
            Proj::Gate => &self.gate,
            Proj::Up => &self.up,
            Proj::Down => &self.down,
        }
    }

    pub fn hidden(&self) -> usize {
        self.gate.cols()
    }
}

/// Low-rank update `(alpha / r) · B · A` on one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraProj<S> {
    /// `(r, in)`
    pub a: Matrix<S>,
    /// `(out, r)`
    pub b: Matrix<S>,
}

/// Adapter over the three FFN projections; a missing projection is unadapted.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFfn<S> {
    pub gate: Option<LoraProj<S>>,
    pub up: Option<LoraProj<S>>,
    pub down: Option<LoraProj<S>>,
    /// `alpha / r`
    pub scale: S,
}

impl<S: Scalar> LoraFfn<S> {
    pub fn proj(&self, p: Proj) -> Option<&LoraProj<S>> {
        match p {
            Proj::Gate => self.gate.as_ref(),
            Proj::Up => self.up.as_ref(),
            Proj::Down => self.down.as_ref(),
        }
    }

    /// Check adapter dims against the base projections.
    pub fn check(&self, base: &FfnWeights<S>) -> Result<()> {
        for p in Proj::ALL {
            let Some(lp) = self.proj(p) else { continue };
            let w = base.proj(p);
            let r = lp.a.rows();
            if r == 0 {
                return Err(Error::BadLora(format!("{} adapter has rank 0", p.as_str())));
            }
            if lp.a.cols() != w.cols() || lp.b.rows() != w.rows() || lp.b.cols() != r {
                return Err(Error::BadLora(format!(
                    "{} adapter A {}x{}, B {}x{} does not fit base {}x{}",
                    p.as_str(),
                    lp.a.rows(),
                    lp.a.cols(),
                    lp.b.rows(),
                    lp.b.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }
}

/// One expert slot's FFN.
#[derive(Debug, Clone, PartialEq)]
pub enum Expert<S> {
    Full(FfnWeights<S>),
    /// Applied on top of the layer's retained base FFN.
    Lora(LoraFfn<S>),
}

/// A concrete set of three projections to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum ExpertRef<'a, S> {
    Full(&'a FfnWeights<S>),
    Lora {
        base: &'a FfnWeights<S>,
        adapter: &'a LoraFfn<S>,
    },
}

impl<S: Scalar> ExpertRef<'_, S> {
    /// `W_p · x` (plus the low-rank term for adapters).
    pub fn project(&self, p: Proj, x: &[S]) -> Vec<S> {
        match self {
            ExpertRef::Full(w) => w.proj(p).matvec(x),
            ExpertRef::Lora { base, adapter } => {
                let mut y = base.proj(p).matvec(x);
                if let Some(lp) = adapter.proj(p) {
                    let ax = lp.a.matvec(x);
                    let bax = lp.b.matvec(&ax);
                    axpy(&mut y, adapter.scale, &bax);
                }
                y
            }
        }
    }

    /// `W_pᵀ · dy` (plus the low-rank term for adapters).
    pub fn project_t(&self, p: Proj, dy: &[S]) -> Vec<S> {
        match self {
            ExpertRef::Full(w) => w.proj(p).matvec_t(dy),
            ExpertRef::Lora { base, adapter } => {
                let mut dx = base.proj(p).matvec_t(dy);
                if let Some(lp) = adapter.proj(p) {
                    let bt = lp.b.matvec_t(dy);
                    let abt = lp.a.matvec_t(&bt);
                    axpy(&mut dx, adapter.scale, &abt);
                }
                dx
            }
        }
    }
}

/// Intermediate values of one SwiGLU evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct SwigluParts<S> {
    /// gate pre-activation
    pub a: Vec<S>,
    pub u: Vec<S>,
    /// `silu(a) ⊙ u`
    pub h: Vec<S>,
    pub y: Vec<S>,
}

pub fn swiglu_parts<S: Scalar>(e: ExpertRef<'_, S>, x: &[S]) -> SwigluParts<S> {
    let a = e.project(Proj::Gate, x);
    let u = e.project(Proj::Up, x);
    let h: Vec<S> = a.iter().zip(&u).map(|(&ai, &ui)| silu(ai) * ui).collect();
    let y = e.project(Proj::Down, &h);
    SwigluParts { a, u, h, y }
}

/// `down · (silu(gate · x) ⊙ (up · x))`
pub fn ffn_forward<S: Scalar>(w: &FfnWeights<S>, x: &[S]) -> Result<Vec<S>> {
    w.check()?;
    if x.len() != w.hidden() {
        return Err(Error::Shape(format!(
            "ffn input has {} entries, expected {}",
            x.len(),
            w.hidden()
        )));
    }
    Ok(swiglu_parts(ExpertRef::Full(w), x).y)
}

/// SwiGLU over base projections each shifted by `(alpha/r)·B·A`.
pub fn lora_expert_forward<S: Scalar>(base: &FfnWeights<S>, adapter: &LoraFfn<S>, x: &[S]) -> Result<Vec<S>> {
    base.check()?;
    adapter.check(base)?;
    if x.len() != base.hidden() {
        return Err(Error::Shape(format!(
            "ffn input has {} entries, expected {}",
            x.len(),
            base.hidden()
        )));
    }
    Ok(swiglu_parts(ExpertRef::Lora { base, adapter }, x).y)
}

/// Routers of one FFN layer. `None` means gate-less.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnRouting<S> {
    /// One decision per token for the whole expert FFN.
    Ffn(Option<Matrix<S>>),
    /// Independent decisions for the gate, up and down projections.
    Fgmlp(Option<[Matrix<S>; 3]>),
}

/// Counts expert work so the sparsity contract is observable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounter {
    /// Whole expert FFN evaluations (FFN granularity).
    pub expert_ffn: usize,
    /// Single expert projection evaluations (fine-grained granularity).
    pub expert_proj: usize,
}

/// A mixture-of-experts FFN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeFfn<S> {
    pub experts: Vec<Expert<S>>,
    /// Base FFN retained for LoRA experts.
    pub base: Option<FfnWeights<S>>,
    pub routing: FfnRouting<S>,
    pub cfg: GateConfig,
}

impl<S: Scalar> MoeFfn<S> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, i: usize) -> Result<ExpertRef<'_, S>> {
        match &self.experts[i] {
            Expert::Full(w) => Ok(ExpertRef::Full(w)),
            Expert::Lora(adapter) => {
                let base = self
                    .base
                    .as_ref()
                    .ok_or_else(|| Error::BadLora("LoRA expert without a retained base FFN".into()))?;
                Ok(ExpertRef::Lora { base, adapter })
            }
        }
    }

    pub fn router(&self, site: Site) -> Result<Router<'_, S>> {
        let n = self.num_experts();
        match (&self.routing, site) {
            (FfnRouting::Ffn(None), Site::Ffn) | (FfnRouting::Fgmlp(None), Site::FfnGate | Site::FfnUp | Site::FfnDown) => {
                Ok(Router::Gateless { num_experts: n })
            }
            (FfnRouting::Ffn(Some(r)), Site::Ffn) => Ok(Router::Linear(r)),
            (FfnRouting::Fgmlp(Some(rs)), Site::FfnGate) => Ok(Router::Linear(&rs[0])),
            (FfnRouting::Fgmlp(Some(rs)), Site::FfnUp) => Ok(Router::Linear(&rs[1])),
            (FfnRouting::Fgmlp(Some(rs)), Site::FfnDown) => Ok(Router::Linear(&rs[2])),
            _ => Err(Error::MissingRouter(site.as_str().into())),
        }
    }

    /// Evaluate the layer; returns the output and one decision per routed site.
    pub fn forward(&self, x: &[S], counter: &mut EvalCounter) -> Result<(Vec<S>, Vec<(Site, GateDecision<S>)>)> {
        match self.routing {
            FfnRouting::Ffn(_) => {
                let (y, d) = moe_ffn_forward(self, x, counter)?;
                Ok((y, vec![(Site::Ffn, d)]))
            }
            FfnRouting::Fgmlp(_) => {
                let (y, [g, u, d]) = fgmlp_forward(self, x, counter)?;
                Ok((y, vec![(Site::FfnGate, g), (Site::FfnUp, u), (Site::FfnDown, d)]))
            }
        }
    }
}

/// Intermediate values of a fine-grained evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct FgmlpParts<S> {
    /// Decisions for the gate, up and down projections.
    pub decisions: [GateDecision<S>; 3],
    /// `G_i · x` for each selected gate expert, aligned with `decisions[0]`.
    pub g_out: Vec<Vec<S>>,
    /// `U_i · x` for each selected up expert.
    pub u_out: Vec<Vec<S>>,
    /// Mixed gate pre-activation.
    pub g: Vec<S>,
    pub u: Vec<S>,
    /// `silu(g) ⊙ u`
    pub h: Vec<S>,
    /// `D_i · h` for each selected down expert.
    pub d_out: Vec<Vec<S>>,
}

/// Full-FFN mixture keeping every selected expert's intermediates.
pub fn moe_ffn_parts<S: Scalar>(
    layer: &MoeFfn<S>,
    x: &[S],
    counter: &mut EvalCounter,
) -> Result<(Vec<S>, GateDecision<S>, Vec<SwigluParts<S>>)> {
    let decision = gate(layer.router(Site::Ffn)?, x, &layer.cfg)?;
    let mut y = vec![S::zero(); x.len()];
    let mut parts = Vec::with_capacity(decision.indices.len());
    for (&i, &w) in decision.indices.iter().zip(&decision.weights) {
        let p = swiglu_parts(layer.expert(i)?, x);
        counter.expert_ffn += 1;
        axpy(&mut y, w, &p.y);
        parts.push(p);
    }
    Ok((y, decision, parts))
}

/// `y = Σ_{i ∈ selected} w_i · ffn_i(x)`; only selected experts are evaluated.
pub fn moe_ffn_forward<S: Scalar>(
    layer: &MoeFfn<S>,
    x: &[S],
    counter: &mut EvalCounter,
) -> Result<(Vec<S>, GateDecision<S>)> {
    moe_ffn_parts(layer, x, counter).map(|(y, d, _)| (y, d))
}

/// Fine-grained mixture keeping the per-projection intermediates.
pub fn fgmlp_parts<S: Scalar>(layer: &MoeFfn<S>, x: &[S], counter: &mut EvalCounter) -> Result<(Vec<S>, FgmlpParts<S>)> {
    let dg = gate(layer.router(Site::FfnGate)?, x, &layer.cfg)?;
    let du = gate(layer.router(Site::FfnUp)?, x, &layer.cfg)?;
    let dd = gate(layer.router(Site::FfnDown)?, x, &layer.cfg)?;
    let mix = |p: Proj, d: &GateDecision<S>, input: &[S], counter: &mut EvalCounter| -> Result<(Vec<S>, Vec<Vec<S>>)> {
        let mut acc: Option<Vec<S>> = None;
        let mut outs = Vec::with_capacity(d.indices.len());
        for (&i, &w) in d.indices.iter().zip(&d.weights) {
            let out = layer.expert(i)?.project(p, input);
            counter.expert_proj += 1;
            match acc.as_mut() {
                None => acc = Some(out.iter().map(|&v| w * v).collect()),
                Some(a) => axpy(a, w, &out),
            }
            outs.push(out);
        }
        Ok((acc.unwrap_or_default(), outs))
    };
    let (g, g_out) = mix(Proj::Gate, &dg, x, counter)?;
    let (u, u_out) = mix(Proj::Up, &du, x, counter)?;
    let h: Vec<S> = g.iter().zip(&u).map(|(&gi, &ui)| silu(gi) * ui).collect();
    let (y, d_out) = mix(Proj::Down, &dd, &h, counter)?;
    Ok((
        y,
        FgmlpParts {
            decisions: [dg, du, dd],
            g_out,
            u_out,
            g,
            u,
            h,
            d_out,
        },
    ))
}

/// Fine-grained mixing: each projection is mixed under its own gate decision.
///
/// `g = Σ wᵍ_i G_i x`, `u = Σ wᵘ_i U_i x`, `y = Σ wᵈ_i D_i (silu(g) ⊙ u)`.
pub fn fgmlp_forward<S: Scalar>(
    layer: &MoeFfn<S>,
    x: &[S],
    counter: &mut EvalCounter,
) -> Result<(Vec<S>, [GateDecision<S>; 3])> {
    fgmlp_parts(layer, x, counter).map(|(y, p)| (y, p.decisions))
}
