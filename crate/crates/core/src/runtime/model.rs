//! The decoder stack, built from a dense or composed checkpoint.

use crate::arch::{infer_arch, ArchDescriptor};
use crate::compose::recipe::{ExpertKind, Granularity, RecipeSpec, META_LORA_RANK};
use crate::error::{Error, Result};
use crate::naming::{self, AttnProj, Proj, Site};
use crate::runtime::attention::{attention_forward, rmsnorm, AttnCache, AttnShape, AttnWeights, Rope};
use crate::runtime::ffn::{
    fgmlp_parts, moe_ffn_parts, swiglu_parts, EvalCounter, Expert, ExpertRef, FfnRouting, FfnWeights, FgmlpParts,
    LoraFfn, LoraProj, MoeFfn, SwigluParts,
};
use crate::runtime::gate::{gate, GateConfig, GateDecision, Router};
use crate::runtime::linalg::{axpy, load_vector, Matrix};
use crate::runtime::trace::RoutingTrace;
use crate::scalar::{lit, Scalar};
use crate::tensorstore::TensorMap;

/// Per-expert attention blocks with their own router.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedAttn<S> {
    pub experts: Vec<AttnWeights<S>>,
    /// `None` for gate-less mixtures.
    pub router: Option<Matrix<S>>,
    pub cfg: GateConfig,
}

impl<S: Scalar> MixedAttn<S> {
    pub fn gate_router(&self) -> Router<'_, S> {
        match &self.router {
            Some(r) => Router::Linear(r),
            None => Router::Gateless {
                num_experts: self.experts.len(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttnBlock<S> {
    Dense(AttnWeights<S>),
    Mixed(MixedAttn<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnBlock<S> {
    Dense(FfnWeights<S>),
    Moe(MoeFfn<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S> {
    pub attn_norm: Vec<S>,
    pub ffn_norm: Vec<S>,
    pub attn: AttnBlock<S>,
    pub ffn: FfnBlock<S>,
}

/// A decoder model resolved from a checkpoint, computing in `S`.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub arch: ArchDescriptor,
    /// Present for composed mixtures.
    pub recipe: Option<RecipeSpec>,
    pub embed: Matrix<S>,
    pub layers: Vec<Layer<S>>,
    pub final_norm: Vec<S>,
    pub lm_head: Matrix<S>,
    pub rope: Rope<S>,
}

/// Attention-side activations of one layer.
#[derive(Debug, Clone)]
pub enum AttnForward<S> {
    Dense(AttnCache<S>),
    Mixed {
        /// One decision per token.
        decisions: Vec<GateDecision<S>>,
        /// Outputs and caches of experts selected by at least one token.
        experts: Vec<Option<(Vec<Vec<S>>, AttnCache<S>)>>,
    },
}

/// FFN-side activations of one token.
#[derive(Debug, Clone)]
pub enum FfnForward<S> {
    Dense(SwigluParts<S>),
    /// Parts aligned with `decision.indices`.
    Moe(GateDecision<S>, Vec<SwigluParts<S>>),
    Fgmlp(FgmlpParts<S>),
}

#[derive(Debug, Clone)]
pub struct LayerCache<S> {
    /// Residual stream entering the layer.
    pub x_in: Vec<Vec<S>>,
    pub attn_inv: Vec<S>,
    /// Normalised attention input.
    pub xa: Vec<Vec<S>>,
    pub attn: AttnForward<S>,
    /// Post-attention residual stream entering the FFN norm.
    pub h: Vec<Vec<S>>,
    pub ffn_inv: Vec<S>,
    /// Normalised FFN input.
    pub xf: Vec<Vec<S>>,
    pub ffn: Vec<FfnForward<S>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub layers: Vec<LayerCache<S>>,
    pub x_final: Vec<Vec<S>>,
    pub final_inv: Vec<S>,
    pub xn: Vec<Vec<S>>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<S> {
    /// `(tokens, vocab)`
    pub logits: Matrix<S>,
    pub trace: RoutingTrace,
    pub counter: EvalCounter,
    pub cache: Option<ForwardCache<S>>,
}

fn load_attn<S: Scalar>(map: &TensorMap, arch: &ArchDescriptor, name: impl Fn(AttnProj) -> String) -> Result<AttnWeights<S>> {
    let (h, kv) = (arch.hidden_size, arch.kv_dim());
    let w = AttnWeights {
        q: Matrix::load(map, &name(AttnProj::Q), h, h)?,
        k: Matrix::load(map, &name(AttnProj::K), kv, h)?,
        v: Matrix::load(map, &name(AttnProj::V), kv, h)?,
        o: Matrix::load(map, &name(AttnProj::O), h, h)?,
    };
    w.check(arch)?;
    Ok(w)
}

fn load_ffn<S: Scalar>(map: &TensorMap, arch: &ArchDescriptor, name: impl Fn(Proj) -> String) -> Result<FfnWeights<S>> {
    let (h, f) = (arch.hidden_size, arch.ffn_intermediate_size);
    FfnWeights::new(
        Matrix::load(map, &name(Proj::Gate), f, h)?,
        Matrix::load(map, &name(Proj::Up), f, h)?,
        Matrix::load(map, &name(Proj::Down), h, f)?,
    )
}

fn proj_dims(arch: &ArchDescriptor, p: Proj) -> (usize, usize) {
    let (h, f) = (arch.hidden_size, arch.ffn_intermediate_size);
    match p {
        Proj::Down => (h, f),
        _ => (f, h),
    }
}

/// Load a LoRA expert stored under `name(p, 'A'|'B')`; projections without tensors stay unadapted.
pub(crate) fn load_lora<S: Scalar>(
    map: &TensorMap,
    arch: &ArchDescriptor,
    rank: Option<usize>,
    alpha: Option<f64>,
    name: impl Fn(Proj, char) -> String,
) -> Result<LoraFfn<S>> {
    let mut projs: [Option<LoraProj<S>>; 3] = [None, None, None];
    let mut found_rank = rank;
    for (slot, p) in Proj::ALL.into_iter().enumerate() {
        let (an, bn) = (name(p, 'A'), name(p, 'B'));
        match (map.get(&an), map.get(&bn)) {
            (None, None) => continue,
            (Some(_), None) => return Err(Error::MissingTensor(bn)),
            (None, Some(_)) => return Err(Error::MissingTensor(an)),
            (Some(a), Some(b)) => {
                let a = Matrix::<S>::from_tensor(&an, a)?;
                let b = Matrix::<S>::from_tensor(&bn, b)?;
                let r = a.rows();
                match found_rank {
                    Some(expected) if expected != r => {
                        return Err(Error::BadLora(format!("{an} has rank {r}, expected {expected}")))
                    }
                    _ => found_rank = Some(r),
                }
                let (out_dim, in_dim) = proj_dims(arch, p);
                if r == 0 || a.cols() != in_dim || b.rows() != out_dim || b.cols() != r {
                    return Err(Error::BadLora(format!(
                        "{} adapter A {}x{}, B {}x{} does not fit base {out_dim}x{in_dim}",
                        p.as_str(),
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                projs[slot] = Some(LoraProj { a, b });
            }
        }
    }
    let r = found_rank.ok_or_else(|| Error::BadLora("adapter has no lora_A/lora_B tensors".into()))?;
    let alpha = alpha.unwrap_or(r as f64);
    let [gate, up, down] = projs;
    Ok(LoraFfn {
        gate,
        up,
        down,
        scale: lit(alpha / r as f64),
    })
}

impl<S: Scalar> Model<S> {
    /// Resolve a dense or composed checkpoint.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let arch = infer_arch(map)?;
        arch.validate()?;
        let recipe = RecipeSpec::from_metadata(map.metadata())?;
        if let Some(r) = &recipe {
            r.validate()?;
        }
        let (h, v) = (arch.hidden_size, arch.vocab_size);
        let embed = Matrix::load(map, naming::EMBED, v, h)?;
        let lm_head = Matrix::load(map, naming::LM_HEAD, v, h)?;
        let final_norm = load_vector(map, naming::FINAL_NORM, h)?;
        let lora_rank = match map.meta(META_LORA_RANK) {
            Some(s) => Some(s.parse::<usize>().map_err(|_| Error::BadMetadata {
                key: META_LORA_RANK.into(),
                value: s.into(),
            })?),
            None => None,
        };

        let mut layers = Vec::with_capacity(arch.num_layers);
        for l in 0..arch.num_layers {
            let attn_norm = load_vector(map, &naming::attn_norm(l), h)?;
            let ffn_norm = load_vector(map, &naming::ffn_norm(l), h)?;
            let (attn, ffn) = match &recipe {
                None => (
                    AttnBlock::Dense(load_attn(map, &arch, |p| naming::attn(l, p))?),
                    FfnBlock::Dense(load_ffn(map, &arch, |p| naming::ffn(l, p))?),
                ),
                Some(r) => {
                    let n = r.num_experts();
                    let cfg = r.gate_config();
                    let load_router = |site: Site| -> Result<Option<Matrix<S>>> {
                        if r.gating.has_router() {
                            Matrix::load(map, &naming::router(l, site), n, h).map(Some)
                        } else {
                            Ok(None)
                        }
                    };
                    let attn = if r.mix_attention {
                        let experts = (0..n)
                            .map(|i| load_attn(map, &arch, |p| naming::attn_expert(l, i, p)))
                            .collect::<Result<Vec<_>>>()?;
                        AttnBlock::Mixed(MixedAttn {
                            experts,
                            router: load_router(Site::Attn)?,
                            cfg,
                        })
                    } else {
                        AttnBlock::Dense(load_attn(map, &arch, |p| naming::attn(l, p))?)
                    };
                    let mut experts = Vec::with_capacity(n);
                    for (i, e) in r.experts.iter().enumerate() {
                        experts.push(match e.kind {
                            ExpertKind::Full => Expert::Full(load_ffn(map, &arch, |p| naming::ffn_expert(l, i, p))?),
                            ExpertKind::Lora => Expert::Lora(load_lora(map, &arch, lora_rank, e.alpha, |p, c| {
                                naming::lora_expert(l, i, p, c)
                            })?),
                        });
                    }
                    let base = if r.has_lora() {
                        Some(load_ffn(map, &arch, |p| naming::ffn(l, p))?)
                    } else {
                        None
                    };
                    let routing = match r.granularity {
                        Granularity::Ffn => FfnRouting::Ffn(load_router(Site::Ffn)?),
                        Granularity::Fgmlp => FfnRouting::Fgmlp(if r.gating.has_router() {
                            Some([
                                load_router(Site::FfnGate)?.unwrap(),
                                load_router(Site::FfnUp)?.unwrap(),
                                load_router(Site::FfnDown)?.unwrap(),
                            ])
                        } else {
                            None
                        }),
                    };
                    let moe = MoeFfn {
                        experts,
                        base,
                        routing,
                        cfg,
                    };
                    if let Some(b) = &moe.base {
                        for e in &moe.experts {
                            if let Expert::Lora(a) = e {
                                a.check(b)?;
                            }
                        }
                    }
                    (attn, FfnBlock::Moe(moe))
                }
            };
            layers.push(Layer {
                attn_norm,
                ffn_norm,
                attn,
                ffn,
            });
        }
        let rope = Rope::new(arch.head_dim());
        Ok(Model {
            arch,
            recipe,
            embed,
            layers,
            final_norm,
            lm_head,
            rope,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.recipe.as_ref().map_or(1, RecipeSpec::num_experts)
    }

    pub fn is_moe(&self) -> bool {
        self.recipe.is_some()
    }

    fn eps(&self) -> S {
        lit(self.arch.norm_eps)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.arch.vocab_size,
            });
        }
        Ok(())
    }

    /// Run the stack; keep every activation when `keep_cache` is set.
    pub fn run(&self, tokens: &[u32], keep_cache: bool) -> Result<Forward<S>> {
        self.check_tokens(tokens)?;
        let eps = self.eps();
        let shape = AttnShape::of(&self.arch);
        let mut trace = RoutingTrace::new(self.arch.num_layers, self.num_experts());
        let mut counter = EvalCounter::default();
        let mut caches = Vec::new();
        let mut x: Vec<Vec<S>> = tokens.iter().map(|&t| self.embed.row(t as usize).to_vec()).collect();

        for (l, layer) in self.layers.iter().enumerate() {
            let (xa, attn_inv): (Vec<Vec<S>>, Vec<S>) =
                x.iter().map(|xt| rmsnorm(xt, &layer.attn_norm, eps)).unzip();
            let (attn_out, attn_fw) = match &layer.attn {
                AttnBlock::Dense(w) => {
                    let (out, cache) = attention_forward(w, &xa, shape, &self.rope);
                    (out, AttnForward::Dense(cache))
                }
                AttnBlock::Mixed(m) => {
                    let decisions = xa
                        .iter()
                        .map(|xt| gate(m.gate_router(), xt, &m.cfg))
                        .collect::<Result<Vec<_>>>()?;
                    for (t, d) in decisions.iter().enumerate() {
                        trace.push(l, Site::Attn, t, d);
                    }
                    let mut experts: Vec<Option<(Vec<Vec<S>>, AttnCache<S>)>> = vec![None; m.experts.len()];
                    for d in &decisions {
                        for &i in &d.indices {
                            if experts[i].is_none() {
                                experts[i] = Some(attention_forward(&m.experts[i], &xa, shape, &self.rope));
                            }
                        }
                    }
                    let mut out = vec![vec![S::zero(); self.arch.hidden_size]; xa.len()];
                    for (t, d) in decisions.iter().enumerate() {
                        for (&i, &w) in d.indices.iter().zip(&d.weights) {
                            axpy(&mut out[t], w, &experts[i].as_ref().unwrap().0[t]);
                        }
                    }
                    (out, AttnForward::Mixed { decisions, experts })
                }
            };
            let h: Vec<Vec<S>> = x
                .iter()
                .zip(&attn_out)
                .map(|(xt, at)| xt.iter().zip(at).map(|(&a, &b)| a + b).collect())
                .collect();
            let (xf, ffn_inv): (Vec<Vec<S>>, Vec<S>) = h.iter().map(|ht| rmsnorm(ht, &layer.ffn_norm, eps)).unzip();
            let mut ffn_fw = Vec::with_capacity(xf.len());
            let mut next = Vec::with_capacity(xf.len());
            for (t, xt) in xf.iter().enumerate() {
                let (y, fw) = match &layer.ffn {
                    FfnBlock::Dense(w) => {
                        let p = swiglu_parts(ExpertRef::Full(w), xt);
                        (p.y.clone(), FfnForward::Dense(p))
                    }
                    FfnBlock::Moe(m) => match m.routing {
                        FfnRouting::Ffn(_) => {
                            let (y, d, parts) = moe_ffn_parts(m, xt, &mut counter)?;
                            trace.push(l, Site::Ffn, t, &d);
                            (y, FfnForward::Moe(d, parts))
                        }
                        FfnRouting::Fgmlp(_) => {
                            let (y, parts) = fgmlp_parts(m, xt, &mut counter)?;
                            for (site, d) in [Site::FfnGate, Site::FfnUp, Site::FfnDown].iter().zip(&parts.decisions) {
                                trace.push(l, *site, t, d);
                            }
                            (y, FfnForward::Fgmlp(parts))
                        }
                    },
                };
                next.push(h[t].iter().zip(&y).map(|(&a, &b)| a + b).collect::<Vec<S>>());
                if keep_cache {
                    ffn_fw.push(fw);
                }
            }
            if keep_cache {
                caches.push(LayerCache {
                    x_in: std::mem::take(&mut x),
                    attn_inv,
                    xa,
                    attn: attn_fw,
                    h,
                    ffn_inv,
                    xf,
                    ffn: ffn_fw,
                });
            }
            x = next;
        }

        let (xn, final_inv): (Vec<Vec<S>>, Vec<S>) = x.iter().map(|xt| rmsnorm(xt, &self.final_norm, eps)).unzip();
        let v = self.arch.vocab_size;
        let mut logits = Matrix::zeros(tokens.len(), v);
        for (t, xt) in xn.iter().enumerate() {
            logits.row_mut(t).copy_from_slice(&self.lm_head.matvec(xt));
        }
        let cache = keep_cache.then_some(ForwardCache {
            layers: caches,
            x_final: x,
            final_inv,
            xn,
        });
        Ok(Forward {
            logits,
            trace,
            counter,
            cache,
        })
    }

    /// Logits `(tokens, vocab)` and the routing trace.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Matrix<S>, RoutingTrace)> {
        let f = self.run(tokens, false)?;
        Ok((f.logits, f.trace))
    }

    /// Post-attention residual states entering each layer's FFN norm: `[layer][token]`.
    pub fn ffn_inputs(&self, tokens: &[u32]) -> Result<Vec<Vec<Vec<S>>>> {
        let f = self.run(tokens, true)?;
        Ok(f.cache.unwrap().layers.into_iter().map(|c| c.h).collect())
    }

    /// Names of the router matrices, in canonical order.
    pub fn router_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if let AttnBlock::Mixed(MixedAttn { router: Some(_), .. }) = &layer.attn {
                names.push(naming::router(l, Site::Attn));
            }
            if let FfnBlock::Moe(m) = &layer.ffn {
                match &m.routing {
                    FfnRouting::Ffn(Some(_)) => names.push(naming::router(l, Site::Ffn)),
                    FfnRouting::Fgmlp(Some(_)) => {
                        for s in [Site::FfnGate, Site::FfnUp, Site::FfnDown] {
                            names.push(naming::router(l, s));
                        }
                    }
                    _ => {}
                }
            }
        }
        names
    }

    /// Router matrix at `(layer, site)`, if the model has one.
    pub fn router(&self, l: usize, site: Site) -> Option<&Matrix<S>> {
        let layer = self.layers.get(l)?;
        match (site, &layer.attn, &layer.ffn) {
            (Site::Attn, AttnBlock::Mixed(m), _) => m.router.as_ref(),
            (Site::Attn, ..) => None,
            (s, _, FfnBlock::Moe(m)) => match (&m.routing, s) {
                (FfnRouting::Ffn(Some(r)), Site::Ffn) => Some(r),
                (FfnRouting::Fgmlp(Some(rs)), Site::FfnGate) => Some(&rs[0]),
                (FfnRouting::Fgmlp(Some(rs)), Site::FfnUp) => Some(&rs[1]),
                (FfnRouting::Fgmlp(Some(rs)), Site::FfnDown) => Some(&rs[2]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn router_mut(&mut self, l: usize, site: Site) -> Option<&mut Matrix<S>> {
        let layer = self.layers.get_mut(l)?;
        match site {
            Site::Attn => match &mut layer.attn {
                AttnBlock::Mixed(m) => m.router.as_mut(),
                AttnBlock::Dense(_) => None,
            },
            s => match &mut layer.ffn {
                FfnBlock::Moe(m) => match (&mut m.routing, s) {
                    (FfnRouting::Ffn(Some(r)), Site::Ffn) => Some(r),
                    (FfnRouting::Fgmlp(Some(rs)), Site::FfnGate) => Some(&mut rs[0]),
                    (FfnRouting::Fgmlp(Some(rs)), Site::FfnUp) => Some(&mut rs[1]),
                    (FfnRouting::Fgmlp(Some(rs)), Site::FfnDown) => Some(&mut rs[2]),
                    _ => None,
                },
                FfnBlock::Dense(_) => None,
            },
        }
    }

    /// Trainable matrix by canonical name: a router or the embedding.
    pub fn param(&self, name: &str) -> Option<&Matrix<S>> {
        if name == naming::EMBED {
            return Some(&self.embed);
        }
        let (l, site) = parse_router_name(name)?;
        self.router(l, site)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix<S>> {
        if name == naming::EMBED {
            return Some(&mut self.embed);
        }
        let (l, site) = parse_router_name(name)?;
        self.router_mut(l, site)
    }
}

/// Inverse of [`naming::router`].
pub fn parse_router_name(name: &str) -> Option<(usize, Site)> {
    let (l, rest) = naming::layer_of(name)?;
    let site = match rest {
        "attn.router.weight" => Site::Attn,
        "ffn.router.weight" => Site::Ffn,
        "ffn.router.gate.weight" => Site::FfnGate,
        "ffn.router.up.weight" => Site::FfnUp,
        "ffn.router.down.weight" => Site::FfnDown,
        _ => return None,
    };
    Some((l, site))
}

/// Logits `(tokens, vocab)` and routing trace of `tokens`.
pub fn model_forward<S: Scalar>(model: &Model<S>, tokens: &[u32]) -> Result<(Matrix<S>, RoutingTrace)> {
    model.forward(tokens)
}

/// Mean FFN-input hidden states of a prompt set, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHiddens {
    /// `[layer][hidden]`
    pub positive: Vec<Vec<f64>>,
    /// Zero vectors when no negative prompts were given.
    pub negative: Vec<Vec<f64>>,
    pub positive_tokens: usize,
    pub negative_tokens: usize,
}

fn mean_hiddens<S: Scalar>(model: &Model<S>, prompts: &[Vec<u32>]) -> Result<(Vec<Vec<f64>>, usize)> {
    let (nl, h) = (model.arch.num_layers, model.arch.hidden_size);
    let mut sum = vec![vec![0.0f64; h]; nl];
    let mut count = 0usize;
    for p in prompts {
        let states = model.ffn_inputs(p)?;
        for (l, layer) in states.iter().enumerate() {
            for t in layer {
                for (s, v) in sum[l].iter_mut().zip(t) {
                    *s += v.as_f64();
                }
            }
        }
        count += p.len();
    }
    if count > 0 {
        for row in &mut sum {
            row.iter_mut().for_each(|v| *v /= count as f64);
        }
    }
    Ok((sum, count))
}

/// Token-weighted mean of the post-attention residual state entering each FFN.
pub fn collect_prompt_hiddens<S: Scalar>(
    model: &Model<S>,
    positive: &[Vec<u32>],
    negative: &[Vec<u32>],
) -> Result<PromptHiddens> {
    let (pos, pn) = mean_hiddens(model, positive)?;
    if pn == 0 {
        return Err(Error::EmptyPromptSet);
    }
    let (neg, nn) = mean_hiddens(model, negative)?;
    Ok(PromptHiddens {
        positive: pos,
        negative: neg,
        positive_tokens: pn,
        negative_tokens: nn,
    })
}
