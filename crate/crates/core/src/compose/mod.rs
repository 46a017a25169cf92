//! Building mixture checkpoints from a base and expert sources, and swapping experts.

pub mod lora;
pub mod recipe;
pub mod router_init;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::arch::{check_compatibility, infer_arch, ArchDescriptor};
use crate::error::{Error, Result};
use crate::naming::{self, AttnProj, Proj};
use crate::runtime::model::{collect_prompt_hiddens, Model, PromptHiddens};
use crate::tensorstore::{load_checkpoint, Tensor, TensorMap};

pub use lora::{LoraAdapter, META_ADAPTER_ALPHA};
pub use recipe::{ExpertEntry, ExpertKind, Gating, Granularity, Prompt, RecipeSpec};
pub use router_init::{init_router, RouterBank};

/// Weights for one expert slot.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSource {
    /// A dense checkpoint of the base architecture.
    Full(TensorMap),
    Lora(LoraAdapter),
}

impl ExpertSource {
    pub fn kind(&self) -> ExpertKind {
        match self {
            ExpertSource::Full(_) => ExpertKind::Full,
            ExpertSource::Lora(_) => ExpertKind::Lora,
        }
    }

    /// Load the file an entry points at; relative paths resolve against `dir`.
    pub fn load(entry: &ExpertEntry, dir: &Path) -> Result<Self> {
        let path = resolve(dir, &entry.source);
        let map = load_checkpoint(&path)?;
        Ok(match entry.kind {
            ExpertKind::Full => ExpertSource::Full(map),
            ExpertKind::Lora => ExpertSource::Lora(LoraAdapter::from_tensor_map(map, entry.alpha)?),
        })
    }
}

fn resolve(dir: &Path, source: &str) -> PathBuf {
    let p = Path::new(source);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

/// A recipe together with its loaded expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeRecipe {
    pub spec: RecipeSpec,
    pub sources: Vec<ExpertSource>,
}

impl MoeRecipe {
    /// Pair a spec with its sources; LoRA alphas resolved from the adapters are
    /// written back into the spec so the stored metadata is complete.
    pub fn new(mut spec: RecipeSpec, sources: Vec<ExpertSource>) -> Result<Self> {
        if spec.experts.len() != sources.len() {
            return Err(Error::InvalidRecipe(format!(
                "{} expert entries but {} sources",
                spec.experts.len(),
                sources.len()
            )));
        }
        for (i, (e, s)) in spec.experts.iter_mut().zip(&sources).enumerate() {
            if e.kind != s.kind() {
                return Err(Error::InvalidRecipe(format!(
                    "expert {i} declared {} but its source is {}",
                    e.kind.as_str(),
                    s.kind().as_str()
                )));
            }
            if let ExpertSource::Lora(a) = s {
                e.alpha = Some(a.alpha);
            }
        }
        Ok(MoeRecipe { spec, sources })
    }

    /// Read a recipe file and every expert it references.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let spec = RecipeSpec::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let sources = spec
            .experts
            .iter()
            .map(|e| ExpertSource::load(e, dir))
            .collect::<Result<Vec<_>>>()?;
        Self::new(spec, sources)
    }

    fn lora_rank(&self) -> Result<Option<usize>> {
        let mut rank_alpha: Option<(usize, f64)> = None;
        for s in &self.sources {
            if let ExpertSource::Lora(a) = s {
                match rank_alpha {
                    None => rank_alpha = Some((a.rank, a.alpha)),
                    Some((r, al)) if r != a.rank || al != a.alpha => {
                        return Err(Error::InvalidRecipe(format!(
                            "all LoRA experts must share rank and alpha (found r={r}, alpha={al} and r={}, alpha={})",
                            a.rank, a.alpha
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(rank_alpha.map(|(r, _)| r))
    }
}

/// Arch of a base checkpoint, which must be dense.
fn dense_arch(map: &TensorMap, what: &str) -> Result<ArchDescriptor> {
    if RecipeSpec::from_metadata(map.metadata())?.is_some() {
        return Err(Error::InvalidRecipe(format!("{what} is already a mixture")));
    }
    infer_arch(map)
}

fn check_sources(base: &TensorMap, arch: &ArchDescriptor, sources: &[(usize, &ExpertSource)]) -> Result<Vec<String>> {
    let mut full_archs = Vec::new();
    let mut full_idx = Vec::new();
    for &(i, s) in sources {
        match s {
            ExpertSource::Full(m) => {
                full_archs.push(dense_arch(m, &format!("expert {i}"))?);
                full_idx.push(i);
            }
            ExpertSource::Lora(a) => a.check_against(base, arch)?,
        }
    }
    let mut report = check_compatibility(arch, &full_archs, false);
    for m in report.mismatches.iter_mut().chain(report.warnings.iter_mut()) {
        m.expert = full_idx[m.expert];
    }
    let warnings = report.warnings.iter().map(ToString::to_string).collect();
    report.into_result()?;
    Ok(warnings)
}

/// Tensors of one expert slot at one layer.
fn slot_tensors(
    base: &TensorMap,
    l: usize,
    i: usize,
    source: &ExpertSource,
    mix_attention: bool,
) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    match source {
        ExpertSource::Full(m) => {
            for p in Proj::ALL {
                out.push((naming::ffn_expert(l, i, p), m.require(&naming::ffn(l, p))?.clone()));
            }
        }
        ExpertSource::Lora(a) => {
            for p in Proj::ALL {
                for c in ['A', 'B'] {
                    if let Some(t) = a.tensors.get(&naming::lora_adapter(l, p, c)) {
                        out.push((naming::lora_expert(l, i, p, c), t.clone()));
                    }
                }
            }
        }
    }
    if mix_attention {
        let src = match source {
            ExpertSource::Full(m) => m,
            ExpertSource::Lora(_) => base,
        };
        for p in AttnProj::ALL {
            out.push((naming::attn_expert(l, i, p), src.require(&naming::attn(l, p))?.clone()));
        }
    }
    Ok(out)
}

/// Per-expert prompt statistics for `hidden_repr` initialisation.
fn expert_activations(base: &TensorMap, recipe: &MoeRecipe) -> Result<Vec<PromptHiddens>> {
    recipe
        .spec
        .experts
        .iter()
        .zip(&recipe.sources)
        .enumerate()
        .map(|(i, (entry, src))| {
            let model: Model<f64> = match src {
                ExpertSource::Full(m) => Model::from_tensor_map(m)?,
                ExpertSource::Lora(_) => {
                    let mut single = RecipeSpec::new(Gating::Gateless, vec![entry.clone()]);
                    single.experts[0].positive_prompts.clear();
                    single.experts[0].negative_prompts.clear();
                    let one = MoeRecipe::new(single, vec![src.clone()])?;
                    Model::from_tensor_map(&compose_moe(base, &one)?)?
                }
            };
            let pos: Vec<Vec<u32>> = entry.positive_prompts.iter().map(Prompt::tokens).collect();
            let neg: Vec<Vec<u32>> = entry.negative_prompts.iter().map(Prompt::tokens).collect();
            if pos.iter().all(Vec::is_empty) {
                return Err(Error::MissingActivations(i));
            }
            collect_prompt_hiddens(&model, &pos, &neg)
        })
        .collect()
}

/// Compose a mixture checkpoint. Deterministic in `(base, recipe)` and
/// independent of the rayon thread count.
pub fn compose_moe(base: &TensorMap, recipe: &MoeRecipe) -> Result<TensorMap> {
    let spec = &recipe.spec;
    spec.validate()?;
    let arch = dense_arch(base, "base")?;
    let indexed: Vec<(usize, &ExpertSource)> = recipe.sources.iter().enumerate().collect();
    let warnings = check_sources(base, &arch, &indexed)?;
    let lora_rank = recipe.lora_rank()?;

    let mut out = base.clone();
    for l in 0..arch.num_layers {
        if lora_rank.is_none() {
            for p in Proj::ALL {
                out.remove(&naming::ffn(l, p));
            }
        }
        if spec.mix_attention {
            for p in AttnProj::ALL {
                out.remove(&naming::attn(l, p));
            }
        }
    }

    let layers: Vec<Vec<(String, Tensor)>> = (0..arch.num_layers)
        .into_par_iter()
        .map(|l| {
            let mut v = Vec::new();
            for (i, s) in recipe.sources.iter().enumerate() {
                v.extend(slot_tensors(base, l, i, s, spec.mix_attention)?);
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    for (name, t) in layers.into_iter().flatten() {
        out.insert(name, t)?;
    }

    let activations = match spec.gating {
        Gating::HiddenRepr => Some(expert_activations(base, recipe)?),
        _ => None,
    };
    let bank = init_router(spec, arch.num_layers, arch.hidden_size, activations.as_deref())?;
    let dtype = base.require(naming::EMBED)?.dtype();
    for (name, t) in bank.tensors(dtype) {
        out.insert(name, t)?;
    }

    out.metadata_mut().extend(spec.to_metadata(lora_rank));
    if !warnings.is_empty() {
        out.set_metadata(recipe::META_VOCAB_WARNING, warnings.join("; "));
    }
    Ok(out)
}

fn read_recipe(moe: &TensorMap) -> Result<RecipeSpec> {
    RecipeSpec::from_metadata(moe.metadata())?
        .ok_or_else(|| Error::InvalidRecipe("checkpoint has no mixture metadata".into()))
}

/// Replace expert `slot`. Routers, other experts and shared tensors are left as they are.
///
/// `label` becomes the slot's recorded source; `None` keeps the old one.
pub fn swap_expert(moe: &TensorMap, slot: usize, source: &ExpertSource, label: Option<&str>) -> Result<TensorMap> {
    let mut spec = read_recipe(moe)?;
    let n = spec.num_experts();
    if slot >= n {
        return Err(Error::SlotOutOfRange { slot, num_experts: n });
    }
    let arch = infer_arch(moe)?;
    let mut out = moe.clone();
    let has_base_ffn = (0..arch.num_layers).all(|l| Proj::ALL.iter().all(|&p| moe.contains(&naming::ffn(l, p))));
    if let ExpertSource::Lora(a) = source {
        if !has_base_ffn {
            return Err(Error::BadLora(
                "the mixture has no retained base FFN for a LoRA expert to adapt".into(),
            ));
        }
        if let Some(r) = moe.meta(recipe::META_LORA_RANK) {
            let others_lora = spec.experts.iter().enumerate().any(|(i, e)| i != slot && e.kind == ExpertKind::Lora);
            let alpha = moe.meta(recipe::META_LORA_ALPHA).and_then(|v| v.parse::<f64>().ok());
            if others_lora && (r != a.rank.to_string() || alpha != Some(a.alpha)) {
                return Err(Error::InvalidRecipe(
                    "all LoRA experts must share rank and alpha".into(),
                ));
            }
        }
    }
    let warnings = check_sources(moe, &arch, &[(slot, source)])?;

    let prefixes: Vec<String> = (0..arch.num_layers)
        .flat_map(|l| {
            let mut p = vec![naming::ffn_expert_prefix(l, slot)];
            if spec.mix_attention {
                p.push(naming::attn_expert_prefix(l, slot));
            }
            p
        })
        .collect();
    let stale: Vec<String> = out
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .cloned()
        .collect();
    for name in stale {
        out.remove(&name);
    }
    for l in 0..arch.num_layers {
        for (name, t) in slot_tensors(moe, l, slot, source, spec.mix_attention)? {
            out.insert(name, t)?;
        }
    }

    let entry = &mut spec.experts[slot];
    entry.kind = source.kind();
    entry.alpha = match source {
        ExpertSource::Lora(a) => Some(a.alpha),
        ExpertSource::Full(_) => None,
    };
    if let Some(l) = label {
        entry.source = l.to_string();
    }
    let lora_rank = match source {
        ExpertSource::Lora(a) => Some(a.rank),
        ExpertSource::Full(_) if spec.has_lora() => moe.meta(recipe::META_LORA_RANK).and_then(|r| r.parse().ok()),
        ExpertSource::Full(_) => None,
    };
    if !spec.has_lora() {
        for l in 0..arch.num_layers {
            for p in Proj::ALL {
                out.remove(&naming::ffn(l, p));
            }
        }
    }
    let old_warning = moe.meta(recipe::META_VOCAB_WARNING).map(str::to_string);
    let md = out.metadata_mut();
    md.retain(|k, _| !k.starts_with("moe."));
    md.extend(spec.to_metadata(lora_rank));
    if let Some(w) = (!warnings.is_empty()).then(|| warnings.join("; ")).or(old_warning) {
        md.insert(recipe::META_VOCAB_WARNING.into(), w);
    }
    Ok(out)
}

/// The dense checkpoint (or adapter) occupying `slot`.
pub fn extract_expert(moe: &TensorMap, slot: usize) -> Result<ExpertSource> {
    let spec = read_recipe(moe)?;
    let n = spec.num_experts();
    if slot >= n {
        return Err(Error::SlotOutOfRange { slot, num_experts: n });
    }
    let arch = infer_arch(moe)?;
    let entry = &spec.experts[slot];
    match entry.kind {
        ExpertKind::Lora => {
            let mut t = TensorMap::new();
            for l in 0..arch.num_layers {
                for p in Proj::ALL {
                    for c in ['A', 'B'] {
                        if let Some(x) = moe.get(&naming::lora_expert(l, slot, p, c)) {
                            t.insert(naming::lora_adapter(l, p, c), x.clone())?;
                        }
                    }
                }
            }
            Ok(ExpertSource::Lora(LoraAdapter::from_tensor_map(t, entry.alpha)?))
        }
        ExpertKind::Full => {
            let mut t = TensorMap::new();
            for name in [naming::EMBED, naming::LM_HEAD, naming::FINAL_NORM] {
                t.insert(name, moe.require(name)?.clone())?;
            }
            for l in 0..arch.num_layers {
                t.insert(naming::attn_norm(l), moe.require(&naming::attn_norm(l))?.clone())?;
                t.insert(naming::ffn_norm(l), moe.require(&naming::ffn_norm(l))?.clone())?;
                for p in AttnProj::ALL {
                    let src = if spec.mix_attention {
                        naming::attn_expert(l, slot, p)
                    } else {
                        naming::attn(l, p)
                    };
                    t.insert(naming::attn(l, p), moe.require(&src)?.clone())?;
                }
                for p in Proj::ALL {
                    t.insert(naming::ffn(l, p), moe.require(&naming::ffn_expert(l, slot, p))?.clone())?;
                }
            }
            arch.write_metadata(&mut t);
            Ok(ExpertSource::Full(t))
        }
    }
}
