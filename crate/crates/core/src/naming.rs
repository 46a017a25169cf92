//! Canonical tensor names, and translation from the hub naming used by
//! Llama/Mistral/Mixtral checkpoints.
//!
//! | canonical                              | hub                                                  |
//! |----------------------------------------|------------------------------------------------------|
//! | `embed.weight`                         | `model.embed_tokens.weight`                          |
//! | `lm_head.weight`                       | `lm_head.weight`                                     |
//! | `final_norm.weight`                    | `model.norm.weight`                                  |
//! | `layers.{l}.attn_norm.weight`          | `model.layers.{l}.input_layernorm.weight`            |
//! | `layers.{l}.ffn_norm.weight`           | `model.layers.{l}.post_attention_layernorm.weight`   |
//! | `layers.{l}.attn.{q,k,v,o}.weight`     | `model.layers.{l}.self_attn.{q,k,v,o}_proj.weight`   |
//! | `layers.{l}.ffn.{gate,up,down}.weight` | `model.layers.{l}.mlp.{gate,up,down}_proj.weight`    |
//! | `layers.{l}.ffn.experts.{i}.gate.weight` | `model.layers.{l}.block_sparse_moe.experts.{i}.w1.weight` |
//! | `layers.{l}.ffn.experts.{i}.up.weight`   | `model.layers.{l}.block_sparse_moe.experts.{i}.w3.weight` |
//! | `layers.{l}.ffn.experts.{i}.down.weight` | `model.layers.{l}.block_sparse_moe.experts.{i}.w2.weight` |
//! | `layers.{l}.ffn.router.weight`         | `model.layers.{l}.block_sparse_moe.gate.weight`      |
//!
//! Hub checkpoints rotate query/key halves (`[x0..x_{d/2}) | [x_{d/2}..x_d)`)
//! while the runtime rotates adjacent pairs, so [`from_hub`] also permutes the
//! rows of every q/k projection to keep the forward pass numerically identical.

use crate::error::{Error, Result};
use crate::tensorstore::{Tensor, TensorMap};

pub const EMBED: &str = "embed.weight";
pub const LM_HEAD: &str = "lm_head.weight";
pub const FINAL_NORM: &str = "final_norm.weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 3] = [Proj::Gate, Proj::Up, Proj::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnProj {
    Q,
    K,
    V,
    O,
}

impl AttnProj {
    pub const ALL: [AttnProj; 4] = [AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O];

    pub fn as_str(self) -> &'static str {
        match self {
            AttnProj::Q => "q",
            AttnProj::K => "k",
            AttnProj::V => "v",
            AttnProj::O => "o",
        }
    }
}

/// A place in the network where a router makes a gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Attn,
    Ffn,
    FfnGate,
    FfnUp,
    FfnDown,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Attn => "attn",
            Site::Ffn => "ffn",
            Site::FfnGate => "ffn.gate",
            Site::FfnUp => "ffn.up",
            Site::FfnDown => "ffn.down",
        }
    }

    pub fn for_proj(p: Proj) -> Site {
        match p {
            Proj::Gate => Site::FfnGate,
            Proj::Up => Site::FfnUp,
            Proj::Down => Site::FfnDown,
        }
    }

    pub fn is_ffn(self) -> bool {
        !matches!(self, Site::Attn)
    }
}

pub fn attn_norm(l: usize) -> String {
    format!("layers.{l}.attn_norm.weight")
}

pub fn ffn_norm(l: usize) -> String {
    format!("layers.{l}.ffn_norm.weight")
}

pub fn attn(l: usize, p: AttnProj) -> String {
    format!("layers.{l}.attn.{}.weight", p.as_str())
}

pub fn attn_expert(l: usize, i: usize, p: AttnProj) -> String {
    format!("layers.{l}.attn.experts.{i}.{}.weight", p.as_str())
}

pub fn ffn(l: usize, p: Proj) -> String {
    format!("layers.{l}.ffn.{}.weight", p.as_str())
}

pub fn ffn_expert(l: usize, i: usize, p: Proj) -> String {
    format!("layers.{l}.ffn.experts.{i}.{}.weight", p.as_str())
}

/// `which` is `'A'` or `'B'`.
pub fn lora_expert(l: usize, i: usize, p: Proj, which: char) -> String {
    format!("layers.{l}.ffn.experts.{i}.{}.lora_{which}.weight", p.as_str())
}

/// Adapter file naming: `layers.{l}.ffn.{p}.lora_{A|B}.weight`.
pub fn lora_adapter(l: usize, p: Proj, which: char) -> String {
    format!("layers.{l}.ffn.{}.lora_{which}.weight", p.as_str())
}

pub fn router(l: usize, site: Site) -> String {
    match site {
        Site::Attn => format!("layers.{l}.attn.router.weight"),
        Site::Ffn => format!("layers.{l}.ffn.router.weight"),
        Site::FfnGate => format!("layers.{l}.ffn.router.gate.weight"),
        Site::FfnUp => format!("layers.{l}.ffn.router.up.weight"),
        Site::FfnDown => format!("layers.{l}.ffn.router.down.weight"),
    }
}

/// Prefix shared by every tensor of expert slot `i` at layer `l`.
pub fn ffn_expert_prefix(l: usize, i: usize) -> String {
    format!("layers.{l}.ffn.experts.{i}.")
}

pub fn attn_expert_prefix(l: usize, i: usize) -> String {
    format!("layers.{l}.attn.experts.{i}.")
}

/// Canonical name for a hub tensor name, if it has one.
pub fn hub_to_canonical(name: &str) -> Option<String> {
    match name {
        "model.embed_tokens.weight" => return Some(EMBED.into()),
        "lm_head.weight" => return Some(LM_HEAD.into()),
        "model.norm.weight" => return Some(FINAL_NORM.into()),
        _ => {}
    }
    let rest = name.strip_prefix("model.layers.")?;
    let (layer, rest) = rest.split_once('.')?;
    let l: usize = layer.parse().ok()?;
    let tail = match rest {
        "input_layernorm.weight" => "attn_norm.weight".to_string(),
        "post_attention_layernorm.weight" => "ffn_norm.weight".to_string(),
        "block_sparse_moe.gate.weight" => "ffn.router.weight".to_string(),
        _ => {
            if let Some(p) = rest
                .strip_prefix("self_attn.")
                .and_then(|r| r.strip_suffix("_proj.weight"))
            {
                if !matches!(p, "q" | "k" | "v" | "o") {
                    return None;
                }
                format!("attn.{p}.weight")
            } else if let Some(p) = rest
                .strip_prefix("mlp.")
                .and_then(|r| r.strip_suffix("_proj.weight"))
            {
                if !matches!(p, "gate" | "up" | "down") {
                    return None;
                }
                format!("ffn.{p}.weight")
            } else {
                let r = rest.strip_prefix("block_sparse_moe.experts.")?;
                let (i, w) = r.split_once('.')?;
                let i: usize = i.parse().ok()?;
                let p = match w {
                    "w1.weight" => "gate",
                    "w3.weight" => "up",
                    "w2.weight" => "down",
                    _ => return None,
                };
                format!("ffn.experts.{i}.{p}.weight")
            }
        }
    };
    Some(format!("layers.{l}.{tail}"))
}

/// Hub name for a canonical tensor name, if it has one.
pub fn canonical_to_hub(name: &str) -> Option<String> {
    match name {
        EMBED => return Some("model.embed_tokens.weight".into()),
        LM_HEAD => return Some("lm_head.weight".into()),
        FINAL_NORM => return Some("model.norm.weight".into()),
        _ => {}
    }
    let rest = name.strip_prefix("layers.")?;
    let (layer, rest) = rest.split_once('.')?;
    let l: usize = layer.parse().ok()?;
    let tail = match rest {
        "attn_norm.weight" => "input_layernorm.weight".to_string(),
        "ffn_norm.weight" => "post_attention_layernorm.weight".to_string(),
        "ffn.router.weight" => "block_sparse_moe.gate.weight".to_string(),
        _ => {
            if let Some(p) = rest.strip_prefix("attn.").and_then(|r| r.strip_suffix(".weight")) {
                if !matches!(p, "q" | "k" | "v" | "o") {
                    return None;
                }
                format!("self_attn.{p}_proj.weight")
            } else if let Some(r) = rest.strip_prefix("ffn.experts.") {
                let (i, w) = r.split_once('.')?;
                let i: usize = i.parse().ok()?;
                let w = match w {
                    "gate.weight" => "w1",
                    "up.weight" => "w3",
                    "down.weight" => "w2",
                    _ => return None,
                };
                format!("block_sparse_moe.experts.{i}.{w}.weight")
            } else {
                let p = rest.strip_prefix("ffn.").and_then(|r| r.strip_suffix(".weight"))?;
                if !matches!(p, "gate" | "up" | "down") {
                    return None;
                }
                format!("mlp.{p}_proj.weight")
            }
        }
    };
    Some(format!("model.layers.{l}.{tail}"))
}

/// Row permutation taking half-split rotary layout to adjacent-pair layout
/// for one projection with `heads` heads of width `head_dim`.
fn half_to_pairs(heads: usize, head_dim: usize) -> Vec<usize> {
    let half = head_dim / 2;
    let mut perm = Vec::with_capacity(heads * head_dim);
    for h in 0..heads {
        for j in 0..half {
            perm.push(h * head_dim + j);
            perm.push(h * head_dim + half + j);
        }
    }
    perm
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 2 || shape[0] != perm.len() {
        return Err(Error::Shape(format!(
            "cannot permute {} rows of a {:?} tensor",
            perm.len(),
            shape
        )));
    }
    let row_bytes = shape[1] * t.dtype().byte_width();
    let src = t.bytes();
    let mut data = Vec::with_capacity(src.len());
    for &r in perm {
        data.extend_from_slice(&src[r * row_bytes..(r + 1) * row_bytes]);
    }
    Tensor::new(t.dtype(), shape.to_vec(), data)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn translate(
    src: &TensorMap,
    num_heads: usize,
    num_kv_heads: usize,
    rename: fn(&str) -> Option<String>,
    to_pairs: bool,
) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    for (name, t) in src.iter() {
        let new = rename(name)
            .ok_or_else(|| Error::BadTensor {
                name: name.clone(),
                reason: "no translation for this tensor name".into(),
            })?;
        let canonical = if to_pairs { new.as_str() } else { name.as_str() };
        let is_q = canonical.ends_with(".attn.q.weight");
        let is_k = canonical.ends_with(".attn.k.weight");
        let tensor = if is_q || is_k {
            let heads = if is_q { num_heads } else { num_kv_heads };
            let rows = t.shape().first().copied().unwrap_or(0);
            if heads == 0 || rows % heads != 0 || (rows / heads) % 2 != 0 {
                return Err(Error::Shape(format!(
                    "{name}: {rows} rows do not split into {heads} heads of even width"
                )));
            }
            let perm = half_to_pairs(heads, rows / heads);
            let perm = if to_pairs { perm } else { inverse(&perm) };
            permute_rows(t, &perm)?
        } else {
            t.clone()
        };
        out.insert(new, tensor)?;
    }
    *out.metadata_mut() = src.metadata().clone();
    Ok(out)
}

/// Rename a hub-layout checkpoint to canonical names, permuting q/k rows.
pub fn from_hub(src: &TensorMap, num_heads: usize, num_kv_heads: usize) -> Result<TensorMap> {
    translate(src, num_heads, num_kv_heads, hub_to_canonical, true)
}

/// Inverse of [`from_hub`].
pub fn to_hub(src: &TensorMap, num_heads: usize, num_kv_heads: usize) -> Result<TensorMap> {
    translate(src, num_heads, num_kv_heads, canonical_to_hub, false)
}

/// Parse `layers.{l}.` off the front of a canonical name.
pub fn layer_of(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (l, tail) = rest.split_once('.')?;
    Some((l.parse().ok()?, tail))
}
