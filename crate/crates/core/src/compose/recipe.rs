//! Mixture recipes: the JSON recipe file and its encoding in checkpoint metadata.
//!
//! Recipe file example:
//!
//! ```json
//! {
//!   "gating": "noisy",
//!   "top_k": 2,
//!   "noise_sigma": 0.01,
//!   "granularity": "ffn",
//!   "mix_attention": false,
//!   "always_on": 0,
//!   "seed": 7,
//!   "experts": [
//!     { "kind": "full", "source": "base.safetensors" },
//!     { "kind": "full", "source": "math.safetensors" },
//!     { "kind": "lora", "source": "med_adapter.safetensors", "alpha": 16.0 }
//!   ]
//! }
//! ```
//!
//! `hidden_repr` recipes additionally give each expert `positive_prompts` and
//! `negative_prompts`, each a list of token-id arrays or strings (byte tokens).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::naming::Site;
use crate::runtime::gate::GateConfig;
use crate::runtime::tokenizer::ByteTokenizer;

pub const META_GATING: &str = "moe.gating";
pub const META_TOP_K: &str = "moe.top_k";
pub const META_SIGMA: &str = "moe.sigma";
pub const META_SEED: &str = "moe.seed";
pub const META_GRANULARITY: &str = "moe.granularity";
pub const META_MIX_ATTENTION: &str = "moe.mix_attention";
pub const META_ALWAYS_ON: &str = "moe.always_on";
pub const META_NUM_EXPERTS: &str = "moe.num_experts";
pub const META_LORA_RANK: &str = "moe.lora.rank";
pub const META_LORA_ALPHA: &str = "moe.lora.alpha";
/// Set when an expert's vocabulary differs from the base.
pub const META_VOCAB_WARNING: &str = "moe.vocab_mismatch";

pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Every expert, weight `1/N`.
    Gateless,
    /// Router of seeded Gaussian noise with top-K selection.
    Noisy,
    /// Initialised like `Noisy`, meant to be trained afterwards.
    Trained,
    /// Router rows from normalised prompt hidden-state differences.
    HiddenRepr,
}

impl Gating {
    pub fn as_str(self) -> &'static str {
        match self {
            Gating::Gateless => "gateless",
            Gating::Noisy => "noisy",
            Gating::Trained => "trained",
            Gating::HiddenRepr => "hidden_repr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "gateless" => Gating::Gateless,
            "noisy" => Gating::Noisy,
            "trained" => Gating::Trained,
            "hidden_repr" => Gating::HiddenRepr,
            _ => return None,
        })
    }

    pub fn has_router(self) -> bool {
        self != Gating::Gateless
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Ffn,
    Fgmlp,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Ffn => "ffn",
            Granularity::Fgmlp => "fgmlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ffn" => Some(Granularity::Ffn),
            "fgmlp" => Some(Granularity::Fgmlp),
            _ => None,
        }
    }

    pub fn ffn_sites(self) -> &'static [Site] {
        match self {
            Granularity::Ffn => &[Site::Ffn],
            Granularity::Fgmlp => &[Site::FfnGate, Site::FfnUp, Site::FfnDown],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    #[default]
    Full,
    Lora,
}

impl ExpertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Full => "full",
            ExpertKind::Lora => "lora",
        }
    }
}

/// A prompt as token ids or as text for the byte tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Ids(Vec<u32>),
    Text(String),
}

impl Prompt {
    pub fn tokens(&self) -> Vec<u32> {
        match self {
            Prompt::Ids(ids) => ids.clone(),
            Prompt::Text(t) => ByteTokenizer.encode(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    #[serde(default)]
    pub kind: ExpertKind,
    /// Checkpoint or adapter path, recorded verbatim as provenance.
    pub source: String,
    /// LoRA scaling numerator; defaults to the adapter's own value, else its rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive_prompts: Vec<Prompt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative_prompts: Vec<Prompt>,
}

impl ExpertEntry {
    pub fn full(source: impl Into<String>) -> Self {
        ExpertEntry {
            kind: ExpertKind::Full,
            source: source.into(),
            alpha: None,
            positive_prompts: Vec::new(),
            negative_prompts: Vec::new(),
        }
    }

    pub fn lora(source: impl Into<String>, alpha: Option<f64>) -> Self {
        ExpertEntry {
            kind: ExpertKind::Lora,
            alpha,
            ..Self::full(source)
        }
    }
}

fn default_top_k() -> usize {
    2
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

/// Everything about a mixture except the expert weights themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeSpec {
    pub gating: Gating,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub mix_attention: bool,
    #[serde(default)]
    pub always_on: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub experts: Vec<ExpertEntry>,
}

impl RecipeSpec {
    pub fn new(gating: Gating, experts: Vec<ExpertEntry>) -> Self {
        RecipeSpec {
            gating,
            top_k: default_top_k(),
            noise_sigma: DEFAULT_SIGMA,
            granularity: Granularity::Ffn,
            mix_attention: false,
            always_on: None,
            seed: 0,
            experts,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Check the recipe invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_experts();
        if n == 0 {
            return Err(Error::InvalidRecipe("a mixture needs at least one expert".into()));
        }
        if self.gating.has_router() {
            if self.top_k == 0 {
                return Err(Error::InvalidRecipe("top_k must be at least 1".into()));
            }
            if self.top_k > n {
                return Err(Error::InvalidRecipe(format!(
                    "top_k ({}) must not exceed the number of experts ({n})",
                    self.top_k
                )));
            }
        }
        if let Some(a) = self.always_on {
            if a >= n {
                return Err(Error::InvalidRecipe(format!(
                    "always_on ({a}) must be less than the number of experts ({n})"
                )));
            }
        }
        if matches!(self.gating, Gating::Noisy | Gating::Trained)
            && !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite())
        {
            return Err(Error::InvalidRecipe(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if self.gating == Gating::HiddenRepr {
            if let Some(i) = self.experts.iter().position(|e| e.positive_prompts.is_empty()) {
                return Err(Error::InvalidRecipe(format!(
                    "hidden_repr gating needs positive_prompts for expert {i}"
                )));
            }
        }
        for (i, e) in self.experts.iter().enumerate() {
            if let Some(a) = e.alpha {
                if e.kind != ExpertKind::Lora {
                    return Err(Error::InvalidRecipe(format!("alpha given for non-LoRA expert {i}")));
                }
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::InvalidRecipe(format!("expert {i}: alpha must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Gate configuration at runtime (gate-less selects all experts).
    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            top_k: if self.gating.has_router() {
                self.top_k
            } else {
                self.num_experts()
            },
            always_on: self.always_on,
        }
    }

    /// Routed sites of one layer, in canonical order.
    pub fn sites(&self) -> Vec<Site> {
        let mut s = Vec::new();
        if self.mix_attention {
            s.push(Site::Attn);
        }
        s.extend_from_slice(self.granularity.ffn_sites());
        s
    }

    pub fn has_lora(&self) -> bool {
        self.experts.iter().any(|e| e.kind == ExpertKind::Lora)
    }

    /// Encode as checkpoint metadata. `lora_rank` is recorded when any expert is LoRA.
    pub fn to_metadata(&self, lora_rank: Option<usize>) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert(META_GATING.into(), self.gating.as_str().into());
        m.insert(META_TOP_K.into(), self.top_k.to_string());
        m.insert(META_SIGMA.into(), self.noise_sigma.to_string());
        m.insert(META_SEED.into(), self.seed.to_string());
        m.insert(META_GRANULARITY.into(), self.granularity.as_str().into());
        m.insert(META_MIX_ATTENTION.into(), self.mix_attention.to_string());
        m.insert(
            META_ALWAYS_ON.into(),
            self.always_on.map_or_else(|| "none".to_string(), |a| a.to_string()),
        );
        m.insert(META_NUM_EXPERTS.into(), self.num_experts().to_string());
        let mut alpha = None;
        for (i, e) in self.experts.iter().enumerate() {
            m.insert(format!("moe.expert.{i}.source"), e.source.clone());
            m.insert(format!("moe.expert.{i}.kind"), e.kind.as_str().into());
            if !e.positive_prompts.is_empty() {
                m.insert(
                    format!("moe.expert.{i}.positive_prompts"),
                    serde_json::to_string(&e.positive_prompts).unwrap(),
                );
            }
            if !e.negative_prompts.is_empty() {
                m.insert(
                    format!("moe.expert.{i}.negative_prompts"),
                    serde_json::to_string(&e.negative_prompts).unwrap(),
                );
            }
            if e.kind == ExpertKind::Lora {
                alpha = alpha.or(e.alpha);
            }
        }
        if let Some(r) = lora_rank {
            m.insert(META_LORA_RANK.into(), r.to_string());
        }
        if let Some(a) = alpha {
            m.insert(META_LORA_ALPHA.into(), a.to_string());
        }
        m
    }

    /// Decode from checkpoint metadata; `None` when the checkpoint is not a mixture.
    pub fn from_metadata(m: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let Some(n) = m.get(META_NUM_EXPERTS) else {
            return Ok(None);
        };
        let get = |k: &str| m.get(k).ok_or_else(|| Error::MissingMetadata(k.to_string()));
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::BadMetadata {
                key: k.into(),
                value: v.into(),
            })
        }
        let bad = |k: &str, v: &str| Error::BadMetadata {
            key: k.into(),
            value: v.into(),
        };
        let n: usize = parse(META_NUM_EXPERTS, n)?;
        let g = get(META_GATING)?;
        let gating = Gating::parse(g).ok_or_else(|| bad(META_GATING, g))?;
        let gr = get(META_GRANULARITY)?;
        let granularity = Granularity::parse(gr).ok_or_else(|| bad(META_GRANULARITY, gr))?;
        let ao = get(META_ALWAYS_ON)?;
        let always_on = if ao == "none" { None } else { Some(parse(META_ALWAYS_ON, ao)?) };
        let lora_alpha: Option<f64> = match m.get(META_LORA_ALPHA) {
            Some(v) => Some(parse(META_LORA_ALPHA, v)?),
            None => None,
        };
        let mut experts = Vec::with_capacity(n);
        for i in 0..n {
            let kind_key = format!("moe.expert.{i}.kind");
            let kind = match get(&kind_key)?.as_str() {
                "full" => ExpertKind::Full,
                "lora" => ExpertKind::Lora,
                other => return Err(bad(&kind_key, other)),
            };
            let prompts = |key: String| -> Result<Vec<Prompt>> {
                match m.get(&key) {
                    Some(v) => serde_json::from_str(v).map_err(|_| bad(&key, v)),
                    None => Ok(Vec::new()),
                }
            };
            experts.push(ExpertEntry {
                kind,
                source: get(&format!("moe.expert.{i}.source"))?.clone(),
                alpha: if kind == ExpertKind::Lora { lora_alpha } else { None },
                positive_prompts: prompts(format!("moe.expert.{i}.positive_prompts"))?,
                negative_prompts: prompts(format!("moe.expert.{i}.negative_prompts"))?,
            });
        }
        Ok(Some(RecipeSpec {
            gating,
            top_k: parse(META_TOP_K, get(META_TOP_K)?)?,
            noise_sigma: parse(META_SIGMA, get(META_SIGMA)?)?,
            granularity,
            mix_attention: parse(META_MIX_ATTENTION, get(META_MIX_ATTENTION)?)?,
            always_on,
            seed: parse(META_SEED, get(META_SEED)?)?,
            experts,
        }))
    }
}
