//! Architecture descriptors inferred from checkpoints, and the same-architecture
//! check every expert must pass before it can join a mixture.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::naming::{self, AttnProj, Proj};
use crate::tensorstore::TensorMap;

pub const META_NUM_HEADS: &str = "arch.num_heads";
pub const META_NORM_EPS: &str = "arch.norm_eps";
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ffn_intermediate_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl ArchDescriptor {
    /// Public Mistral-7B dimensions.
    pub fn mistral_7b() -> Self {
        ArchDescriptor {
            num_layers: 32,
            hidden_size: 4096,
            ffn_intermediate_size: 14336,
            num_heads: 32,
            num_kv_heads: 8,
            vocab_size: 32000,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ffn_intermediate_size", self.ffn_intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArch(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArch(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidArch(format!(
                "num_heads {} is not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidArch("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Parameters of one attention block (q, k, v, o).
    pub fn attn_params_per_layer(&self) -> usize {
        let h = self.hidden_size;
        2 * h * h + 2 * self.kv_dim() * h
    }

    /// Parameters of one SwiGLU FFN (gate, up, down).
    pub fn ffn_params_per_layer(&self) -> usize {
        3 * self.hidden_size * self.ffn_intermediate_size
    }

    /// Write the metadata keys [`infer_arch`] cannot recover from shapes.
    pub fn write_metadata(&self, map: &mut TensorMap) {
        map.set_metadata(META_NUM_HEADS, self.num_heads.to_string());
        map.set_metadata(META_NORM_EPS, self.norm_eps.to_string());
    }
}

fn dims2(map: &TensorMap, name: &str) -> Result<(usize, usize)> {
    let t = map.require(name)?;
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{name} has shape {s:?}, expected 2-D"))),
    }
}

/// Infer the architecture from tensor shapes plus the `arch.num_heads` metadata key.
///
/// Works on dense checkpoints and on composed mixtures (reading expert 0 when
/// the base FFN/attention tensors were replaced by expert slots).
pub fn infer_arch(ckpt: &TensorMap) -> Result<ArchDescriptor> {
    let (vocab_size, hidden_size) = dims2(ckpt, naming::EMBED)?;

    let layers: BTreeSet<usize> = ckpt
        .names()
        .filter_map(|n| naming::layer_of(n).map(|(l, _)| l))
        .collect();
    let num_layers = layers.len();
    if num_layers == 0 {
        return Err(Error::MissingTensor(naming::attn_norm(0)));
    }
    if let Some(missing) = (0..num_layers).find(|l| !layers.contains(l)) {
        return Err(Error::MissingTensor(naming::attn_norm(missing)));
    }

    let num_heads: usize = match ckpt.meta(META_NUM_HEADS) {
        Some(v) => v.parse().map_err(|_| Error::BadMetadata {
            key: META_NUM_HEADS.into(),
            value: v.into(),
        })?,
        None => return Err(Error::MissingMetadata(META_NUM_HEADS.into())),
    };
    let norm_eps = match ckpt.meta(META_NORM_EPS) {
        Some(v) => v.parse().map_err(|_| Error::BadMetadata {
            key: META_NORM_EPS.into(),
            value: v.into(),
        })?,
        None => DEFAULT_NORM_EPS,
    };

    let mut inter0 = 0;
    let mut kv_rows0 = 0;
    for l in 0..num_layers {
        ckpt.require(&naming::attn_norm(l))?;
        ckpt.require(&naming::ffn_norm(l))?;
        let k_name = if ckpt.contains(&naming::attn(l, AttnProj::K)) {
            naming::attn(l, AttnProj::K)
        } else {
            naming::attn_expert(l, 0, AttnProj::K)
        };
        let (kv_rows, k_cols) = dims2(ckpt, &k_name)?;
        let gate_name = if ckpt.contains(&naming::ffn(l, Proj::Gate)) {
            naming::ffn(l, Proj::Gate)
        } else {
            naming::ffn_expert(l, 0, Proj::Gate)
        };
        let (inter, g_cols) = dims2(ckpt, &gate_name)?;
        if k_cols != hidden_size || g_cols != hidden_size {
            return Err(Error::Shape(format!(
                "layer {l}: projection input width differs from hidden size {hidden_size}"
            )));
        }
        if l == 0 {
            inter0 = inter;
            kv_rows0 = kv_rows;
        } else {
            if inter != inter0 {
                return Err(Error::InconsistentArch {
                    field: "ffn_intermediate_size",
                    first: inter0,
                    layer: l,
                    found: inter,
                });
            }
            if kv_rows != kv_rows0 {
                return Err(Error::InconsistentArch {
                    field: "kv projection rows",
                    first: kv_rows0,
                    layer: l,
                    found: kv_rows,
                });
            }
        }
    }

    if num_heads == 0 || hidden_size % num_heads != 0 {
        return Err(Error::InvalidArch(format!(
            "hidden_size {hidden_size} is not divisible by num_heads {num_heads}"
        )));
    }
    let head_dim = hidden_size / num_heads;
    if kv_rows0 % head_dim != 0 {
        return Err(Error::InvalidArch(format!(
            "k projection rows {kv_rows0} are not a multiple of head_dim {head_dim}"
        )));
    }
    let arch = ArchDescriptor {
        num_layers,
        hidden_size,
        ffn_intermediate_size: inter0,
        num_heads,
        num_kv_heads: kv_rows0 / head_dim,
        vocab_size,
        norm_eps,
    };
    arch.validate()?;
    Ok(arch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchField {
    NumLayers,
    HiddenSize,
    FfnIntermediateSize,
    NumHeads,
    NumKvHeads,
    VocabSize,
    NormEps,
}

impl fmt::Display for ArchField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchField::NumLayers => "num_layers",
            ArchField::HiddenSize => "hidden_size",
            ArchField::FfnIntermediateSize => "ffn_intermediate_size",
            ArchField::NumHeads => "num_heads",
            ArchField::NumKvHeads => "num_kv_heads",
            ArchField::VocabSize => "vocab_size",
            ArchField::NormEps => "norm_eps",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub field: ArchField,
    pub base: f64,
    pub expert: usize,
    pub value: f64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "expert {} {} = {} (base {})",
            self.expert, self.field, self.value, self.base
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
    /// Vocabulary differences tolerated because embeddings stay base-owned.
    pub warnings: Vec<Mismatch>,
}

impl CompatReport {
    pub fn into_result(self) -> Result<Self> {
        if self.compatible {
            Ok(self)
        } else {
            let msg = self
                .mismatches
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::Incompatible(msg))
        }
    }
}

/// Compare each expert against the base.
///
/// Every field must match, except `vocab_size`, which is only a warning unless
/// `embeddings_trained` is set.
pub fn check_compatibility(
    base: &ArchDescriptor,
    experts: &[ArchDescriptor],
    embeddings_trained: bool,
) -> CompatReport {
    let mut mismatches = Vec::new();
    let mut warnings = Vec::new();
    for (i, e) in experts.iter().enumerate() {
        let fields = [
            (ArchField::NumLayers, base.num_layers as f64, e.num_layers as f64),
            (ArchField::HiddenSize, base.hidden_size as f64, e.hidden_size as f64),
            (
                ArchField::FfnIntermediateSize,
                base.ffn_intermediate_size as f64,
                e.ffn_intermediate_size as f64,
            ),
            (ArchField::NumHeads, base.num_heads as f64, e.num_heads as f64),
            (ArchField::NumKvHeads, base.num_kv_heads as f64, e.num_kv_heads as f64),
            (ArchField::NormEps, base.norm_eps, e.norm_eps),
        ];
        for (field, b, v) in fields {
            if b != v {
                mismatches.push(Mismatch {
                    field,
                    base: b,
                    expert: i,
                    value: v,
                });
            }
        }
        if base.vocab_size != e.vocab_size {
            let m = Mismatch {
                field: ArchField::VocabSize,
                base: base.vocab_size as f64,
                expert: i,
                value: e.vocab_size as f64,
            };
            if embeddings_trained {
                mismatches.push(m);
            } else {
                warnings.push(m);
            }
        }
    }
    CompatReport {
        compatible: mismatches.is_empty(),
        mismatches,
        warnings,
    }
}
