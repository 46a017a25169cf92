//! LoRA adapters used as experts.

use crate::arch::ArchDescriptor;
use crate::error::{Error, Result};
use crate::naming::{self, Proj};
use crate::tensorstore::TensorMap;

/// Metadata key holding an adapter file's scaling numerator.
pub const META_ADAPTER_ALPHA: &str = "lora.alpha";

/// An adapter over the FFN projections, in adapter-file naming
/// (`layers.{l}.ffn.{gate|up|down}.lora_{A|B}.weight`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub tensors: TensorMap,
    pub rank: usize,
    pub alpha: f64,
}

fn split_lora_name(name: &str) -> Option<(&str, char)> {
    let stem = name.strip_suffix(".weight")?;
    if let Some(t) = stem.strip_suffix(".lora_A") {
        Some((t, 'A'))
    } else {
        stem.strip_suffix(".lora_B").map(|t| (t, 'B'))
    }
}

impl LoraAdapter {
    /// Read rank from the `A` matrices and alpha from `alpha`, the file's
    /// metadata, or the rank, in that order.
    pub fn from_tensor_map(tensors: TensorMap, alpha: Option<f64>) -> Result<Self> {
        let mut rank = None;
        for (name, t) in tensors.iter() {
            let Some((_, which)) = split_lora_name(name) else {
                return Err(Error::BadLora(format!("{name} is not a lora_A/lora_B tensor")));
            };
            let r = match (which, t.shape()) {
                ('A', [r, _]) => *r,
                ('B', [_, r]) => *r,
                (_, s) => return Err(Error::BadLora(format!("{name} has shape {s:?}, expected 2-D"))),
            };
            match rank {
                None => rank = Some(r),
                Some(r0) if r0 != r => {
                    return Err(Error::BadLora(format!("{name} has rank {r}, expected {r0}")));
                }
                _ => {}
            }
        }
        let rank = rank.ok_or_else(|| Error::BadLora("adapter has no tensors".into()))?;
        if rank == 0 {
            return Err(Error::BadLora("rank must be at least 1".into()));
        }
        let alpha = match alpha {
            Some(a) => a,
            None => match tensors.meta(META_ADAPTER_ALPHA) {
                Some(v) => v.parse().map_err(|_| Error::BadMetadata {
                    key: META_ADAPTER_ALPHA.into(),
                    value: v.into(),
                })?,
                None => rank as f64,
            },
        };
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::BadLora(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LoraAdapter { tensors, rank, alpha })
    }

    /// Check every adapted tensor exists in `base` and the factor shapes fit it.
    pub fn check_against(&self, base: &TensorMap, arch: &ArchDescriptor) -> Result<()> {
        for name in self.tensors.names() {
            let (stem, _) = split_lora_name(name).expect("validated on construction");
            let target = format!("{stem}.weight");
            if !base.contains(&target) {
                return Err(Error::LoraTargetMissing(target));
            }
            let supported = (0..arch.num_layers).any(|l| Proj::ALL.iter().any(|&p| naming::ffn(l, p) == target));
            if !supported {
                return Err(Error::BadLora(format!(
                    "{target}: only FFN projections can be adapted"
                )));
            }
        }
        for l in 0..arch.num_layers {
            for p in Proj::ALL {
                let (an, bn) = (naming::lora_adapter(l, p, 'A'), naming::lora_adapter(l, p, 'B'));
                let (a, b) = match (self.tensors.get(&an), self.tensors.get(&bn)) {
                    (None, None) => continue,
                    (Some(a), Some(b)) => (a, b),
                    (Some(_), None) => return Err(Error::MissingTensor(bn)),
                    (None, Some(_)) => return Err(Error::MissingTensor(an)),
                };
                let w = base.require(&naming::ffn(l, p))?.shape();
                let (out_dim, in_dim) = (w[0], w[1]);
                if a.shape() != [self.rank, in_dim] || b.shape() != [out_dim, self.rank] {
                    return Err(Error::BadLora(format!(
                        "layer {l} {}: A {:?}, B {:?} do not fit base [{out_dim}, {in_dim}] at rank {}",
                        p.as_str(),
                        a.shape(),
                        b.shape(),
                        self.rank
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{dense_checkpoint, lora_adapter, TinySpec};
    use crate::tensorstore::Tensor;

    #[test]
    fn reads_rank_and_alpha() {
        let spec = TinySpec::tiny();
        let a = LoraAdapter::from_tensor_map(lora_adapter::<f32>(&spec.arch, 3, 6.0, 1), None).unwrap();
        assert_eq!((a.rank, a.alpha), (3, 6.0));
        let b = LoraAdapter::from_tensor_map(lora_adapter::<f32>(&spec.arch, 3, 6.0, 1), Some(2.0)).unwrap();
        assert_eq!(b.alpha, 2.0);
        a.check_against(&dense_checkpoint::<f32>(&spec, 0), &spec.arch).unwrap();
    }

    #[test]
    fn missing_target() {
        let spec = TinySpec::tiny();
        let mut t = lora_adapter::<f32>(&spec.arch, 2, 2.0, 1);
        t.insert("layers.9.ffn.gate.lora_A.weight", Tensor::from_f32(vec![2, 8], &[0.0; 16]))
            .unwrap();
        t.insert("layers.9.ffn.gate.lora_B.weight", Tensor::from_f32(vec![16, 2], &[0.0; 32]))
            .unwrap();
        let a = LoraAdapter::from_tensor_map(t, None).unwrap();
        let err = a.check_against(&dense_checkpoint::<f32>(&spec, 0), &spec.arch).unwrap_err();
        assert!(matches!(err, Error::LoraTargetMissing(ref n) if n == "layers.9.ffn.gate.weight"), "{err}");
    }

    #[test]
    fn rank_mismatch() {
        let spec = TinySpec::tiny();
        let mut t = lora_adapter::<f32>(&spec.arch, 2, 2.0, 1);
        t.replace(naming::lora_adapter(0, Proj::Up, 'A'), Tensor::from_f32(vec![3, 8], &[0.0; 24]));
        assert!(matches!(LoraAdapter::from_tensor_map(t, None), Err(Error::BadLora(_))));
    }
}
