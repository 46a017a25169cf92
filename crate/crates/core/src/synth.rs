//! Seeded synthetic checkpoints for tests, demos and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchDescriptor;
use crate::naming::{self, AttnProj, Proj};
use crate::scalar::Scalar;
use crate::tensorstore::{Tensor, TensorMap};

/// Shape and initialisation scale of a synthetic dense model.
#[derive(Debug, Clone)]
pub struct TinySpec {
    pub arch: ArchDescriptor,
    /// Multiplier on the `1/sqrt(fan_in)` uniform init.
    pub weight_scale: f64,
}

impl TinySpec {
    pub fn from_arch(arch: ArchDescriptor) -> Self {
        TinySpec {
            arch,
            weight_scale: 1.0,
        }
    }

    /// 2 layers, hidden 8, intermediate 16, 2 heads, vocab 32.
    pub fn tiny() -> Self {
        Self::from_arch(ArchDescriptor {
            num_layers: 2,
            hidden_size: 8,
            ffn_intermediate_size: 16,
            num_heads: 2,
            num_kv_heads: 1,
            vocab_size: 32,
            norm_eps: 1e-5,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let bound = scale / (cols as f64).sqrt();
    Tensor::encode(S::DTYPE, vec![rows, cols], &uniform(rng, rows * cols, bound))
}

fn norm<S: Scalar>(rng: &mut ChaCha8Rng, h: usize) -> Tensor {
    let v: Vec<f64> = (0..h).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();
    Tensor::encode(S::DTYPE, vec![h], &v)
}

/// Random dense checkpoint in canonical naming, stored as `S::DTYPE`.
pub fn dense_checkpoint<S: Scalar>(spec: &TinySpec, seed: u64) -> TensorMap {
    let a = &spec.arch;
    let (h, f, v, kv) = (a.hidden_size, a.ffn_intermediate_size, a.vocab_size, a.kv_dim());
    let s = spec.weight_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = TensorMap::new();
    let mut put = |name: String, t: Tensor| map.insert(name, t).expect("unique names");

    let embed = Tensor::encode(S::DTYPE, vec![v, h], &uniform(&mut rng, v * h, 1.0));
    put(naming::EMBED.into(), embed);
    for l in 0..a.num_layers {
        put(naming::attn_norm(l), norm::<S>(&mut rng, h));
        put(naming::ffn_norm(l), norm::<S>(&mut rng, h));
        for p in AttnProj::ALL {
            let rows = match p {
                AttnProj::K | AttnProj::V => kv,
                _ => h,
            };
            put(naming::attn(l, p), matrix::<S>(&mut rng, rows, h, s));
        }
        put(naming::ffn(l, Proj::Gate), matrix::<S>(&mut rng, f, h, s));
        put(naming::ffn(l, Proj::Up), matrix::<S>(&mut rng, f, h, s));
        put(naming::ffn(l, Proj::Down), matrix::<S>(&mut rng, h, f, s));
    }
    put(naming::FINAL_NORM.into(), norm::<S>(&mut rng, h));
    put(naming::LM_HEAD.into(), matrix::<S>(&mut rng, v, h, s));
    a.write_metadata(&mut map);
    map
}

/// A dense checkpoint sharing everything with `base` except FFN weights,
/// which are freshly drawn. Models a fine-tuned domain expert.
pub fn expert_of<S: Scalar>(base: &TensorMap, spec: &TinySpec, seed: u64) -> TensorMap {
    let fresh = dense_checkpoint::<S>(spec, seed);
    let mut out = base.clone();
    for l in 0..spec.arch.num_layers {
        for p in Proj::ALL {
            let name = naming::ffn(l, p);
            out.replace(name.clone(), fresh.get(&name).unwrap().clone());
        }
    }
    out
}

/// Like [`expert_of`] but also replaces the attention projections.
pub fn expert_with_attention<S: Scalar>(base: &TensorMap, spec: &TinySpec, seed: u64) -> TensorMap {
    let fresh = dense_checkpoint::<S>(spec, seed);
    let mut out = expert_of::<S>(base, spec, seed);
    for l in 0..spec.arch.num_layers {
        for p in AttnProj::ALL {
            let name = naming::attn(l, p);
            out.replace(name.clone(), fresh.get(&name).unwrap().clone());
        }
    }
    out
}

/// Random LoRA adapter over every FFN projection, in adapter-file naming.
pub fn lora_adapter<S: Scalar>(arch: &ArchDescriptor, rank: usize, alpha: f64, seed: u64) -> TensorMap {
    let (h, f) = (arch.hidden_size, arch.ffn_intermediate_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = TensorMap::new();
    for l in 0..arch.num_layers {
        for p in Proj::ALL {
            let (out_dim, in_dim) = match p {
                Proj::Down => (h, f),
                _ => (f, h),
            };
            map.insert(
                naming::lora_adapter(l, p, 'A'),
                matrix::<S>(&mut rng, rank, in_dim, 1.0),
            )
            .unwrap();
            map.insert(
                naming::lora_adapter(l, p, 'B'),
                matrix::<S>(&mut rng, out_dim, rank, 0.5),
            )
            .unwrap();
        }
    }
    map.set_metadata(crate::compose::META_ADAPTER_ALPHA, alpha.to_string());
    map
}

/// Seeded random token sequences.
pub fn random_prompts(count: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}
