#![allow(dead_code)]

pub mod instances;
pub mod oracle;

use moeforge::compose::{compose_moe, ExpertEntry, ExpertSource, Gating, Granularity, MoeRecipe, RecipeSpec};
use moeforge::synth::{dense_checkpoint, expert_of, expert_with_attention, TinySpec};
use moeforge::{Scalar, Tensor, TensorMap};

pub struct Built {
    pub base: TensorMap,
    pub experts: Vec<TensorMap>,
    pub recipe: MoeRecipe,
    pub moe: TensorMap,
}

pub struct Opts {
    pub gating: Gating,
    pub n: usize,
    pub top_k: usize,
    pub granularity: Granularity,
    pub mix_attention: bool,
    pub sigma: f64,
    pub seed: u64,
}

impl Opts {
    pub fn new(gating: Gating, n: usize) -> Self {
        Opts {
            gating,
            n,
            top_k: 2.min(n),
            granularity: Granularity::Ffn,
            mix_attention: false,
            sigma: 0.5,
            seed: 3,
        }
    }

    pub fn fgmlp(mut self) -> Self {
        self.granularity = Granularity::Fgmlp;
        self
    }
}

pub fn spec(gating: Gating, n: usize) -> RecipeSpec {
    RecipeSpec::new(gating, (0..n).map(|i| ExpertEntry::full(format!("expert{i}.safetensors"))).collect())
}

/// Compose `o.n` distinct tiny experts of a shared base.
pub fn build<S: Scalar>(o: &Opts) -> Built {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<S>(&tiny, 11);
    let experts: Vec<TensorMap> = (0..o.n)
        .map(|i| {
            if o.mix_attention {
                expert_with_attention::<S>(&base, &tiny, 100 + i as u64)
            } else {
                expert_of::<S>(&base, &tiny, 100 + i as u64)
            }
        })
        .collect();
    build_from(base, experts, o)
}

pub fn build_from(base: TensorMap, experts: Vec<TensorMap>, o: &Opts) -> Built {
    let mut s = spec(o.gating, experts.len());
    s.top_k = o.top_k;
    s.granularity = o.granularity;
    s.mix_attention = o.mix_attention;
    s.noise_sigma = o.sigma;
    s.seed = o.seed;
    let recipe = MoeRecipe::new(s, experts.iter().cloned().map(ExpertSource::Full).collect()).unwrap();
    let moe = compose_moe(&base, &recipe).unwrap();
    Built {
        base,
        experts,
        recipe,
        moe,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Residual channel 0 is held at a constant positive value (embedding column
/// set, attention and expert outputs zeroed there), so a router reading only
/// that channel gives expert 2 the top logit for every token.
pub fn forced(map: &TensorMap, winner: usize, n: usize) -> TensorMap {
    let mut out = map.clone();
    let edit = |out: &mut TensorMap, name: &str, f: &dyn Fn(usize, usize, &mut f64)| {
        let t = out.get(name).unwrap();
        let shape = t.shape().to_vec();
        let mut v = t.to_vec::<f64>();
        let cols = shape[1];
        for (i, x) in v.iter_mut().enumerate() {
            f(i / cols, i % cols, x);
        }
        out.replace(name.to_string(), Tensor::encode(t.dtype(), shape, &v));
    };
    edit(&mut out, "embed.weight", &|_, c, x| if c == 0 { *x = 10.0 });
    for l in 0..moeforge::infer_arch(map).unwrap().num_layers {
        edit(&mut out, &format!("layers.{l}.attn.o.weight"), &|r, _, x| if r == 0 { *x = 0.0 });
        for i in 0..n {
            edit(&mut out, &format!("layers.{l}.ffn.experts.{i}.down.weight"), &|r, _, x| {
                if r == 0 {
                    *x = 0.0
                }
            });
        }
        edit(&mut out, &format!("layers.{l}.ffn.router.weight"), &|r, c, x| {
            *x = if r == winner && c == 0 { 1.0 } else { 0.0 }
        });
    }
    out
}
