//! A two-population next-token task whose ideal router is known.
//!
//! Tokens `0..half` form population A and `half..vocab` population B; each
//! sequence stays in one population and steps to the next token cyclically.
//! Expert 0 is built to predict A's successors and expert 1 B's, so training
//! should route each population to its own expert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::heatmap::{routing_heatmap, HeatmapTable};
use crate::arch::ArchDescriptor;
use crate::compose::{compose_moe, ExpertEntry, ExpertSource, Gating, MoeRecipe, RecipeSpec};
use crate::error::Result;
use crate::naming::{self, AttnProj, Proj};
use crate::runtime::ffn::silu;
use crate::runtime::model::Model;
use crate::runtime::trace::RoutingTrace;
use crate::scalar::Scalar;
use crate::tensorstore::{DType, Tensor, TensorMap};
use crate::training::data::Sequence;

#[derive(Debug, Clone)]
pub struct TwoPopulationTask {
    /// Vocabulary size (even); hidden and intermediate sizes equal it.
    pub vocab: usize,
    pub seq_len: usize,
    pub num_sequences: usize,
    /// Router noise scale of the composed mixture.
    pub sigma: f64,
    /// FFN-norm gain; the router input norm is `gain · sqrt(vocab)`.
    pub ffn_gain: f64,
    pub seed: u64,
}

impl Default for TwoPopulationTask {
    fn default() -> Self {
        TwoPopulationTask {
            vocab: 16,
            seq_len: 16,
            num_sequences: 320,
            sigma: 1e-3,
            ffn_gain: 10.0,
            seed: 0,
        }
    }
}

impl TwoPopulationTask {
    pub fn half(&self) -> usize {
        self.vocab / 2
    }

    /// Population of a token: 0 for A, 1 for B.
    pub fn population(&self, token: u32) -> usize {
        usize::from(token as usize >= self.half())
    }

    pub fn successor(&self, token: u32) -> u32 {
        let h = self.half() as u32;
        let base = if token < h { 0 } else { h };
        base + (token - base + 1) % h
    }

    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            num_layers: 1,
            hidden_size: self.vocab,
            ffn_intermediate_size: self.vocab,
            num_heads: 2,
            num_kv_heads: 2,
            vocab_size: self.vocab,
            norm_eps: 1e-5,
        }
    }

    /// Dense model whose FFN maps each token of population `pop` to its successor.
    pub fn expert(&self, pop: usize) -> TensorMap {
        let v = self.vocab;
        let eye = |scale: f64| -> Vec<f64> {
            let mut m = vec![0.0; v * v];
            for i in 0..v {
                m[i * v + i] = scale;
            }
            m
        };
        let t64 = |shape: Vec<usize>, data: &[f64]| Tensor::encode(DType::F64, shape, data);
        // normalised FFN input for token t is `a · e_t`
        let a = self.ffn_gain * (v as f64).sqrt();
        let g = 1.0 / a;
        let u = 1.0 / a;
        let h = silu(1.0f64);
        // residual e_t plus 2 · e_succ(t) after the expert
        let d = 2.0 / h;
        let mut down = vec![0.0; v * v];
        for t in 0..v as u32 {
            if self.population(t) == pop {
                down[self.successor(t) as usize * v + t as usize] = d;
            }
        }
        let mut m = TensorMap::new();
        let mut put = |n: String, t: Tensor| m.insert(n, t).unwrap();
        put(naming::EMBED.into(), t64(vec![v, v], &eye(1.0)));
        put(naming::LM_HEAD.into(), t64(vec![v, v], &eye(4.0)));
        put(naming::FINAL_NORM.into(), t64(vec![v], &vec![1.0; v]));
        put(naming::attn_norm(0), t64(vec![v], &vec![1.0; v]));
        put(naming::ffn_norm(0), t64(vec![v], &vec![self.ffn_gain; v]));
        for p in AttnProj::ALL {
            let data = match p {
                AttnProj::O => vec![0.0; v * v],
                _ => eye(1.0),
            };
            put(naming::attn(0, p), t64(vec![v, v], &data));
        }
        put(naming::ffn(0, Proj::Gate), t64(vec![v, v], &eye(g)));
        put(naming::ffn(0, Proj::Up), t64(vec![v, v], &eye(u)));
        put(naming::ffn(0, Proj::Down), t64(vec![v, v], &down));
        self.arch().write_metadata(&mut m);
        m
    }

    /// Base checkpoint (expert 0) and the composed two-expert noisy mixture.
    pub fn build(&self) -> Result<(TensorMap, TensorMap)> {
        let base = self.expert(0);
        let mut spec = RecipeSpec::new(
            Gating::Trained,
            vec![ExpertEntry::full("population_a"), ExpertEntry::full("population_b")],
        );
        spec.top_k = 2;
        spec.noise_sigma = self.sigma;
        spec.seed = self.seed;
        let recipe = MoeRecipe::new(
            spec,
            vec![ExpertSource::Full(self.expert(0)), ExpertSource::Full(self.expert(1))],
        )?;
        let moe = compose_moe(&base, &recipe)?;
        Ok((base, moe))
    }

    /// Seeded corpus alternating between populations.
    pub fn corpus(&self) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let h = self.half() as u32;
        (0..self.num_sequences)
            .map(|i| {
                let base = if i % 2 == 0 { 0 } else { h };
                let mut t = base + rng.random_range(0..h);
                let mut tokens = Vec::with_capacity(self.seq_len);
                for _ in 0..self.seq_len {
                    tokens.push(t);
                    t = self.successor(t);
                }
                Sequence { tokens, prompt_len: 0 }
            })
            .collect()
    }

    /// Routing traces split by the population of each token.
    pub fn population_traces<S: Scalar>(&self, model: &Model<S>, corpus: &[Sequence]) -> Result<[RoutingTrace; 2]> {
        let (l, n) = (model.arch.num_layers, model.num_experts());
        let mut out = [RoutingTrace::new(l, n), RoutingTrace::new(l, n)];
        let mut offset = 0;
        for seq in corpus {
            let (_, trace) = model.forward(&seq.tokens)?;
            for mut r in trace.records {
                let pop = self.population(seq.tokens[r.token]);
                r.token += offset;
                out[pop].records.push(r);
            }
            offset += seq.tokens.len();
        }
        Ok(out)
    }

    /// Fraction of routing decisions whose top expert matches the token's population.
    pub fn routing_accuracy<S: Scalar>(&self, model: &Model<S>, corpus: &[Sequence]) -> Result<f64> {
        let traces = self.population_traces(model, corpus)?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (pop, t) in traces.iter().enumerate() {
            hit += t.records.iter().filter(|r| r.top_expert == pop).count();
            total += t.records.len();
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    /// One heat map per population.
    pub fn population_heatmaps<S: Scalar>(&self, model: &Model<S>, corpus: &[Sequence]) -> Result<Vec<HeatmapTable>> {
        self.population_traces(model, corpus)?.iter().map(routing_heatmap).collect()
    }
}
