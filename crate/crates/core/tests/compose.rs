mod common;

use common::oracle::reference_logits;
use common::{build, build_from, max_abs_diff, spec, Opts};
use moeforge::analysis::cost::{cost_estimate, cost_estimate_with_lora};
use moeforge::compose::router_init::hidden_direction;
use moeforge::compose::{
    compose_moe, extract_expert, swap_expert, ExpertEntry, ExpertSource, Gating, Granularity, LoraAdapter, MoeRecipe,
    Prompt,
};
use moeforge::naming::{self, Proj, Site};
use moeforge::synth::{dense_checkpoint, expert_of, lora_adapter, random_prompts, TinySpec};
use moeforge::{infer_arch, ArchDescriptor, Error, Model64, Tensor, TensorMap};

fn logits(map: &TensorMap, tokens: &[u32]) -> Vec<f64> {
    Model64::from_tensor_map(map).unwrap().forward(tokens).unwrap().0.as_slice().to_vec()
}

#[test]
fn composition_is_deterministic_across_thread_counts() {
    for gating in [Gating::Noisy, Gating::Trained, Gating::Gateless] {
        let mut o = Opts::new(gating, 3).fgmlp();
        o.mix_attention = true;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| build::<f32>(&o).moe.to_bytes().unwrap())
        };
        assert_eq!(run(1), run(5));
    }
}

#[test]
fn layout_of_a_noisy_mixture() {
    let b = build::<f32>(&Opts::new(Gating::Noisy, 3));
    let m = &b.moe;
    assert!(!m.contains("layers.0.ffn.gate.weight"));
    assert!(m.contains("layers.1.ffn.experts.2.down.weight"));
    let r = m.get("layers.1.ffn.router.weight").unwrap();
    assert_eq!(r.shape(), &[3, 8]);
    assert_eq!(r.dtype(), moeforge::DType::F32);
    assert_eq!(m.meta("moe.gating"), Some("noisy"));
    assert_eq!(m.meta("moe.num_experts"), Some("3"));
    assert_eq!(m.meta("moe.expert.1.source"), Some("expert1.safetensors"));
    for i in 0..3 {
        assert_eq!(
            m.get(&naming::ffn_expert(0, i, Proj::Up)).unwrap(),
            b.experts[i].get(&naming::ffn(0, Proj::Up)).unwrap()
        );
    }
    assert_eq!(m.get("embed.weight"), b.base.get("embed.weight"));
    let arch = infer_arch(m).unwrap();
    assert_eq!(arch, infer_arch(&b.base).unwrap());
}

#[test]
fn noise_router_statistics() {
    let mut o = Opts::new(Gating::Noisy, 8);
    o.sigma = 0.01;
    let tiny = TinySpec::from_arch(ArchDescriptor {
        hidden_size: 64,
        ffn_intermediate_size: 8,
        num_heads: 4,
        ..TinySpec::tiny().arch
    });
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let experts = (0..8).map(|i| expert_of::<f64>(&base, &tiny, i)).collect();
    let b = build_from(base, experts, &o);
    let w = b.moe.get("layers.0.ffn.router.weight").unwrap().to_vec::<f64>();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 4.0 * 0.01 / n.sqrt(), "{mean}");
    assert!((sd - 0.01).abs() < 0.1 * 0.01, "{sd}");
    let w1 = b.moe.get("layers.1.ffn.router.weight").unwrap().to_vec::<f64>();
    assert_ne!(w, w1);
}

#[test]
fn gateless_mixture_has_no_router_and_matches_reference() {
    let b = build::<f64>(&Opts::new(Gating::Gateless, 3));
    assert!(b.moe.names().all(|n| !n.contains("router")));
    let tokens = [1u32, 5, 9, 30];
    let want = reference_logits(&b.moe, &tokens);
    assert!(max_abs_diff(&logits(&b.moe, &tokens), want.transpose().as_slice()) < 1e-11);
}

#[test]
fn fgmlp_and_attention_routers_are_named_per_site() {
    let mut o = Opts::new(Gating::Trained, 2).fgmlp();
    o.mix_attention = true;
    let b = build::<f64>(&o);
    for l in 0..2 {
        for site in [Site::Attn, Site::FfnGate, Site::FfnUp, Site::FfnDown] {
            assert!(b.moe.contains(&naming::router(l, site)), "{l} {site:?}");
        }
        assert!(!b.moe.contains(&naming::router(l, Site::Ffn)));
        assert!(!b.moe.contains(&format!("layers.{l}.attn.q.weight")));
        assert!(b.moe.contains(&format!("layers.{l}.attn.experts.1.q.weight")));
    }
}

#[test]
fn gateless_identity_with_mixed_attention() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 2);
    let mut o = Opts::new(Gating::Gateless, 3);
    o.mix_attention = true;
    let b = build_from(base.clone(), vec![base.clone(); 3], &o);
    for p in random_prompts(5, 7, 32, 1) {
        assert!(max_abs_diff(&logits(&b.moe, &p), &logits(&base, &p)) < 1e-12);
    }
}

#[test]
fn swap_matches_fresh_compose() {
    for (gating, fg) in [(Gating::Noisy, false), (Gating::Gateless, false), (Gating::Trained, true)] {
        let mut o = Opts::new(gating, 3);
        if fg {
            o = o.fgmlp();
        }
        let b = build::<f64>(&o);
        let tiny = TinySpec::tiny();
        let newcomer = expert_of::<f64>(&b.base, &tiny, 999);
        let swapped = swap_expert(&b.moe, 1, &ExpertSource::Full(newcomer.clone()), Some("expert1.safetensors")).unwrap();
        let mut experts = b.experts.clone();
        experts[1] = newcomer;
        let fresh = build_from(b.base.clone(), experts, &o).moe;
        assert_eq!(swapped, fresh);
        for p in random_prompts(5, 8, 32, 7) {
            assert!(max_abs_diff(&logits(&swapped, &p), &logits(&fresh, &p)) <= 1e-6);
        }
        for (name, t) in b.moe.iter() {
            if !name.contains("experts.1.") {
                assert_eq!(swapped.get(name).unwrap().bytes(), t.bytes(), "{name}");
            }
        }
    }
}

#[test]
fn swap_records_label_and_rejects_bad_slots() {
    let b = build::<f32>(&Opts::new(Gating::Noisy, 2));
    let e = ExpertSource::Full(b.experts[0].clone());
    let s = swap_expert(&b.moe, 1, &e, Some("law.safetensors")).unwrap();
    assert_eq!(s.meta("moe.expert.1.source"), Some("law.safetensors"));
    assert!(matches!(
        swap_expert(&b.moe, 2, &e, None),
        Err(Error::SlotOutOfRange { slot: 2, num_experts: 2 })
    ));
    assert!(matches!(swap_expert(&b.base, 0, &e, None), Err(Error::InvalidRecipe(_))));
}

#[test]
fn extract_returns_the_original_expert() {
    let mut o = Opts::new(Gating::Noisy, 3);
    o.mix_attention = true;
    let b = build::<f32>(&o);
    for i in 0..3 {
        let ExpertSource::Full(e) = extract_expert(&b.moe, i).unwrap() else {
            panic!("full expert expected")
        };
        assert_eq!(e.to_bytes().unwrap(), b.experts[i].to_bytes().unwrap());
    }
}

#[test]
fn lora_expert_equals_merged_dense_model() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 3);
    let adapter = lora_adapter::<f64>(&tiny.arch, 2, 6.0, 4);
    let a = LoraAdapter::from_tensor_map(adapter.clone(), None).unwrap();
    assert_eq!((a.rank, a.alpha), (2, 6.0));
    let recipe = MoeRecipe::new(
        moeforge::RecipeSpec::new(Gating::Gateless, vec![ExpertEntry::lora("a.safetensors", None)]),
        vec![ExpertSource::Lora(a)],
    )
    .unwrap();
    let moe = compose_moe(&base, &recipe).unwrap();
    assert!(moe.contains("layers.0.ffn.gate.weight"));
    assert!(moe.contains("layers.0.ffn.experts.0.gate.lora_A.weight"));
    assert_eq!(moe.meta("moe.lora.rank"), Some("2"));

    // merge W + (alpha/r)·B·A by hand into a dense checkpoint
    let mut merged = base.clone();
    for l in 0..2 {
        for p in Proj::ALL {
            let w = base.get(&naming::ffn(l, p)).unwrap();
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut wv = w.to_vec::<f64>();
            let av = adapter.get(&naming::lora_adapter(l, p, 'A')).unwrap().to_vec::<f64>();
            let bv = adapter.get(&naming::lora_adapter(l, p, 'B')).unwrap().to_vec::<f64>();
            for i in 0..rows {
                for j in 0..cols {
                    let s: f64 = (0..2).map(|r| bv[i * 2 + r] * av[r * cols + j]).sum();
                    wv[i * cols + j] += 3.0 * s;
                }
            }
            merged.replace(naming::ffn(l, p), Tensor::from_f64(vec![rows, cols], &wv));
        }
    }
    for p in random_prompts(4, 6, 32, 2) {
        assert!(max_abs_diff(&logits(&moe, &p), &logits(&merged, &p)) < 1e-10);
    }
}

#[test]
fn lora_needs_a_base_ffn_to_swap_into() {
    let b = build::<f64>(&Opts::new(Gating::Noisy, 2));
    let tiny = TinySpec::tiny();
    let a = LoraAdapter::from_tensor_map(lora_adapter::<f64>(&tiny.arch, 2, 2.0, 1), None).unwrap();
    assert!(matches!(swap_expert(&b.moe, 0, &ExpertSource::Lora(a), None), Err(Error::BadLora(_))));
}

#[test]
fn incompatible_experts_are_rejected() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let wide = TinySpec::from_arch(ArchDescriptor {
        ffn_intermediate_size: 24,
        ..tiny.arch.clone()
    });
    let other = dense_checkpoint::<f64>(&wide, 2);
    let recipe = MoeRecipe::new(
        spec(Gating::Noisy, 2),
        vec![ExpertSource::Full(base.clone()), ExpertSource::Full(other)],
    )
    .unwrap();
    let err = compose_moe(&base, &recipe).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    assert!(err.to_string().contains("expert 1"), "{err}");

    let mut s = spec(Gating::Noisy, 2);
    s.top_k = 3;
    let recipe = MoeRecipe::new(s, vec![ExpertSource::Full(base.clone()), ExpertSource::Full(base.clone())]).unwrap();
    let err = compose_moe(&base, &recipe).unwrap_err();
    assert_eq!(
        err.to_string(),
        "invalid recipe: top_k (3) must not exceed the number of experts (2)"
    );
}

#[test]
fn vocab_mismatch_is_a_warning() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let big = TinySpec::from_arch(ArchDescriptor {
        vocab_size: 40,
        ..tiny.arch.clone()
    });
    let other = dense_checkpoint::<f64>(&big, 2);
    let b = build_from(base.clone(), vec![base, other], &Opts::new(Gating::Noisy, 2));
    assert!(b.moe.meta("moe.vocab_mismatch").unwrap().contains("expert 1"));
}

#[test]
fn hidden_repr_rows_follow_prompt_means() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let experts: Vec<TensorMap> = (0..2).map(|i| expert_of::<f64>(&base, &tiny, 20 + i)).collect();
    let pos = [vec![1u32, 2, 3], vec![4u32, 5, 6]];
    let neg = [vec![7u32, 8], vec![]];
    let mut s = spec(Gating::HiddenRepr, 2);
    for i in 0..2 {
        s.experts[i].positive_prompts = vec![Prompt::Ids(pos[i].clone())];
        if !neg[i].is_empty() {
            s.experts[i].negative_prompts = vec![Prompt::Ids(neg[i].clone())];
        }
    }
    let recipe = MoeRecipe::new(s, experts.iter().cloned().map(ExpertSource::Full).collect()).unwrap();
    let moe = compose_moe(&base, &recipe).unwrap();
    for l in 0..2 {
        let r = moe.get(&naming::router(l, Site::Ffn)).unwrap().to_vec::<f64>();
        for i in 0..2 {
            let m = Model64::from_tensor_map(&experts[i]).unwrap();
            let mean = |toks: &[u32]| -> Vec<f64> {
                if toks.is_empty() {
                    return vec![0.0; 8];
                }
                let h = m.ffn_inputs(toks).unwrap();
                let mut acc = vec![0.0; 8];
                for x in &h[l] {
                    for (a, v) in acc.iter_mut().zip(x) {
                        *a += v / toks.len() as f64;
                    }
                }
                acc
            };
            let want = hidden_direction(&mean(&pos[i]), &mean(&neg[i])).unwrap();
            assert!(max_abs_diff(&r[i * 8..(i + 1) * 8], &want) < 1e-12);
        }
    }
}

#[test]
fn hidden_repr_zero_norm_is_an_error() {
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let mut s = spec(Gating::HiddenRepr, 2);
    for e in s.experts.iter_mut() {
        e.positive_prompts = vec![Prompt::Ids(vec![3, 4])];
        e.negative_prompts = vec![Prompt::Ids(vec![3, 4])];
    }
    let recipe = MoeRecipe::new(s, vec![ExpertSource::Full(base.clone()); 2]).unwrap();
    assert!(matches!(
        compose_moe(&base, &recipe),
        Err(Error::ZeroNormHidden { layer: 0, expert: 0 })
    ));
}

#[test]
fn composing_from_a_mixture_is_rejected() {
    let b = build::<f64>(&Opts::new(Gating::Noisy, 2));
    let recipe = MoeRecipe::new(spec(Gating::Noisy, 2), vec![ExpertSource::Full(b.base.clone()); 2]).unwrap();
    assert!(matches!(compose_moe(&b.moe, &recipe), Err(Error::InvalidRecipe(_))));
}

#[test]
fn cost_model_counts_composed_tensors_exactly() {
    let arch = TinySpec::tiny().arch;
    for gating in [Gating::Gateless, Gating::Noisy, Gating::Trained] {
        for granularity in [Granularity::Ffn, Granularity::Fgmlp] {
            for mix in [false, true] {
                for n in 1..=4 {
                    let mut o = Opts::new(gating, n);
                    o.granularity = granularity;
                    o.mix_attention = mix;
                    o.top_k = 1;
                    let b = build::<f32>(&o);
                    let est = cost_estimate(&arch, &b.recipe.spec);
                    assert_eq!(est.total_params as usize, b.moe.total_elements(), "{gating:?} {granularity:?} {mix} {n}");
                }
            }
        }
    }
    let tiny = TinySpec::tiny();
    let base = dense_checkpoint::<f64>(&tiny, 1);
    let a = LoraAdapter::from_tensor_map(lora_adapter::<f64>(&tiny.arch, 3, 3.0, 1), None).unwrap();
    let mut s = spec(Gating::Noisy, 2);
    s.experts[1] = ExpertEntry::lora("a", None);
    let recipe = MoeRecipe::new(s, vec![ExpertSource::Full(base.clone()), ExpertSource::Lora(a)]).unwrap();
    let moe = compose_moe(&base, &recipe).unwrap();
    let est = cost_estimate_with_lora(&tiny.arch, &recipe.spec, 3);
    assert_eq!(est.total_params as usize, moe.total_elements());
}
