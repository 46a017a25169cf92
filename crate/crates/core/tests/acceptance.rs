//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::instances::{instance, layer, weights};
use common::oracle::{self, Mat, OracleFfn};
use common::{build, build_from, max_abs_diff, Opts};
use moeforge::analysis::cost::cost_grid;
use moeforge::analysis::heatmap::routing_heatmap;
use moeforge::compose::{swap_expert, ExpertSource, Gating};
use moeforge::runtime::ffn::{LoraFfn, LoraProj};
use moeforge::runtime::model::FfnBlock;
use moeforge::runtime::{fgmlp_forward, lora_expert_forward, moe_ffn_forward, EvalCounter, Matrix};
use moeforge::synth::{dense_checkpoint, expert_of, random_prompts, TinySpec};
use moeforge::training::backprop::grad;
use moeforge::training::gradcheck::{compare_gradients, finite_diff_check, sample_entries};
use moeforge::training::synthetic::TwoPopulationTask;
use moeforge::training::trainer::smooth;
use moeforge::training::{train_routers, write_trained, Batch, Regime, Sequence, TrainConfig, Trainable};
use moeforge::{ArchDescriptor, DType, Model32, Model64, RoutingTrace, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn identity() -> Outcome {
    const TOL_F32: f64 = 1e-5;
    const TOL_F64: f64 = 1e-10;
    let start = Instant::now();
    let tiny = TinySpec::tiny();
    let prompts = random_prompts(100, 12, tiny.arch.vocab_size, 1);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for n in 1..=4 {
        let o = Opts::new(Gating::Gateless, n);
        let b32 = dense_checkpoint::<f32>(&tiny, 7);
        let b64 = dense_checkpoint::<f64>(&tiny, 7);
        let moe32 = build_from(b32.clone(), vec![b32.clone(); n], &o).moe;
        let moe64 = build_from(b64.clone(), vec![b64.clone(); n], &o).moe;
        let (d32, m32) = (Model32::from_tensor_map(&b32).unwrap(), Model32::from_tensor_map(&moe32).unwrap());
        let (d64, m64) = (Model64::from_tensor_map(&b64).unwrap(), Model64::from_tensor_map(&moe64).unwrap());
        for p in &prompts {
            let a = d32.forward(p).unwrap().0;
            let c = m32.forward(p).unwrap().0;
            for (x, y) in a.as_slice().iter().zip(c.as_slice()) {
                worst32 = worst32.max((x - y).abs() as f64);
            }
            let a = d64.forward(p).unwrap().0;
            let c = m64.forward(p).unwrap().0;
            worst64 = worst64.max(max_abs_diff(a.as_slice(), c.as_slice()));
        }
    }
    let took = start.elapsed();
    ensure(worst32 <= TOL_F32, format!("f32 max diff {worst32:.2e}"))?;
    ensure(worst64 <= TOL_F64, format!("f64 max diff {worst64:.2e}"))?;
    ensure(took < Duration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!(
        "N=1..4, 100 prompts: f32 {worst32:.1e}, f64 {worst64:.1e}, {:.2}s",
        took.as_secs_f64()
    ))
}

fn oracle_equivalence() -> Outcome {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut moe, mut fg, mut lora) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let inst = instance(&mut rng);
        let (k, ao) = inst.gate_params();
        let mut c = EvalCounter::default();
        let y = moe_ffn_forward(&layer(&inst, false), &inst.x, &mut c).unwrap().0;
        let want = oracle::moe_ffn(&inst.experts, inst.routers.as_ref().map(|r| &r[0]), k, ao, &inst.x);
        moe = moe.max(max_abs_diff(&y, &want));
        let y = fgmlp_forward(&layer(&inst, true), &inst.x, &mut c).unwrap().0;
        let routers = inst.routers.as_ref().map(|r| [&r[0], &r[1], &r[2]]);
        fg = fg.max(max_abs_diff(&y, &oracle::fgmlp(&inst.experts, routers, k, ao, &inst.x)));
    }
    for _ in 0..1000 {
        let (h, f, r) = (rng.random_range(1..=6), rng.random_range(1..=7), rng.random_range(1..=3));
        let mat = |rng: &mut ChaCha8Rng, a: usize, b: usize| common::instances::rand_mat(rng, a, b);
        let base = OracleFfn {
            gate: mat(&mut rng, f, h),
            up: mat(&mut rng, f, h),
            down: mat(&mut rng, h, f),
        };
        let ab: Vec<(Mat, Mat)> = [(f, h), (f, h), (h, f)]
            .iter()
            .map(|&(o, i)| (mat(&mut rng, r, i), mat(&mut rng, o, r)))
            .collect();
        let scale = rng.random_range(0.5..16.0) / r as f64;
        let p = |i: usize| {
            Some(LoraProj {
                a: Matrix::from_rows(&ab[i].0).unwrap(),
                b: Matrix::from_rows(&ab[i].1).unwrap(),
            })
        };
        let adapter = LoraFfn {
            gate: p(0),
            up: p(1),
            down: p(2),
            scale,
        };
        let x: Vec<f64> = (0..h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = lora_expert_forward(&weights(&base), &adapter, &x).unwrap();
        let w = |m: &Mat, i: usize| oracle::merged(m, &ab[i].0, &ab[i].1, scale);
        let want = oracle::swiglu(&w(&base.gate, 0), &w(&base.up, 1), &w(&base.down, 2), &x);
        lora = lora.max(max_abs_diff(&y, &want));
    }
    ensure(moe <= TOL && fg <= TOL && lora <= TOL, format!("moe {moe:.1e}, fgmlp {fg:.1e}, lora {lora:.1e}"))?;
    Ok(format!("1000 instances each: moe {moe:.1e}, fgmlp {fg:.1e}, lora {lora:.1e}"))
}

fn lm_batch(tokens: &[u32]) -> Batch {
    let seq = Sequence {
        tokens: tokens.to_vec(),
        prompt_len: 0,
    };
    Batch::from_sequence(&seq, Regime::Pretrain).unwrap()
}

fn gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let batch = lm_batch(&random_prompts(1, 10, 32, 3)[0]);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for fine in [false, true] {
        for gating in [Gating::Noisy, Gating::Trained] {
            for trainable in [Trainable::Router, Trainable::RouterPlusEmbed] {
                let mut o = Opts::new(gating, 3);
                if fine {
                    o = o.fgmlp();
                }
                let m = Model64::from_tensor_map(&build::<f64>(&o).moe).unwrap();
                let r = finite_diff_check(&m, &batch, trainable, 1e-5, 128, 7).unwrap();
                ensure(r.checked > 0, "no entries checked")?;
                ensure(
                    r.max_rel_error < TOL,
                    format!("fine={fine} {gating:?} {trainable:?}: {:?}", r.worst),
                )?;
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
            }
        }
    }
    // canary: a 1% error in one router entry must be flagged
    let m = Model64::from_tensor_map(&build::<f64>(&Opts::new(Gating::Trained, 3)).moe).unwrap();
    let mut g = grad(&m, &batch, Trainable::Router).unwrap();
    let entries = sample_entries(&g, 64, 1);
    let (name, idx) = entries
        .iter()
        .find(|(n, i)| g.get(n).unwrap().as_slice()[*i].abs() > 1e-4)
        .cloned()
        .unwrap();
    g.grads.get_mut(&name).unwrap().as_mut_slice()[idx] *= 1.01;
    let canary = compare_gradients(&m, &batch, &g, &entries, 1e-5).unwrap();
    ensure(canary.max_rel_error > TOL, format!("canary missed: {:.1e}", canary.max_rel_error))?;
    Ok(format!(
        "8 configurations, {checked} entries, max rel error {worst:.1e}; canary {:.1e}",
        canary.max_rel_error
    ))
}

fn synthetic_setup() -> (TwoPopulationTask, Model64, Vec<Sequence>, Vec<Batch>) {
    let task = TwoPopulationTask::default();
    let (_, moe) = task.build().unwrap();
    let model = Model64::from_tensor_map(&moe).unwrap();
    let corpus = task.corpus();
    let batches = corpus
        .iter()
        .map(|s| Batch::from_sequence(s, Regime::Pretrain).unwrap())
        .collect();
    (task, model, corpus, batches)
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let (task, model, corpus, batches) = synthetic_setup();
    let cfg = TrainConfig::default();
    ensure(
        cfg.learning_rate == 1e-4 && cfg.grad_accum_steps == 16 && cfg.epochs == 1,
        "defaults drifted",
    )?;
    let before = task.routing_accuracy(&model, &corpus).unwrap();
    let (trained, curve) = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| train_routers(&model, &batches, &cfg).unwrap());
    let after = task.routing_accuracy(&trained, &corpus).unwrap();
    let smoothed = smooth(&curve.losses(), 3);
    let monotone = smoothed.windows(2).all(|w| w[1] < w[0]);
    let took = start.elapsed();
    ensure(monotone, format!("smoothed loss not decreasing: {smoothed:?}"))?;
    ensure(after >= 0.9, format!("routing accuracy {after:.3}"))?;
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!(
        "{} steps, loss {:.3} -> {:.3}, routing accuracy {:.3} -> {:.3}, {:.2}s on one thread",
        curve.points.len(),
        smoothed[0],
        smoothed.last().unwrap(),
        before,
        after,
        took.as_secs_f64()
    ))
}

fn cost_trends() -> Outcome {
    let a = ArchDescriptor::mistral_7b();
    let g = cost_grid(&a, &[Gating::Gateless, Gating::Noisy], &[2, 4, 6, 8], 2, DType::F16, 80.0);
    let gl = |n| g.get(Gating::Gateless, n).unwrap();
    let nz = |n| g.get(Gating::Noisy, n).unwrap();
    let observed = 48.642 - 27.137;
    let predicted = gl(4).memory_gb - gl(2).memory_gb;
    ensure(
        ((predicted - observed) / observed).abs() <= 0.10,
        format!("increment {predicted:.3} GB vs {observed:.3} GB"),
    )?;
    ensure((predicted - 22.549).abs() < 1e-3, format!("increment {predicted:.4}"))?;
    for n in [4, 6, 8] {
        let ratio = gl(n).report.ffn_flops_per_token as f64 / gl(2).report.ffn_flops_per_token as f64;
        ensure(ratio == n as f64 / 2.0, format!("gate-free FFN ratio at N={n}: {ratio}"))?;
    }
    let growth = nz(6).report.total_flops_per_token() as f64 / nz(2).report.total_flops_per_token() as f64 - 1.0;
    ensure(growth < 0.01, format!("noisy FLOP growth {growth:.2e}"))?;
    ensure(nz(8).over_budget && gl(8).over_budget, "8 experts not flagged")?;
    ensure(
        [2, 4, 6].iter().all(|&n| !nz(n).over_budget),
        "fewer than 8 experts flagged",
    )?;
    Ok(format!(
        "increment {predicted:.3} GB (observed {observed:.3}), gate-free FFN x{:.0} at 8X, noisy 2X->6X FLOPs +{:.4}%, 8X {:.1} GB over 80 GB",
        gl(8).report.ffn_flops_per_token as f64 / gl(2).report.ffn_flops_per_token as f64,
        growth * 100.0,
        nz(8).memory_gb
    ))
}

fn heatmaps() -> Outcome {
    // forced router
    let b = build::<f64>(&Opts::new(Gating::Trained, 3));
    let m = Model64::from_tensor_map(&common::forced(&b.moe, 2, 3)).unwrap();
    let mut trace = RoutingTrace::new(2, 3);
    for p in random_prompts(20, 8, 32, 5) {
        trace.merge(m.forward(&p).unwrap().1);
    }
    let forced = routing_heatmap(&trace).unwrap();
    ensure(forced.fractions.iter().all(|r| r[2] == 1.0), "forced column is not 1.0")?;

    // trained router on the synthetic task
    let (task, model, corpus, batches) = synthetic_setup();
    let (trained, _) = train_routers(&model, &batches, &TrainConfig::default()).unwrap();
    let maps = task.population_heatmaps(&trained, &corpus).unwrap();
    let mut all = vec![forced];
    for (pop, h) in maps.iter().enumerate() {
        let dominated = (0..h.num_layers()).filter(|&l| h.dominant(l) == pop).count();
        ensure(
            2 * dominated > h.num_layers(),
            format!("population {pop} not dominated by expert {pop}: {:?}", h.fractions),
        )?;
    }
    all.extend(maps.iter().cloned());
    for h in &all {
        for row in &h.fractions {
            ensure((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "row does not sum to 1")?;
        }
    }
    Ok(format!(
        "rows sum to 1; forced expert 2 fraction 1.0; trained: population A -> expert 0 ({:.2}), B -> expert 1 ({:.2})",
        maps[0].fractions[0][0], maps[1].fractions[0][1]
    ))
}

fn invariances() -> Outcome {
    let b = build::<f64>(&Opts::new(Gating::Noisy, 3));
    let m = Model64::from_tensor_map(&b.moe).unwrap();
    let prompts = random_prompts(20, 8, 32, 9);

    // permutation equivariance
    let perm = [1usize, 2, 0];
    let mut pm = m.clone();
    for name in m.router_names() {
        let dst = pm.param_mut(&name).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            dst.row_mut(new).copy_from_slice(m.param(&name).unwrap().row(old));
        }
    }
    for (src, dst) in m.layers.iter().zip(pm.layers.iter_mut()) {
        if let (FfnBlock::Moe(s), FfnBlock::Moe(d)) = (&src.ffn, &mut dst.ffn) {
            for (new, &old) in perm.iter().enumerate() {
                d.experts[new] = s.experts[old].clone();
            }
        }
    }
    let mut perm_diff = 0.0f64;
    for p in &prompts {
        perm_diff = perm_diff.max(max_abs_diff(
            m.forward(p).unwrap().0.as_slice(),
            pm.forward(p).unwrap().0.as_slice(),
        ));
    }
    ensure(perm_diff <= 1e-6, format!("permutation diff {perm_diff:.1e}"))?;

    // positive router scaling keeps every gate's selection (first routed layer)
    let mut scaled = m.clone();
    for name in m.router_names() {
        for v in scaled.param_mut(&name).unwrap().as_mut_slice() {
            *v *= 3.0;
        }
    }
    for p in &prompts {
        let (ta, tb) = (m.forward(p).unwrap().1, scaled.forward(p).unwrap().1);
        for (a, c) in ta.records.iter().zip(&tb.records).filter(|(a, _)| a.layer == 0) {
            ensure(a.decision.indices == c.decision.indices, "scaling changed a selection")?;
        }
    }

    // sparsity: K expert evaluations per token per layer
    let mut o = Opts::new(Gating::Noisy, 4);
    o.top_k = 2;
    let sparse = Model64::from_tensor_map(&build::<f64>(&o).moe).unwrap();
    let f = sparse.run(&prompts[0], false).unwrap();
    ensure(
        f.counter.expert_ffn == 2 * 2 * prompts[0].len(),
        format!("counter {}", f.counter.expert_ffn),
    )?;

    // frozen tensors stay byte-identical through training
    let tb = build::<f32>(&Opts::new(Gating::Trained, 3));
    let tm = Model32::from_tensor_map(&tb.moe).unwrap();
    let batches: Vec<Batch> = prompts.iter().map(|p| lm_batch(p)).collect();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        grad_accum_steps: 4,
        ..TrainConfig::default()
    };
    let (trained, _) = train_routers(&tm, &batches, &cfg).unwrap();
    let out = write_trained(&tb.moe, &trained, Trainable::Router).unwrap();
    let mut routers_changed = 0;
    for (name, t) in tb.moe.iter() {
        let after = out.get(name).unwrap();
        if name.contains("router") {
            routers_changed += (after.bytes() != t.bytes()) as usize;
        } else {
            ensure(after.bytes() == t.bytes(), format!("{name} changed"))?;
        }
    }
    ensure(routers_changed > 0, "no router changed")?;

    // container round trip
    let bytes = tb.moe.to_bytes().unwrap();
    ensure(
        TensorMap::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes,
        "round trip changed bytes",
    )?;

    // composition under different thread counts
    let mut o = Opts::new(Gating::Noisy, 4).fgmlp();
    o.mix_attention = true;
    let compose_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| build::<f32>(&o).moe.to_bytes().unwrap())
    };
    let one = compose_with(1);
    ensure([2, 3, 8].iter().all(|&t| compose_with(t) == one), "composition depends on threads")?;

    Ok(format!(
        "permutation {perm_diff:.1e}, scaling keeps selection, counter = K, {routers_changed} routers trained with frozen rest, round trip and thread determinism byte-identical"
    ))
}

fn swap() -> Outcome {
    let mut worst = 0.0f64;
    for gating in [Gating::Gateless, Gating::Noisy] {
        let o = Opts::new(gating, 3);
        let b = build::<f64>(&o);
        let newcomer = expert_of::<f64>(&b.base, &TinySpec::tiny(), 4242);
        let swapped = swap_expert(&b.moe, 2, &ExpertSource::Full(newcomer.clone()), None).unwrap();
        let mut experts = b.experts.clone();
        experts[2] = newcomer;
        let fresh = build_from(b.base.clone(), experts, &o).moe;
        let (ms, mf) = (
            Model64::from_tensor_map(&swapped).unwrap(),
            Model64::from_tensor_map(&fresh).unwrap(),
        );
        for p in random_prompts(20, 8, 32, 11) {
            worst = worst.max(max_abs_diff(
                ms.forward(&p).unwrap().0.as_slice(),
                mf.forward(&p).unwrap().0.as_slice(),
            ));
        }
        for name in b.moe.names().filter(|n| n.contains("router")) {
            ensure(swapped.get(name) == b.moe.get(name), format!("{name} changed"))?;
        }
    }
    ensure(worst <= 1e-6, format!("swap vs fresh {worst:.1e}"))?;
    Ok(format!("gate-free and noisy: max diff {worst:.1e}, routers untouched, no training"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("identity", identity),
        ("oracle equivalence", oracle_equivalence),
        ("gradients", gradients),
        ("router learnability", learnability),
        ("cost trends", cost_trends),
        ("heat maps", heatmaps),
        ("invariances", invariances),
        ("swap", swap),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match outcome {
            Ok(detail) => format!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed.push(i + 1);
                format!("criterion {} {name}: FAIL ({why})", i + 1)
            }
        };
        writeln!(std::io::stderr(), "{line}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
