use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use moeforge::analysis::{cost_grid, routing_heatmap, routing_heatmap_site};
use moeforge::compose::{ExpertSource, LoraAdapter};
use moeforge::naming::Site;
use moeforge::runtime::ByteTokenizer;
use moeforge::training::gradcheck::finite_diff_check;
use moeforge::training::{load_corpus, train_routers, write_trained, Batch, Optimizer, TrainConfig};
use moeforge::{
    compose_moe, infer_arch, load_checkpoint, save_checkpoint, swap_expert, ArchDescriptor, Model, MoeRecipe,
    RecipeSpec, RoutingTrace, Scalar, TensorMap,
};

use crate::{Cli, Command, Precision, TokenInput};

#[derive(Debug)]
pub enum CliError {
    /// Bad input or flags: exit 1.
    User(String),
    /// Anything else: exit 2.
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<moeforge::Error> for CliError {
    fn from(e: moeforge::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON output"));
}

fn tokens_of(tokens: &Option<Vec<u32>>, text: &Option<String>) -> Option<Vec<u32>> {
    match (tokens, text) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(s)) => Some(ByteTokenizer.encode(s)),
        (None, None) => None,
    }
}

fn required_tokens(input: &TokenInput) -> Result<Vec<u32>> {
    let t = tokens_of(&input.tokens, &input.text).ok_or_else(|| user("give --tokens or --text"))?;
    if t.is_empty() {
        return Err(user("the prompt is empty"));
    }
    Ok(t)
}

fn parse_site(s: &str) -> Result<Site> {
    [Site::Attn, Site::Ffn, Site::FfnGate, Site::FfnUp, Site::FfnDown]
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| user(format!("unknown site {s:?} (attn, ffn, ffn.gate, ffn.up, ffn.down)")))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(user("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let (seed, json) = (cli.seed, cli.json);
    match cli.command {
        Command::Compose { base, recipe, out } => {
            let base = load_checkpoint(&base)?;
            let mut recipe = MoeRecipe::load(&recipe)?;
            if let Some(s) = seed {
                recipe.spec.seed = s;
            }
            let moe = compose_moe(&base, &recipe)?;
            save_checkpoint(&moe, &out)?;
            let warning = moe.meta(moeforge::compose::recipe::META_VOCAB_WARNING);
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
            report_written(&moe, &out, json);
        }
        Command::Swap {
            moe,
            slot,
            expert,
            lora,
            alpha,
            label,
            out,
        } => {
            let moe = load_checkpoint(&moe)?;
            let map = load_checkpoint(&expert)?;
            let source = if lora {
                ExpertSource::Lora(LoraAdapter::from_tensor_map(map, alpha)?)
            } else {
                ExpertSource::Full(map)
            };
            let label = label.unwrap_or_else(|| expert.display().to_string());
            let swapped = swap_expert(&moe, slot, &source, Some(&label))?;
            save_checkpoint(&swapped, &out)?;
            report_written(&swapped, &out, json);
        }
        Command::Inspect { ckpt, recipe_out } => inspect(&ckpt, recipe_out.as_deref(), json)?,
        Command::Infer { model, input, precision } => {
            let map = load_checkpoint(&model)?;
            let tokens = required_tokens(&input)?;
            let (logits, trace) = match precision {
                Precision::F64 => forward::<f64>(&map, &tokens)?,
                Precision::F32 => forward::<f32>(&map, &tokens)?,
            };
            let next: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
            if json {
                print_json(&json!({
                    "tokens": tokens,
                    "logits": logits,
                    "next_tokens": next,
                    "routing": trace.records,
                }));
            } else {
                for (t, (&tok, &nx)) in tokens.iter().zip(&next).enumerate() {
                    let route: Vec<String> = trace
                        .records
                        .iter()
                        .filter(|r| r.token == t)
                        .map(|r| format!("L{}:{}", r.layer, r.top_expert))
                        .collect();
                    println!("{t}\t{tok}\t-> {nx}\t{}", route.join(" "));
                }
            }
        }
        Command::TrainRouters {
            model,
            corpus,
            out,
            loss_csv,
            config,
            lr,
            epochs,
            batch_size,
            grad_accum,
            trainable,
            regime,
            adam,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| user(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = grad_accum {
                cfg.grad_accum_steps = v;
            }
            if let Some(v) = trainable {
                cfg.trainable = v;
            }
            if let Some(v) = regime {
                cfg.regime = v;
            }
            if adam {
                cfg.optimizer = Optimizer::adam();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let map = load_checkpoint(&model)?;
            let m = Model::<f64>::from_tensor_map(&map)?;
            let batches = load_corpus(&corpus)?
                .iter()
                .map(|s| Batch::from_sequence(s, cfg.regime))
                .collect::<moeforge::Result<Vec<_>>>()?;
            let (trained, curve) = train_routers(&m, &batches, &cfg)?;
            let ckpt = write_trained(&map, &trained, cfg.trainable)?;
            save_checkpoint(&ckpt, &out)?;
            if let Some(p) = loss_csv {
                write_text(&p, &curve.to_csv())?;
            }
            let losses = curve.losses();
            let (first, last) = (losses[0], losses[losses.len() - 1]);
            if json {
                print_json(&json!({
                    "out": out.display().to_string(),
                    "steps": losses.len(),
                    "first_loss": first,
                    "final_loss": last,
                    "config": cfg,
                }));
            } else {
                println!("{} steps, loss {first:.6} -> {last:.6}; wrote {}", losses.len(), out.display());
            }
        }
        Command::Stats {
            model,
            corpus,
            input,
            site,
            out,
        } => {
            let map = load_checkpoint(&model)?;
            let m = Model::<f64>::from_tensor_map(&map)?;
            if !m.is_moe() {
                return Err(user("stats needs a mixture checkpoint"));
            }
            let seqs: Vec<Vec<u32>> = match (corpus, tokens_of(&input.tokens, &input.text)) {
                (Some(p), _) => load_corpus(&p)?.into_iter().map(|s| s.tokens).collect(),
                (None, Some(t)) => vec![t],
                (None, None) => return Err(user("give --corpus, --tokens or --text")),
            };
            let traces = seqs
                .par_iter()
                .filter(|s| !s.is_empty())
                .map(|s| m.forward(s).map(|(_, t)| t))
                .collect::<moeforge::Result<Vec<_>>>()?;
            let mut all = RoutingTrace::new(m.arch.num_layers, m.num_experts());
            for t in traces {
                all.merge(t);
            }
            let table = match site {
                Some(s) => routing_heatmap_site(&all, parse_site(&s)?)?,
                None => routing_heatmap(&all)?,
            };
            match (out, json) {
                (Some(p), _) => write_text(&p, &table.to_csv())?,
                (None, true) => print_json(&table),
                (None, false) => print!("{}", table.to_csv()),
            }
        }
        Command::Estimate {
            arch,
            mode,
            k,
            n,
            dtype,
            budget_gb,
            out,
        } => {
            let arch = load_arch(&arch)?;
            if k == 0 {
                return Err(user("--k must be at least 1"));
            }
            let routed = mode.iter().any(|g| g.has_router());
            if let Some(&bad) = n.iter().find(|&&x| routed && x < k) {
                return Err(user(format!("top_k ({k}) must not exceed the number of experts ({bad})")));
            }
            let grid = cost_grid(&arch, &mode, &n, k, dtype, budget_gb);
            if let Some(p) = &out {
                write_text(p, &grid.to_csv())?;
            }
            if json {
                print_json(&grid);
            } else if out.is_none() {
                print!("{}", grid.to_csv());
            }
        }
        Command::CheckGrad {
            model,
            input,
            trainable,
            eps,
            samples,
            tol,
        } => {
            let map = load_checkpoint(&model)?;
            let m = Model::<f64>::from_tensor_map(&map)?;
            let tokens = required_tokens(&input)?;
            if tokens.len() < 2 {
                return Err(user("check-grad needs at least two tokens"));
            }
            let batch = Batch::new(
                tokens[..tokens.len() - 1].to_vec(),
                tokens[1..].to_vec(),
                vec![true; tokens.len() - 1],
            )?;
            let report = finite_diff_check(&m, &batch, trainable, eps, samples, seed.unwrap_or(0))?;
            let pass = report.max_rel_error < tol;
            if json {
                print_json(&json!({ "pass": pass, "tol": tol, "report": report }));
            } else {
                println!(
                    "checked {} entries ({} skipped), max relative error {:.3e}: {}",
                    report.checked,
                    report.skipped,
                    report.max_rel_error,
                    if pass { "ok" } else { "MISMATCH" }
                );
            }
            if !pass {
                return Err(CliError::Internal(format!(
                    "gradient mismatch: max relative error {:.3e} exceeds {tol:e}",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn report_written(map: &TensorMap, out: &Path, json: bool) {
    let experts = map.meta(moeforge::compose::recipe::META_NUM_EXPERTS).unwrap_or("0");
    if json {
        print_json(&json!({
            "out": out.display().to_string(),
            "tensors": map.len(),
            "params": map.total_elements(),
            "num_experts": experts.parse::<usize>().unwrap_or(0),
        }));
    } else {
        println!(
            "wrote {} ({} tensors, {} parameters, {experts} experts)",
            out.display(),
            map.len(),
            map.total_elements()
        );
    }
}

fn inspect(path: &Path, recipe_out: Option<&Path>, json: bool) -> Result<()> {
    let map = load_checkpoint(path)?;
    let arch = infer_arch(&map)?;
    let recipe = RecipeSpec::from_metadata(map.metadata())?;
    if let Some(p) = recipe_out {
        let r = recipe.as_ref().ok_or_else(|| user(format!("{} is not a mixture", path.display())))?;
        write_text(p, &(r.to_json() + "\n"))?;
    }
    let mut dtypes = std::collections::BTreeMap::<String, usize>::new();
    for (_, t) in map.iter() {
        *dtypes.entry(t.dtype().to_string()).or_default() += 1;
    }
    if json {
        print_json(&json!({
            "arch": arch,
            "tensors": map.len(),
            "params": map.total_elements(),
            "dtypes": dtypes,
            "recipe": recipe,
        }));
        return Ok(());
    }
    println!("{}", path.display());
    println!(
        "  layers {}  hidden {}  intermediate {}  heads {}/{}  vocab {}  eps {}",
        arch.num_layers,
        arch.hidden_size,
        arch.ffn_intermediate_size,
        arch.num_heads,
        arch.num_kv_heads,
        arch.vocab_size,
        arch.norm_eps
    );
    println!("  {} tensors, {} parameters, dtypes {dtypes:?}", map.len(), map.total_elements());
    match recipe {
        Some(r) => println!("recipe:\n{}", r.to_json()),
        None => println!("  dense checkpoint"),
    }
    Ok(())
}

fn load_arch(arg: &str) -> Result<ArchDescriptor> {
    let arch = match arg {
        "mistral-7b" => ArchDescriptor::mistral_7b(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| user(format!("{path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| user(format!("{path}: {e}")))?
        }
    };
    arch.validate()?;
    Ok(arch)
}

fn forward<S: Scalar>(map: &TensorMap, tokens: &[u32]) -> Result<(Vec<Vec<f64>>, RoutingTrace)> {
    let m = Model::<S>::from_tensor_map(map)?;
    let (logits, trace) = m.forward(tokens)?;
    let rows = (0..logits.rows())
        .map(|r| logits.row(r).iter().map(|v| v.as_f64()).collect())
        .collect();
    Ok((rows, trace))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
