//! `moeforge`: compose, run, train and cost mixture-of-experts checkpoints.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moeforge::compose::Gating;
use moeforge::training::{Regime, Trainable};
use moeforge::DType;

#[derive(Parser, Debug)]
#[command(name = "moeforge", version, about = "Compose and study mixture-of-experts checkpoints built from dense experts")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MOEFORGE_THREADS")]
    pub threads: Option<usize>,

    /// Seed for every random choice the subcommand makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a mixture from a base checkpoint and a recipe file.
    Compose {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace one expert slot of a mixture.
    Swap {
        #[arg(long)]
        moe: PathBuf,
        #[arg(long)]
        slot: usize,
        /// Dense checkpoint, or LoRA adapter with `--lora`.
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        lora: bool,
        #[arg(long, requires = "lora")]
        alpha: Option<f64>,
        /// Source label recorded for the slot (defaults to the expert path).
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a checkpoint and print its recipe.
    Inspect {
        ckpt: PathBuf,
        /// Write the recovered recipe here.
        #[arg(long)]
        recipe_out: Option<PathBuf>,
    },
    /// Run the reference forward pass.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: TokenInput,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
    },
    /// Train router (and optionally embedding) weights on a JSON-lines corpus.
    TrainRouters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Training config JSON; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        grad_accum: Option<usize>,
        #[arg(long, value_parser = parse_trainable)]
        trainable: Option<Trainable>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[arg(long)]
        adam: bool,
    },
    /// Routing heat map over a corpus or prompt.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with_all = ["tokens", "text"])]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        input: OptTokenInput,
        /// Restrict to one routed site (attn, ffn, ffn.gate, ffn.up, ffn.down).
        #[arg(long)]
        site: Option<String>,
        /// Heat map CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter, FLOP and memory estimates over expert counts.
    Estimate {
        /// Architecture JSON file, or the preset `mistral-7b`.
        #[arg(long, default_value = "mistral-7b")]
        arch: String,
        #[arg(long, value_delimiter = ',', default_value = "noisy", value_parser = parse_gating)]
        mode: Vec<Gating>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        n: Vec<usize>,
        #[arg(long, default_value = "F16", value_parser = parse_dtype)]
        dtype: DType,
        /// Memory budget in GB; rows above it are flagged.
        #[arg(long, default_value_t = moeforge::analysis::DEFAULT_BUDGET_GB)]
        budget_gb: f64,
        /// Cost grid CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic router gradients with central differences.
    CheckGrad {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: TokenInput,
        #[arg(long, value_parser = parse_trainable, default_value = "router")]
        trainable: Trainable,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct TokenInput {
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<u32>>,
    /// Text for the byte-level tokenizer.
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(Args, Debug)]
#[group(required = false, multiple = false)]
pub struct OptTokenInput {
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<u32>>,
    #[arg(long)]
    pub text: Option<String>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

fn parse_gating(s: &str) -> Result<Gating, String> {
    Gating::parse(s).ok_or_else(|| format!("unknown gating mode {s:?} (gateless, noisy, trained, hidden_repr)"))
}

fn parse_trainable(s: &str) -> Result<Trainable, String> {
    match s {
        "router" => Ok(Trainable::Router),
        "router_plus_embed" => Ok(Trainable::RouterPlusEmbed),
        _ => Err(format!("unknown trainable set {s:?} (router, router_plus_embed)")),
    }
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "instruct" => Ok(Regime::Instruct),
        "pretrain" => Ok(Regime::Pretrain),
        _ => Err(format!("unknown regime {s:?} (instruct, pretrain)")),
    }
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    DType::parse(&s.to_ascii_uppercase()).ok_or_else(|| format!("unknown dtype {s:?} (F16, BF16, F32, F64)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
