//! Closed-form parameter, FLOP and memory counts for dense models and mixtures.
//!
//! FLOPs follow the matrix-vector convention: two per weight touched by one
//! token. Attention score and softmax work depends on sequence length and is
//! left out, as are norms in the FLOP totals.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::ArchDescriptor;
use crate::compose::recipe::{ExpertKind, Gating, RecipeSpec};
use crate::tensorstore::DType;

/// Default accelerator memory budget in decimal GB.
pub const DEFAULT_BUDGET_GB: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub total_params: u64,
    pub active_params_per_token: u64,
    pub ffn_flops_per_token: u64,
    pub router_flops_per_token: u64,
    pub attn_flops_per_token: u64,
    pub lm_head_flops_per_token: u64,
    /// FFN parameters touched per token.
    pub active_ffn_params: u64,
    pub router_params: u64,
}

impl CostReport {
    pub fn memory_bytes(&self, dtype: DType) -> u64 {
        self.total_params * dtype.byte_width() as u64
    }

    /// Decimal gigabytes.
    pub fn memory_gb(&self, dtype: DType) -> f64 {
        self.memory_bytes(dtype) as f64 / 1e9
    }

    pub fn total_flops_per_token(&self) -> u64 {
        self.ffn_flops_per_token + self.router_flops_per_token + self.attn_flops_per_token + self.lm_head_flops_per_token
    }
}

struct Shared {
    total: u64,
    active: u64,
    lm_head_flops: u64,
}

/// Embedding, lm_head and norms.
fn shared(arch: &ArchDescriptor) -> Shared {
    let (h, v, l) = (arch.hidden_size as u64, arch.vocab_size as u64, arch.num_layers as u64);
    let norms = 2 * h * l + h;
    Shared {
        total: 2 * v * h + norms,
        // one embedding row is read per token
        active: h + v * h + norms,
        lm_head_flops: 2 * v * h,
    }
}

/// Counts for the dense checkpoint.
pub fn dense_cost(arch: &ArchDescriptor) -> CostReport {
    let s = shared(arch);
    let l = arch.num_layers as u64;
    let attn = arch.attn_params_per_layer() as u64 * l;
    let ffn = arch.ffn_params_per_layer() as u64 * l;
    CostReport {
        total_params: s.total + attn + ffn,
        active_params_per_token: s.active + attn + ffn,
        ffn_flops_per_token: 2 * ffn,
        router_flops_per_token: 0,
        attn_flops_per_token: 2 * attn,
        lm_head_flops_per_token: s.lm_head_flops,
        active_ffn_params: ffn,
        router_params: 0,
    }
}

/// Parameters of one rank-`r` adapter over the three FFN projections, all layers.
pub fn lora_params(arch: &ArchDescriptor, rank: usize) -> u64 {
    let (h, f) = (arch.hidden_size as u64, arch.ffn_intermediate_size as u64);
    3 * rank as u64 * (h + f) * arch.num_layers as u64
}

/// Counts for the mixture `recipe` would compose on top of `arch`.
///
/// LoRA experts are priced as rank-0 adapters here; use
/// [`cost_estimate_with_lora`] when the rank is known.
pub fn cost_estimate(arch: &ArchDescriptor, recipe: &RecipeSpec) -> CostReport {
    cost_estimate_with_lora(arch, recipe, 0)
}

pub fn cost_estimate_with_lora(arch: &ArchDescriptor, recipe: &RecipeSpec, lora_rank: usize) -> CostReport {
    let s = shared(arch);
    let n = recipe.num_experts() as u64;
    let (h, l) = (arch.hidden_size as u64, arch.num_layers as u64);
    let active_n = match recipe.gating {
        Gating::Gateless => n,
        _ => (recipe.top_k as u64).min(n),
    };

    let attn_one = arch.attn_params_per_layer() as u64 * l;
    let (attn_total, attn_active) = if recipe.mix_attention {
        (n * attn_one, active_n * attn_one)
    } else {
        (attn_one, attn_one)
    };

    let ffn_one = arch.ffn_params_per_layer() as u64 * l;
    let adapter = lora_params(arch, lora_rank);
    let per_expert = |kind: ExpertKind| match kind {
        ExpertKind::Full => ffn_one,
        ExpertKind::Lora => adapter,
    };
    let base_ffn = if recipe.has_lora() { ffn_one } else { 0 };
    let ffn_total = base_ffn + recipe.experts.iter().map(|e| per_expert(e.kind)).sum::<u64>();
    // The costliest experts bound what a token can touch.
    let mut sizes: Vec<u64> = recipe.experts.iter().map(|e| per_expert(e.kind)).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let ffn_active = base_ffn + sizes.iter().take(active_n as usize).sum::<u64>();

    let router = if recipe.gating.has_router() {
        recipe.sites().len() as u64 * n * h * l
    } else {
        0
    };

    CostReport {
        total_params: s.total + attn_total + ffn_total + router,
        active_params_per_token: s.active + attn_active + ffn_active + router,
        ffn_flops_per_token: 2 * ffn_active,
        router_flops_per_token: 2 * router,
        attn_flops_per_token: 2 * attn_active,
        lm_head_flops_per_token: s.lm_head_flops,
        active_ffn_params: ffn_active,
        router_params: router,
    }
}

/// One row of the cost grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub mode: Gating,
    pub num_experts: usize,
    pub report: CostReport,
    pub memory_gb: f64,
    pub over_budget: bool,
    /// Total FLOPs relative to the smallest N of the same mode.
    pub relative_flops: f64,
    /// Memory relative to the smallest N of the same mode.
    pub relative_memory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostGrid {
    pub dtype: DType,
    pub budget_gb: f64,
    pub rows: Vec<CostRow>,
}

impl CostGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,N,total_params,active_params,ffn_flops,router_flops,memory_gb,over_budget\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.3},{}",
                r.mode.as_str(),
                r.num_experts,
                r.report.total_params,
                r.report.active_params_per_token,
                r.report.ffn_flops_per_token,
                r.report.router_flops_per_token,
                r.memory_gb,
                r.over_budget
            )
            .unwrap();
        }
        s
    }

    pub fn rows_for(&self, mode: Gating) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn get(&self, mode: Gating, n: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.mode == mode && r.num_experts == n)
    }
}

/// Lay reports out as a grid with relative cost, memory and the over-budget flag.
pub fn compare_cost_tables(reports: &[(Gating, usize, CostReport)], dtype: DType, budget_gb: f64) -> CostGrid {
    let mut rows = Vec::with_capacity(reports.len());
    for &(mode, n, report) in reports {
        let reference = reports
            .iter()
            .filter(|r| r.0 == mode)
            .min_by_key(|r| r.1)
            .map(|r| r.2)
            .unwrap_or(report);
        let memory_gb = report.memory_gb(dtype);
        rows.push(CostRow {
            mode,
            num_experts: n,
            report,
            memory_gb,
            over_budget: memory_gb > budget_gb,
            relative_flops: report.total_flops_per_token() as f64 / reference.total_flops_per_token() as f64,
            relative_memory: report.total_params as f64 / reference.total_params as f64,
        });
    }
    CostGrid { dtype, budget_gb, rows }
}

/// Estimate every `(mode, N)` pair with full experts and top-`k` routing.
pub fn cost_grid(
    arch: &ArchDescriptor,
    modes: &[Gating],
    ns: &[usize],
    top_k: usize,
    dtype: DType,
    budget_gb: f64,
) -> CostGrid {
    let mut reports = Vec::new();
    for &mode in modes {
        for &n in ns {
            let mut recipe = RecipeSpec::new(
                mode,
                (0..n).map(|i| crate::compose::recipe::ExpertEntry::full(format!("expert{i}"))).collect(),
            );
            recipe.top_k = top_k;
            reports.push((mode, n, cost_estimate(arch, &recipe)));
        }
    }
    compare_cost_tables(&reports, dtype, budget_gb)
}
