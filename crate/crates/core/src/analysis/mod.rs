//! Cost model and routing heat maps.

pub mod cost;
pub mod heatmap;

pub use cost::{compare_cost_tables, cost_estimate, cost_estimate_with_lora, cost_grid, dense_cost, CostGrid, CostReport, CostRow, DEFAULT_BUDGET_GB};
pub use heatmap::{routing_heatmap, routing_heatmap_site, routing_heatmap_where, HeatmapTable};
