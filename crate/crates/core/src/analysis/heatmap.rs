use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::naming::Site;
use crate::runtime::trace::{RouteRecord, RoutingTrace};

/// Per layer, the fraction of decisions in which each expert had the highest weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapTable {
    /// `[layer][expert]`
    pub fractions: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

impl HeatmapTable {
    pub fn num_layers(&self) -> usize {
        self.fractions.len()
    }

    /// Expert with the largest fraction at `layer`; ties go to the lower index.
    pub fn dominant(&self, layer: usize) -> usize {
        let row = &self.counts[layer];
        let mut best = 0;
        for (i, &c) in row.iter().enumerate() {
            if c > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,expert,fraction\n");
        for (l, row) in self.fractions.iter().enumerate() {
            for (e, f) in row.iter().enumerate() {
                writeln!(s, "{l},{e},{f}").unwrap();
            }
        }
        s
    }
}

/// Heat map over the records accepted by `keep`.
pub fn routing_heatmap_where(trace: &RoutingTrace, keep: impl Fn(&RouteRecord) -> bool) -> Result<HeatmapTable> {
    let (nl, ne) = (trace.num_layers, trace.num_experts);
    let mut counts = vec![vec![0usize; ne]; nl];
    for r in trace.records.iter().filter(|r| keep(r)) {
        if r.layer >= nl || r.top_expert >= ne {
            return Err(Error::Shape(format!(
                "trace record at layer {} expert {} outside {nl} layers x {ne} experts",
                r.layer, r.top_expert
            )));
        }
        counts[r.layer][r.top_expert] += 1;
    }
    if nl == 0 || counts.iter().any(|row| row.iter().all(|&c| c == 0)) {
        return Err(Error::EmptyTrace);
    }
    let fractions = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter().map(|&c| c as f64 / total as f64).collect()
        })
        .collect();
    Ok(HeatmapTable { fractions, counts })
}

/// Heat map of one routed site.
pub fn routing_heatmap_site(trace: &RoutingTrace, site: Site) -> Result<HeatmapTable> {
    routing_heatmap_where(trace, |r| r.site == site)
}

/// Heat map over the FFN decisions (the three projection sites pooled for fgmlp).
pub fn routing_heatmap(trace: &RoutingTrace) -> Result<HeatmapTable> {
    routing_heatmap_where(trace, |r| r.site.is_ffn())
}
