use serde::Serialize;

use crate::naming::Site;
use crate::runtime::gate::GateDecision;

/// One gate decision made while running a sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteRecord {
    pub layer: usize,
    pub site: Site,
    pub token: usize,
    pub top_expert: usize,
    pub decision: GateDecision<f64>,
}

/// Every gate decision of one or more forward passes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoutingTrace {
    pub num_layers: usize,
    pub num_experts: usize,
    pub records: Vec<RouteRecord>,
}

impl RoutingTrace {
    pub fn new(num_layers: usize, num_experts: usize) -> Self {
        RoutingTrace {
            num_layers,
            num_experts,
            records: Vec::new(),
        }
    }

    pub fn push<S: crate::scalar::Scalar>(&mut self, layer: usize, site: Site, token: usize, d: &GateDecision<S>) {
        self.records.push(RouteRecord {
            layer,
            site,
            token,
            top_expert: d.top_expert(),
            decision: d.to_f64(),
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append another trace, offsetting its token indices past ours.
    pub fn merge(&mut self, other: RoutingTrace) {
        let offset = self.records.iter().map(|r| r.token + 1).max().unwrap_or(0);
        self.num_layers = self.num_layers.max(other.num_layers);
        self.num_experts = self.num_experts.max(other.num_experts);
        self.records.extend(other.records.into_iter().map(|mut r| {
            r.token += offset;
            r
        }));
        self.records.sort_by_key(|r| (r.layer, r.token));
    }

    pub fn sites(&self) -> Vec<Site> {
        let mut s: Vec<Site> = Vec::new();
        for r in &self.records {
            if !s.contains(&r.site) {
                s.push(r.site);
            }
        }
        s
    }
}
