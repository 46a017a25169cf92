//! Router initialisation: seeded noise, or prompt hidden-state directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compose::recipe::{Gating, RecipeSpec};
use crate::error::{Error, Result};
use crate::naming::{self, Site};
use crate::runtime::model::PromptHiddens;
use crate::tensorstore::{DType, Tensor};

/// One router matrix `(N, hidden)` for a routed site.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterEntry {
    pub layer: usize,
    pub site: Site,
    /// Row-major `(N, hidden)`.
    pub weights: Vec<f64>,
}

impl RouterEntry {
    pub fn name(&self) -> String {
        naming::router(self.layer, self.site)
    }
}

/// Every router of a mixture, in layer-major site order.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterBank {
    pub num_experts: usize,
    pub hidden_size: usize,
    pub entries: Vec<RouterEntry>,
}

impl RouterBank {
    pub fn tensors(&self, dtype: DType) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name(),
                    Tensor::encode(dtype, vec![self.num_experts, self.hidden_size], &e.weights),
                )
            })
            .collect()
    }

    pub fn get(&self, layer: usize, site: Site) -> Option<&RouterEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.site == site)
    }
}

/// The routed sites of every layer with their generator stream numbers.
pub fn routed_sites(recipe: &RecipeSpec, num_layers: usize) -> Vec<(usize, Site)> {
    let sites = recipe.sites();
    (0..num_layers)
        .flat_map(|l| sites.iter().map(move |&s| (l, s)))
        .collect()
}

/// Gaussian draw for one site: ChaCha8 seeded with `seed`, stream = site ordinal.
pub fn noise_matrix(seed: u64, stream: u64, rows: usize, cols: usize, sigma: f64) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidRecipe(format!("noise_sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok((0..rows * cols).map(|_| normal.sample(&mut rng)).collect())
}

/// Build the routers a recipe asks for.
///
/// `activations[i]` are expert `i`'s prompt statistics, required for `hidden_repr`.
pub fn init_router(
    recipe: &RecipeSpec,
    num_layers: usize,
    hidden_size: usize,
    activations: Option<&[PromptHiddens]>,
) -> Result<RouterBank> {
    let n = recipe.num_experts();
    let mut entries = Vec::new();
    match recipe.gating {
        Gating::Gateless => {}
        Gating::Noisy | Gating::Trained => {
            for (ordinal, (layer, site)) in routed_sites(recipe, num_layers).into_iter().enumerate() {
                entries.push(RouterEntry {
                    layer,
                    site,
                    weights: noise_matrix(recipe.seed, ordinal as u64, n, hidden_size, recipe.noise_sigma)?,
                });
            }
        }
        Gating::HiddenRepr => {
            let acts = activations.ok_or(Error::MissingActivations(0))?;
            if acts.len() < n {
                return Err(Error::MissingActivations(acts.len()));
            }
            let mut rows_per_layer = Vec::with_capacity(num_layers);
            for l in 0..num_layers {
                let mut w = Vec::with_capacity(n * hidden_size);
                for (i, a) in acts.iter().take(n).enumerate() {
                    let (pos, neg) = match (a.positive.get(l), a.negative.get(l)) {
                        (Some(p), Some(q)) if p.len() == hidden_size && q.len() == hidden_size => (p, q),
                        _ => return Err(Error::MissingActivations(i)),
                    };
                    w.extend(hidden_direction(pos, neg).ok_or(Error::ZeroNormHidden { layer: l, expert: i })?);
                }
                rows_per_layer.push(w);
            }
            for (layer, site) in routed_sites(recipe, num_layers) {
                entries.push(RouterEntry {
                    layer,
                    site,
                    weights: rows_per_layer[layer].clone(),
                });
            }
        }
    }
    Ok(RouterBank {
        num_experts: n,
        hidden_size,
        entries,
    })
}

/// `normalize(pos − neg)`, or `None` when the difference has zero norm.
pub fn hidden_direction(pos: &[f64], neg: &[f64]) -> Option<Vec<f64>> {
    let d: Vec<f64> = pos.iter().zip(neg).map(|(p, q)| p - q).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(d.into_iter().map(|v| v / norm).collect())
}
