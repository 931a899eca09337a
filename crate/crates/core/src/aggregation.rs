//! Server-side layer-wise aggregation.
//!
//! For every prunable layer `l`, the new global value is the weighted mean
//! of the contributing clients' parameters, with weights renormalized over
//! the clients that actually uploaded `l`. A layer nobody uploaded keeps its
//! previous global value. Plain FedAvg is the case where every client
//! uploads every layer.

use crate::error::{Error, Result};
use crate::model::LayeredModel;
use crate::orchestrator::ClientState;
use crate::pruning::{LayerMask, PrunedPayload, prune_model};

/// Per-client aggregation weights `omega`, indexed by client id.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    omega: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if let Some((k, w)) = omega
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Contract(format!("client {k} has invalid weight {w}")));
        }
        Ok(AggregationWeights { omega })
    }

    pub fn uniform(num_clients: usize) -> Self {
        AggregationWeights {
            omega: vec![1.0; num_clients],
        }
    }

    /// FedAvg weights: proportional to local dataset sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        AggregationWeights {
            omega: sizes.iter().map(|&s| s as f64).collect(),
        }
    }

    pub fn get(&self, client: usize) -> Result<f64> {
        self.omega.get(client).copied().ok_or_else(|| {
            Error::Contract(format!("no aggregation weight for client {client}"))
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelState {
    pub model: LayeredModel,
    pub round: u32,
}

impl GlobalModelState {
    pub fn new(model: LayeredModel) -> Self {
        GlobalModelState { model, round: 0 }
    }
}

fn sorted_by_client(payloads: &[PrunedPayload]) -> Result<Vec<&PrunedPayload>> {
    let mut sorted: Vec<&PrunedPayload> = payloads.iter().collect();
    sorted.sort_by_key(|p| p.source_client);
    if let Some(w) = sorted.windows(2).find(|w| w[0].source_client == w[1].source_client) {
        return Err(Error::Contract(format!(
            "client {} uploaded twice in one round",
            w[0].source_client
        )));
    }
    Ok(sorted)
}

/// Normalized weights `(client, 1_k * w_k / sum_m 1_m * w_m)` of the clients
/// contributing layer `layer`, in client order. Empty when nobody (with
/// positive weight) contributed.
pub fn effective_weights(
    payloads: &[PrunedPayload],
    weights: &AggregationWeights,
    layer: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut contrib = Vec::new();
    for p in sorted_by_client(payloads)? {
        if p.layers.contains_key(&layer) {
            contrib.push((p.source_client, weights.get(p.source_client)?));
        }
    }
    let total: f64 = contrib.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Ok(Vec::new());
    }
    Ok(contrib.into_iter().map(|(k, w)| (k, w / total)).collect())
}

/// Number of payloads carrying each layer `1..=layers` (index 0 is layer 1).
pub fn contributor_counts(payloads: &[PrunedPayload], layers: usize) -> Vec<usize> {
    (1..=layers)
        .map(|l| payloads.iter().filter(|p| p.layers.contains_key(&l)).count())
        .collect()
}

/// Layer-wise pruned aggregation. Sums run in (layer, client id) order, so
/// the result does not depend on the order of `payloads`.
pub fn aggregate_layerwise(
    payloads: &[PrunedPayload],
    weights: &AggregationWeights,
    current: &GlobalModelState,
) -> Result<GlobalModelState> {
    let sorted = sorted_by_client(payloads)?;
    let num_layers = current.model.num_prunable();

    for p in &sorted {
        let w = weights.get(p.source_client)?;
        if w < 0.0 {
            return Err(Error::Contract(format!("negative weight for client {}", p.source_client)));
        }
        for (&l, params) in &p.layers {
            let target = current.model.layer(l).map_err(|_| Error::PayloadShape {
                client: p.source_client,
                layer: l,
                detail: format!("no such layer (model has {num_layers})"),
            })?;
            if params.weights.rows() != target.weights.rows()
                || params.weights.cols() != target.weights.cols()
                || params.bias.len() != target.bias.len()
            {
                return Err(Error::PayloadShape {
                    client: p.source_client,
                    layer: l,
                    detail: format!(
                        "{}x{} (+{}) vs global {}x{} (+{})",
                        params.weights.rows(),
                        params.weights.cols(),
                        params.bias.len(),
                        target.weights.rows(),
                        target.weights.cols(),
                        target.bias.len()
                    ),
                });
            }
        }
    }

    let mut next = current.model.clone();
    for l in 1..=num_layers {
        let contrib: Vec<(&PrunedPayload, f64)> = sorted
            .iter()
            .filter(|p| p.layers.contains_key(&l))
            .map(|p| Ok((*p, weights.get(p.source_client)?)))
            .collect::<Result<_>>()?;
        let total: f64 = contrib.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            // Nobody uploaded this layer: keep the previous global value.
            continue;
        }
        let block = next.layer_mut(l)?;
        let mut seen = 0.0;
        let mut first = true;
        let weight_len = block.weights.len();
        let mut lo = vec![f64::INFINITY; weight_len + block.bias.len()];
        let mut hi = vec![f64::NEG_INFINITY; weight_len + block.bias.len()];
        for (p, w) in contrib {
            if w == 0.0 {
                continue;
            }
            seen += w;
            let t = w / seen;
            let src = &p.layers[&l];
            let values = src.weights.as_slice().iter().chain(&src.bias);
            let dst = block.weights.as_mut_slice().iter_mut().chain(block.bias.iter_mut());
            for (i, (d, &v)) in dst.zip(values).enumerate() {
                // Running weighted mean: exact when all contributors agree.
                if first {
                    *d = v;
                } else {
                    *d += t * (v - *d);
                }
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
            first = false;
        }
        // Keep rounding drift inside the contributors' range.
        let dst = block.weights.as_mut_slice().iter_mut().chain(block.bias.iter_mut());
        for (i, d) in dst.enumerate() {
            *d = d.clamp(lo[i], hi[i]);
        }
    }
    Ok(GlobalModelState {
        model: next,
        round: current.round + 1,
    })
}

/// Eq-(1) aggregation of full local models: the all-ones-mask case of
/// [`aggregate_layerwise`].
pub fn fedavg_aggregate(
    full_models: &[(usize, &LayeredModel)],
    weights: &AggregationWeights,
    current: &GlobalModelState,
) -> Result<GlobalModelState> {
    let payloads = full_models
        .iter()
        .map(|&(client, model)| {
            prune_model(model, &LayerMask::ones(model.num_prunable()), client, current.round + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_layerwise(&payloads, weights, current)
}

/// Overwrites the shared layers `1..=L_k` of a local model with the global
/// values; a personalized head is left untouched. Returns the number of
/// parameters downloaded.
pub fn distribute_into(global: &GlobalModelState, local: &mut LayeredModel) -> Result<u64> {
    let shared = local.num_prunable();
    let mut downloaded = 0;
    for l in 1..=shared {
        let src = global.model.layer(l)?;
        let dst = local.layer_mut(l)?;
        if src.weights.rows() != dst.weights.rows() || src.weights.cols() != dst.weights.cols() {
            return Err(Error::Shape {
                block: dst.index,
                detail: format!("local layer {l} differs in shape from the global layer"),
            });
        }
        dst.weights.clone_from(&src.weights);
        dst.bias.clone_from(&src.bias);
        downloaded += src.param_count();
    }
    Ok(downloaded)
}

/// Applies the global model to a client. Homogeneous clients end up
/// bit-equal to the global model; heterogeneous clients only receive their
/// leading layers.
pub fn distribute(global: &GlobalModelState, client: &mut ClientState) -> Result<u64> {
    distribute_into(global, &mut client.model)
}
