//! Layer-preservation masks, heterogeneous sub-model assignment and pruned
//! upload payloads.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::model::{Activation, LayerBlock, LayeredModel, Matrix};

/// One preservation bit per prunable layer; `bits[l - 1]` is layer `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerMask {
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn new(bits: Vec<bool>) -> Self {
        LayerMask { bits }
    }

    pub fn ones(len: usize) -> Self {
        LayerMask { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        LayerMask { bits: vec![false; len] }
    }

    /// Mask keeping exactly layers `1..=count` of `len`.
    pub fn prefix(len: usize, count: usize) -> Self {
        LayerMask {
            bits: (1..=len).map(|l| l <= count).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Whether 1-based layer `l` is kept.
    pub fn keeps(&self, l: usize) -> bool {
        l >= 1 && self.bits.get(l - 1).copied().unwrap_or(false)
    }

    pub fn set(&mut self, l: usize, keep: bool) {
        self.bits[l - 1] = keep;
    }

    /// Kept layers, 1-based, ascending.
    pub fn kept_layers(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Layer-preserving rates, one probability per prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LprConfig {
    rates: Vec<f64>,
}

impl LprConfig {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if let Some(bad) = rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("LPR {bad} outside [0, 1]")));
        }
        Ok(LprConfig { rates })
    }

    pub fn uniform(p: f64, layers: usize) -> Result<Self> {
        Self::new(vec![p; layers])
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }
}

/// Independent Bernoulli draw per layer. Exactly one uniform variate is
/// consumed per layer, so the stream position does not depend on the rates.
pub fn draw_mask<R: Rng + ?Sized>(lpr: &LprConfig, rng: &mut R) -> LayerMask {
    LayerMask {
        bits: lpr
            .rates
            .iter()
            .map(|&p| rng.random::<f64>() < p)
            .collect(),
    }
}

/// Parameters of one prunable layer as uploaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn of(block: &LayerBlock) -> Self {
        LayerParams {
            weights: block.weights.clone(),
            bias: block.bias.clone(),
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }
}

/// Layers a client uploads in one round, keyed by 1-based layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedPayload {
    pub layers: BTreeMap<usize, LayerParams>,
    pub source_client: usize,
    pub round: u32,
}

impl PrunedPayload {
    pub fn param_count(&self) -> u64 {
        self.layers.values().map(LayerParams::param_count).sum()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }
}

/// Copies the masked-in prunable layers of `model`. A personalized head is
/// not a prunable layer and can never be selected.
pub fn prune_model(
    model: &LayeredModel,
    mask: &LayerMask,
    source_client: usize,
    round: u32,
) -> Result<PrunedPayload> {
    if mask.len() != model.num_prunable() {
        return Err(Error::MaskLength {
            expected: model.num_prunable(),
            got: mask.len(),
        });
    }
    let mut layers = BTreeMap::new();
    for l in mask.kept_layers() {
        layers.insert(l, LayerParams::of(model.layer(l)?));
    }
    Ok(PrunedPayload {
        layers,
        source_client,
        round,
    })
}

/// Probability vector over layer counts `1..=L`; `probs[i]` is for `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LcDistribution {
    probs: Vec<f64>,
}

impl LcDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty LC distribution".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("LC probabilities must be nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "LC distribution sums to {sum}, not 1"
            )));
        }
        Ok(LcDistribution { probs })
    }

    pub fn uniform(layers: usize) -> Self {
        LcDistribution {
            probs: vec![1.0 / layers as f64; layers],
        }
    }

    /// `0.6` on `favoured`, the remaining mass split evenly over the other
    /// counts (0.1 each when `layers == 5`).
    pub fn favouring(favoured: usize, layers: usize) -> Result<Self> {
        if favoured == 0 || favoured > layers {
            return Err(Error::InvalidArgument(format!(
                "favoured layer count {favoured} outside 1..={layers}"
            )));
        }
        if layers == 1 {
            return Ok(LcDistribution { probs: vec![1.0] });
        }
        let other = 0.4 / (layers - 1) as f64;
        Self::new(
            (1..=layers)
                .map(|l| if l == favoured { 0.6 } else { other })
                .collect(),
        )
    }

    pub fn point_mass(count: usize, layers: usize) -> Result<Self> {
        if count == 0 || count > layers {
            return Err(Error::InvalidArgument(format!("layer count {count} outside 1..={layers}")));
        }
        Ok(LcDistribution {
            probs: (1..=layers).map(|l| if l == count { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_layers(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeteroAssignment {
    pub layer_count: usize,
    pub has_personal_head: bool,
}

/// Draws one layer count per client from `dist`. Assignments are meant to
/// be drawn once and kept for the whole run.
pub fn assign_hetero<R: Rng + ?Sized>(
    dist: &LcDistribution,
    num_clients: usize,
    layers: usize,
    rng: &mut R,
) -> Result<Vec<HeteroAssignment>> {
    if dist.max_layers() != layers {
        return Err(Error::InvalidArgument(format!(
            "LC distribution covers {} layer counts, model has {layers}",
            dist.max_layers()
        )));
    }
    let sampler = WeightedIndex::new(&dist.probs)
        .map_err(|e| Error::InvalidArgument(format!("LC distribution: {e}")))?;
    Ok((0..num_clients)
        .map(|_| {
            let layer_count = sampler.sample(rng) + 1;
            HeteroAssignment {
                layer_count,
                has_personal_head: layer_count < layers,
            }
        })
        .collect())
}

/// The first `layer_count` layers of `template`, plus a freshly initialized
/// dense head mapping to the class logits when the sub-model is truncated.
pub fn build_hetero_model<R: Rng + ?Sized>(
    template: &LayeredModel,
    assignment: &HeteroAssignment,
    rng: &mut R,
) -> Result<LayeredModel> {
    let l_full = template.num_prunable();
    let lk = assignment.layer_count;
    if lk == 0 || lk > l_full {
        return Err(Error::InvalidArgument(format!(
            "layer count {lk} outside 1..={l_full}"
        )));
    }
    if lk == l_full {
        return Ok(template.clone());
    }
    let mut blocks = template.leading_blocks(lk)?;
    let fan_in = blocks.last().map_or(template.input_dim(), LayerBlock::fan_out);
    blocks.push(LayerBlock::dense_init(
        fan_in,
        template.output_dim(),
        Activation::SoftmaxOutput,
        rng,
    ));
    LayeredModel::with_head(blocks)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn five_layer(rng: &mut ChaCha8Rng) -> LayeredModel {
        LayeredModel::mlp(6, &[8, 8, 8, 5], 3, rng).unwrap()
    }

    #[test]
    fn degenerate_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_mask(&LprConfig::uniform(1.0, 5).unwrap(), &mut rng), LayerMask::ones(5));
        assert_eq!(draw_mask(&LprConfig::uniform(0.0, 5).unwrap(), &mut rng), LayerMask::zeros(5));
    }

    #[test]
    fn lpr_out_of_range_rejected() {
        assert!(LprConfig::new(vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn prune_selects_exact_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = five_layer(&mut rng);
        let mask = LayerMask::new(vec![true, false, true, false, false]);
        let p = prune_model(&m, &mask, 4, 2).unwrap();
        assert_eq!(p.layer_indices(), vec![1, 3]);
        assert_eq!(p.param_count(), m.param_count(Some(&[1, 3])).unwrap());
        assert_eq!(p.layers[&3].weights, m.layer(3).unwrap().weights);

        let all = prune_model(&m, &LayerMask::ones(5), 0, 0).unwrap();
        assert_eq!(all.param_count(), m.param_count(None).unwrap());
        let none = prune_model(&m, &LayerMask::zeros(5), 0, 0).unwrap();
        assert!(none.layers.is_empty());

        assert!(matches!(
            prune_model(&m, &LayerMask::ones(4), 0, 0),
            Err(Error::MaskLength { expected: 5, got: 4 })
        ));
    }

    #[test]
    fn lc_distribution_validation() {
        assert!(LcDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(LcDistribution::new(vec![0.5, 0.5 + 1e-12]).is_ok());
        let h3 = LcDistribution::favouring(3, 5).unwrap();
        assert_eq!(h3.probs()[2], 0.6);
        assert!((h3.probs()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn point_mass_gives_full_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = LcDistribution::point_mass(5, 5).unwrap();
        let a = assign_hetero(&d, 50, 5, &mut rng).unwrap();
        assert!(a.iter().all(|x| x.layer_count == 5 && !x.has_personal_head));
    }

    #[test]
    fn hetero_model_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = five_layer(&mut rng);

        let full = build_hetero_model(
            &t,
            &HeteroAssignment { layer_count: 5, has_personal_head: false },
            &mut rng,
        )
        .unwrap();
        assert_eq!(full, t);
        assert!(full.head().is_none());

        let one = build_hetero_model(
            &t,
            &HeteroAssignment { layer_count: 1, has_personal_head: true },
            &mut rng,
        )
        .unwrap();
        assert_eq!(one.num_prunable(), 1);
        assert_eq!(one.layer(1).unwrap(), t.layer(1).unwrap());
        // (fan_out of layer 1 + 1) * classes
        assert_eq!(one.head().unwrap().param_count(), (8 + 1) * 3);
        // The head is never addressable as a prunable layer.
        let p = prune_model(&one, &LayerMask::ones(1), 0, 0).unwrap();
        assert_eq!(p.param_count(), t.param_count(Some(&[1])).unwrap());
    }

    #[test]
    fn truncated_model_has_fewer_flops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = five_layer(&mut rng);
        for lk in 1..5 {
            let m = build_hetero_model(
                &t,
                &HeteroAssignment { layer_count: lk, has_personal_head: true },
                &mut rng,
            )
            .unwrap();
            let (sub, full) = (m.flops_count(None).unwrap(), t.flops_count(None).unwrap());
            if lk + 1 < 5 {
                assert!(sub < full);
            } else {
                // The head has exactly the shape of the dropped output layer.
                assert_eq!(sub, full);
            }
        }
    }
}
