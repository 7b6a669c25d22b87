//! Attack procedures. Each one mutates the model in place and returns the
//! [`FlipPlan`] it committed.
//!
//! Only weight tensors are attacked; biases are never candidates. Rankings are
//! deterministic: equal scores are broken by (layer order, offset, bit).

mod plan;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::{
    eligible_direction, exponent_bit_gradient_unchecked, flip_bit_unchecked, get_bit_unchecked, rank_key, BitAddress, FlipRecord,
    RangeConstraint, Role, EXPONENT_LSB, EXPONENT_MSB,
};
use crate::error::{Error, Result};
use crate::nn::{Activations, Batch, BatchLoss, LossGradSnapshot, Model};

pub use plan::{apply_plan, revert_plan, FlipPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Random,
    Exhaustive,
    ModelWise,
    LayerWise,
    WeightStealth,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Random,
        AttackKind::Exhaustive,
        AttackKind::ModelWise,
        AttackKind::LayerWise,
        AttackKind::WeightStealth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Random => "random",
            AttackKind::Exhaustive => "exhaustive",
            AttackKind::ModelWise => "model-wise",
            AttackKind::LayerWise => "layer-wise",
            AttackKind::WeightStealth => "weight-stealth",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::arg(format!("unknown attack method `{s}`")))
    }
}

/// Attack parameters. The total bit budget is `n_b`, or `k * n_b` for weight-stealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub n_b: usize,
    pub k: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, n_b: usize) -> Self {
        Self {
            kind,
            n_b,
            k: 1,
            batch_size: 128,
            seed: 0,
        }
    }

    pub fn budget(&self) -> usize {
        match self.kind {
            AttackKind::WeightStealth => self.k * self.n_b,
            _ => self.n_b,
        }
    }
}

/// A scored flip candidate; `layer` is the model layer index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    layer: usize,
    offset: usize,
    bit: u8,
    score: f64,
    grad: f32,
}

impl Candidate {
    fn tie(&self) -> (usize, usize, u8) {
        (self.layer, self.offset, self.bit)
    }
}

/// Highest `|score|` first; non-finite scores last.
fn sort_by_magnitude(c: &mut [Candidate]) {
    c.sort_by(|a, b| {
        rank_key(b.score.abs())
            .total_cmp(&rank_key(a.score.abs()))
            .then_with(|| a.tie().cmp(&b.tie()))
    });
}

fn weight_layers(model: &Model) -> Vec<usize> {
    model.param_layers()
}

fn weights(model: &Model, layer: usize) -> &[f32] {
    model.param(layer, Role::Weight).expect("parameter layer has weights").data()
}

fn record(model: &Model, c: &Candidate) -> FlipRecord {
    let address = BitAddress {
        layer: model.layers()[c.layer].name().to_string(),
        role: Role::Weight,
        offset: c.offset,
        bit: c.bit,
    };
    FlipRecord::new(address, weights(model, c.layer)[c.offset], c.score, c.grad)
}

fn flip_in_place(model: &mut Model, layer: usize, offset: usize, bit: u8) {
    let v = &mut model.param_mut(layer, Role::Weight).unwrap().data_mut()[offset];
    *v = flip_bit_unchecked(*v, bit);
}

/// Records the candidates against the current values, then flips them all.
fn commit(model: &mut Model, chosen: &[Candidate], requested: usize) -> FlipPlan {
    let records = chosen.iter().map(|c| record(model, c)).collect();
    for c in chosen {
        flip_in_place(model, c.layer, c.offset, c.bit);
    }
    FlipPlan::new(records, requested)
}

/// Flips `chosen`, measures the batch loss from `layer` onward, and restores the bits.
fn probe_layer(model: &mut Model, acts: &Activations, layer: usize, chosen: &[Candidate], labels: &[u8]) -> BatchLoss {
    for c in chosen {
        flip_in_place(model, c.layer, c.offset, c.bit);
    }
    let loss = model.loss_from(acts, layer, labels);
    for c in chosen.iter().rev() {
        flip_in_place(model, c.layer, c.offset, c.bit);
    }
    loss
}

fn cached(model: &Model, batch: &Batch) -> Result<Activations> {
    // Validates shapes and labels before any probing.
    model.batch_loss(batch)?;
    Ok(model.forward_cached(batch.images.data(), batch.len()))
}

fn grads_for(snap: &LossGradSnapshot, layer: usize) -> &[f32] {
    snap.by_index(layer, Role::Weight).expect("snapshot covers every weight")
}

/// Flips the exponent MSB of `n_b` distinct weights drawn uniformly with `seed`.
pub fn random_attack(model: &mut Model, n_b: usize, seed: u64) -> Result<FlipPlan> {
    let layers = weight_layers(model);
    let sizes: Vec<usize> = layers.iter().map(|&l| weights(model, l).len()).collect();
    let total: usize = sizes.iter().sum();
    if n_b > total {
        return Err(Error::arg(format!("cannot flip {n_b} bits in {total} weights")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, n_b).into_vec();
    picks.sort_unstable();
    let chosen: Vec<Candidate> = picks
        .into_iter()
        .map(|mut g| {
            let mut li = 0;
            while g >= sizes[li] {
                g -= sizes[li];
                li += 1;
            }
            Candidate {
                layer: layers[li],
                offset: g,
                bit: EXPONENT_MSB,
                score: 0.0,
                grad: f32::NAN,
            }
        })
        .collect();
    Ok(commit(model, &chosen, n_b))
}

/// Probes the exponent MSB of every weight, one at a time, and commits the
/// `n_b` flips with the highest individual batch loss. A non-finite loss counts
/// as more damaging than any finite one, and among those the flip that saturates
/// more samples wins. No direction filter is applied.
pub fn exhaustive_attack(model: &mut Model, batch: &Batch, n_b: usize) -> Result<FlipPlan> {
    let acts = cached(model, batch)?;
    let labels = &batch.labels;
    let mut scored = Vec::new();
    for layer in weight_layers(model) {
        let w = weights(model, layer);
        let probe = |offset: usize| -> (BatchLoss, Candidate) {
            let flipped = flip_bit_unchecked(w[offset], EXPONENT_MSB);
            let loss = model.probe_param_loss(&acts, layer, Role::Weight, offset, flipped, labels);
            let c = Candidate {
                layer,
                offset,
                bit: EXPONENT_MSB,
                score: loss.mean,
                grad: f32::NAN,
            };
            (loss, c)
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            scored.par_extend((0..w.len()).into_par_iter().map(probe));
        }
        #[cfg(not(feature = "parallel"))]
        scored.extend((0..w.len()).map(probe));
    }
    scored.sort_by(|(la, a), (lb, b)| lb.severity_cmp(la).then_with(|| a.tie().cmp(&b.tie())));
    let chosen: Vec<Candidate> = scored.into_iter().take(n_b).map(|(_, c)| c).collect();
    Ok(commit(model, &chosen, n_b))
}

/// Eligible exponent-MSB candidates of one layer, best first.
fn msb_candidates(model: &Model, snap: &LossGradSnapshot, layer: usize) -> Vec<Candidate> {
    let w = weights(model, layer);
    let g = grads_for(snap, layer);
    let mut c: Vec<Candidate> = w
        .iter()
        .zip(g)
        .enumerate()
        .filter(|(_, (&w, &g))| eligible_direction(get_bit_unchecked(w, EXPONENT_MSB), w, g))
        .map(|(offset, (&w, &g))| Candidate {
            layer,
            offset,
            bit: EXPONENT_MSB,
            score: exponent_bit_gradient_unchecked(w, g, EXPONENT_MSB),
            grad: g,
        })
        .collect();
    sort_by_magnitude(&mut c);
    c
}

/// One backward pass; all weights ranked together by `|w * dL/dw|`; the top
/// `n_b` direction-eligible exponent MSBs are flipped at once.
pub fn model_wise_attack(model: &mut Model, batch: &Batch, n_b: usize) -> Result<FlipPlan> {
    let snap = model.loss_and_grad(batch)?;
    let mut all: Vec<Candidate> = weight_layers(model)
        .into_iter()
        .flat_map(|l| msb_candidates(model, &snap, l))
        .collect();
    sort_by_magnitude(&mut all);
    all.truncate(n_b);
    Ok(commit(model, &all, n_b))
}

/// One backward pass; for each layer the top `n_b` eligible exponent MSBs are
/// flipped, the batch loss measured, and the bits restored. The flips of the
/// layer with the highest loss are committed.
pub fn layer_wise_attack(model: &mut Model, batch: &Batch, n_b: usize) -> Result<FlipPlan> {
    let snap = model.loss_and_grad(batch)?;
    let acts = cached(model, batch)?;
    let mut best: Option<(BatchLoss, Vec<Candidate>)> = None;
    for layer in weight_layers(model) {
        let mut c = msb_candidates(model, &snap, layer);
        c.truncate(n_b);
        if c.is_empty() {
            continue;
        }
        let loss = probe_layer(model, &acts, layer, &c, &batch.labels);
        if best.as_ref().is_none_or(|(b, _)| loss.severity_cmp(b).is_gt()) {
            best = Some((loss, c));
        }
    }
    Ok(match best {
        Some((_, c)) => commit(model, &c, n_b),
        None => FlipPlan::empty(n_b),
    })
}

/// Progress hook for [`weight_stealth_attack`]: called after each iteration with
/// the iteration number (1-based) and the model as mutated so far.
pub type IterationObserver<'a> = dyn FnMut(usize, &Model) -> Result<()> + 'a;

/// Per-weight best exponent bit that is direction-eligible, keeps the value
/// inside the layer range, and has not been flipped before in this attack.
fn stealth_candidates(
    model: &Model,
    snap: &LossGradSnapshot,
    layer: usize,
    constraint: &RangeConstraint,
    used: &HashSet<(usize, usize, u8)>,
) -> Result<Vec<Candidate>> {
    let name = model.layers()[layer].name();
    let range = constraint
        .get(name)
        .ok_or_else(|| Error::arg(format!("range constraint has no entry for layer `{name}`")))?;
    let w = weights(model, layer);
    let g = grads_for(snap, layer);
    let mut out = Vec::new();
    for (offset, (&w, &g)) in w.iter().zip(g).enumerate() {
        // Bits are visited in decreasing coefficient order, so the first hit is the best.
        for bit in EXPONENT_MSB..=EXPONENT_LSB {
            if !eligible_direction(get_bit_unchecked(w, bit), w, g) {
                continue;
            }
            if used.contains(&(layer, offset, bit)) || !range.contains(flip_bit_unchecked(w, bit)) {
                continue;
            }
            let score = exponent_bit_gradient_unchecked(w, g, bit);
            if score.is_finite() {
                out.push(Candidate {
                    layer,
                    offset,
                    bit,
                    score,
                    grad: g,
                });
            }
            break;
        }
    }
    sort_by_magnitude(&mut out);
    Ok(out)
}

/// `k` rounds of range-constrained exponent-bit flipping.
///
/// Each round draws a batch from `next_batch`, takes one gradient, and for
/// every layer picks the top `n_b` candidates over exponent bits 1..=8 scored
/// by `|dL/db_i|`, keeping only flips that increase the loss to first order
/// and leave the weight inside its layer's pristine `[min, max]`. At most one
/// bit per weight is chosen per round. The layer whose probed loss is highest
/// gets its flips committed before the next round.
pub fn weight_stealth_attack(
    model: &mut Model,
    mut next_batch: impl FnMut(usize) -> Result<Batch>,
    k: usize,
    n_b: usize,
    constraint: &RangeConstraint,
    mut observer: Option<&mut IterationObserver<'_>>,
) -> Result<FlipPlan> {
    let mut plan = FlipPlan::empty(0);
    let mut used = HashSet::new();
    for iter in 0..k {
        let batch = next_batch(iter)?;
        let snap = model.loss_and_grad(&batch)?;
        let acts = cached(model, &batch)?;
        let mut best: Option<(BatchLoss, Vec<Candidate>)> = None;
        for layer in weight_layers(model) {
            let mut c = stealth_candidates(model, &snap, layer, constraint, &used)?;
            c.truncate(n_b);
            if c.is_empty() {
                continue;
            }
            let loss = probe_layer(model, &acts, layer, &c, &batch.labels);
            if best.as_ref().is_none_or(|(b, _)| loss.severity_cmp(b).is_gt()) {
                best = Some((loss, c));
            }
        }
        let round = match best {
            Some((_, c)) => {
                used.extend(c.iter().map(|c| c.tie()));
                commit(model, &c, n_b)
            }
            None => FlipPlan::empty(n_b),
        };
        plan.extend(round);
        if let Some(obs) = observer.as_deref_mut() {
            obs(iter + 1, model)?;
        }
    }
    Ok(plan)
}

/// Per-layer `[min, max]` of the weight tensors, taken from a pristine model.
pub fn range_constraint(model: &Model) -> Result<RangeConstraint> {
    RangeConstraint::from_layers(
        weight_layers(model)
            .into_iter()
            .map(|l| (model.layers()[l].name(), weights(model, l))),
    )
}

/// Counts weights outside their layer's range (NaN counts as outside).
pub fn range_violations(model: &Model, constraint: &RangeConstraint) -> Result<Vec<(String, usize)>> {
    weight_layers(model)
        .into_iter()
        .map(|l| {
            let name = model.layers()[l].name();
            let r = constraint
                .get(name)
                .ok_or_else(|| Error::arg(format!("range constraint has no entry for layer `{name}`")))?;
            Ok((name.to_string(), weights(model, l).iter().filter(|&&v| !r.contains(v)).count()))
        })
        .collect()
}
