//! Sneaky-range predicate and ImpactScore.
//!
//! A flip is sneaky when the post-flip effective value stays inside the
//! owning tensor's `[w_min, w_max]` (bounds inclusive). The ImpactScore of a
//! weight is `|grad| * max |delta|` over its sneaky flips.

use serde::{Deserialize, Serialize};

use crate::tensormodel::{EffectiveFlip, LayerStats, ModelBundle};

/// Address of one scalar weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WeightRef {
    pub tensor_id: usize,
    pub flat_index: usize,
}

impl WeightRef {
    pub fn new(tensor_id: usize, flat_index: usize) -> WeightRef {
        WeightRef { tensor_id, flat_index }
    }
}

/// One scored single-bit flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipCandidate {
    pub weight: WeightRef,
    pub bit_position: u32,
    #[serde(with = "crate::serde_ext::ieee")]
    pub old_value: f64,
    #[serde(with = "crate::serde_ext::ieee")]
    pub delta: f64,
    #[serde(with = "crate::serde_ext::ieee")]
    pub new_value: f64,
    #[serde(with = "crate::serde_ext::ieee")]
    pub impact_score: f64,
    /// False only for range-free baseline candidates that decode to NaN/Inf.
    pub finite: bool,
}

impl FlipCandidate {
    /// Queue order key: score descending, then (tensor, index, bit) ascending.
    pub fn tie_key(&self) -> (usize, usize, u32) {
        (self.weight.tensor_id, self.weight.flat_index, self.bit_position)
    }
}

/// True iff `w_min <= old + delta <= w_max`; non-finite sums are never sneaky.
pub fn is_sneaky(old: f64, delta: f64, stats: LayerStats) -> bool {
    stats.contains(old + delta)
}

pub(crate) fn candidate_from(weight: WeightRef, old: f64, grad: f64, flip: &EffectiveFlip) -> FlipCandidate {
    let magnitude = if flip.new_value.finite().is_some() { flip.delta.abs() } else { f64::INFINITY };
    let impact_score = if grad == 0.0 { 0.0 } else { grad.abs() * magnitude };
    FlipCandidate {
        weight,
        bit_position: flip.bit_position,
        old_value: old,
        delta: flip.delta,
        new_value: flip.new_value.to_f64(),
        impact_score,
        finite: flip.new_value.finite().is_some(),
    }
}

/// Picks, among `flips` accepted by `keep`, the one with the largest
/// magnitude (lowest bit position on ties).
pub(crate) fn best_of<'a>(
    flips: impl IntoIterator<Item = &'a EffectiveFlip>,
    keep: impl Fn(&EffectiveFlip) -> bool,
) -> Option<&'a EffectiveFlip> {
    let magnitude = |f: &EffectiveFlip| if f.new_value.finite().is_some() { f.delta.abs() } else { f64::INFINITY };
    let mut best: Option<&EffectiveFlip> = None;
    for f in flips.into_iter().filter(|f| keep(f)) {
        // Enumeration is LSB first, so strict > keeps the lower bit on ties.
        if best.is_none_or(|b| magnitude(f) > magnitude(b)) {
            best = Some(f);
        }
    }
    best
}

/// The sneaky flip of `weight` with maximal `|delta|`, scored against the
/// bundle's gradient. `None` when the bundle has no gradients, the reference
/// is out of bounds, or no flip of the word is sneaky.
pub fn best_sneaky_flip(weight: WeightRef, bundle: &ModelBundle) -> Option<FlipCandidate> {
    let grad = bundle.gradient(weight)?;
    let old = bundle.effective_value(weight).ok()?;
    let stats = bundle.layer_stats(weight.tensor_id);
    let flips = bundle.effective_flips(weight).ok()?;
    // The stored post-flip value is what must land in range; checking it
    // directly avoids a rounding gap between old + delta and new_value.
    let best = best_of(&flips, |f| f.new_value.finite().is_some_and(|v| stats.contains(v)))?;
    Some(candidate_from(weight, old, grad, best))
}
