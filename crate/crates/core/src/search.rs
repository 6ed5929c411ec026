//! Global top-k candidate ranking.
//!
//! [`skip_search`] visits each target tensor's weights in descending
//! `|grad|` order and abandons the rest of the tensor as soon as
//! `|grad| * range` can no longer beat the k-th best score in the queue.
//! Since every sneaky `|delta|` is bounded by the tensor range, the pruned
//! search returns the same queue as [`exhaustive_topk`].

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::impact::{best_of, best_sneaky_flip, candidate_from, FlipCandidate, WeightRef};
use crate::tensormodel::ModelBundle;

pub const DEFAULT_K: usize = 100;

/// Total order used by the queue: higher score first, then lower
/// `(tensor_id, flat_index, bit_position)`.
pub fn rank_order(a: &FlipCandidate, b: &FlipCandidate) -> Ordering {
    b.impact_score.total_cmp(&a.impact_score).then_with(|| a.tie_key().cmp(&b.tie_key()))
}

/// Bounded queue of the best `capacity` candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKQueue {
    capacity: usize,
    entries: Vec<FlipCandidate>,
}

impl TopKQueue {
    pub fn new(capacity: usize) -> TopKQueue {
        TopKQueue { capacity, entries: Vec::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Score of the k-th entry when full, -inf otherwise.
    pub fn kth_score(&self) -> f64 {
        if self.is_full() && self.capacity > 0 {
            self.entries[self.capacity - 1].impact_score
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Whether `c` would enter the queue.
    pub fn admits(&self, c: &FlipCandidate) -> bool {
        if self.capacity == 0 {
            return false;
        }
        !self.is_full() || rank_order(c, &self.entries[self.capacity - 1]) == Ordering::Less
    }

    /// Inserts `c` if it ranks among the best `capacity`, then prunes.
    pub fn offer(&mut self, c: FlipCandidate) -> bool {
        if !self.admits(&c) {
            return false;
        }
        let at = self.entries.partition_point(|e| rank_order(e, &c) == Ordering::Less);
        self.entries.insert(at, c);
        self.entries.truncate(self.capacity);
        true
    }

    pub fn entries(&self) -> &[FlipCandidate] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<FlipCandidate> {
        self.entries
    }
}

/// A tensor tail abandoned by [`skip_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipEvent {
    pub tensor_id: usize,
    /// Position in the tensor's |grad|-sorted order where scanning stopped.
    pub rank: usize,
    pub skipped: usize,
    pub bound: f64,
    pub kth_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Weights in all target tensors.
    pub weights_considered: usize,
    /// Weights whose ImpactScore was computed.
    pub weights_scored: usize,
    pub layers_early_broken: usize,
    pub skips: Vec<SkipEvent>,
}

impl SearchStats {
    pub fn reduction_factor(&self) -> f64 {
        self.weights_considered as f64 / self.weights_scored.max(1) as f64
    }
}

/// Indices of `grads` sorted by |grad| descending, index ascending on ties.
fn by_gradient(grads: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grads.len()).collect();
    order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()).then(a.cmp(&b)));
    order
}

/// Where scanned candidates go. `kth_score` may be stale (lower than the
/// true value) for a shared queue; that only reduces skipping.
trait CandidateSink {
    fn kth_score(&self) -> f64;
    fn offer(&mut self, c: FlipCandidate);
}

impl CandidateSink for TopKQueue {
    fn kth_score(&self) -> f64 {
        TopKQueue::kth_score(self)
    }

    fn offer(&mut self, c: FlipCandidate) {
        TopKQueue::offer(self, c);
    }
}

impl CandidateSink for &Mutex<TopKQueue> {
    fn kth_score(&self) -> f64 {
        self.lock().unwrap().kth_score()
    }

    fn offer(&mut self, c: FlipCandidate) {
        self.lock().unwrap().offer(c);
    }
}

fn scan_tensor(
    bundle: &ModelBundle,
    tensor_id: usize,
    grads: &[f64],
    sink: &mut impl CandidateSink,
) -> (usize, Option<SkipEvent>) {
    let range = bundle.layer_stats(tensor_id).range();
    let order = by_gradient(grads);
    let mut scored = 0;
    for (rank, &i) in order.iter().enumerate() {
        let bound = grads[i].abs() * range;
        let kth_score = sink.kth_score();
        if bound < kth_score {
            let skipped = order.len() - rank;
            return (scored, Some(SkipEvent { tensor_id, rank, skipped, bound, kth_score }));
        }
        scored += 1;
        if let Some(c) = best_sneaky_flip(WeightRef::new(tensor_id, i), bundle) {
            sink.offer(c);
        }
    }
    (scored, None)
}

/// SKIP search over `targets` (tensor ids, visited in the given order).
///
/// # Panics
/// If the bundle carries no gradients.
pub fn skip_search(bundle: &ModelBundle, targets: &[usize], k: usize) -> (TopKQueue, SearchStats) {
    let grads = bundle.gradients().expect("skip_search needs gradients");
    let mut queue = TopKQueue::new(k);
    let mut stats = SearchStats::default();
    for &t in targets {
        stats.weights_considered += grads[t].len();
        let (scored, skip) = scan_tensor(bundle, t, &grads[t], &mut queue);
        stats.weights_scored += scored;
        if let Some(s) = skip {
            stats.layers_early_broken += 1;
            stats.skips.push(s);
        }
    }
    (queue, stats)
}

/// SKIP search with tensors scanned in parallel against one shared queue.
/// The returned queue is identical to [`skip_search`]'s; the statistics may
/// differ between runs because each worker reads a snapshot of the k-th
/// score that can lag behind other workers' insertions.
pub fn skip_search_concurrent(bundle: &ModelBundle, targets: &[usize], k: usize) -> (TopKQueue, SearchStats) {
    let grads = bundle.gradients().expect("skip_search needs gradients");
    let queue = Mutex::new(TopKQueue::new(k));
    let per_tensor: Vec<(usize, usize, Option<SkipEvent>)> = targets
        .par_iter()
        .map(|&t| {
            let (scored, skip) = scan_tensor(bundle, t, &grads[t], &mut &queue);
            (grads[t].len(), scored, skip)
        })
        .collect();
    let mut stats = SearchStats::default();
    for (n, scored, skip) in per_tensor {
        stats.weights_considered += n;
        stats.weights_scored += scored;
        if let Some(s) = skip {
            stats.layers_early_broken += 1;
            stats.skips.push(s);
        }
    }
    (queue.into_inner().unwrap(), stats)
}

/// Reference ranking: scores every weight of every target tensor.
pub fn exhaustive_topk(bundle: &ModelBundle, targets: &[usize], k: usize) -> TopKQueue {
    let mut queue = TopKQueue::new(k);
    for &t in targets {
        for i in 0..bundle.tensors[t].len() {
            if let Some(c) = best_sneaky_flip(WeightRef::new(t, i), bundle) {
                queue.offer(c);
            }
        }
    }
    queue
}

/// Gradient-BFA ranking variants used as baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineVariant {
    /// Largest |grad * delta| over all bits, no range check; NaN/Inf
    /// outcomes score +inf.
    NoRange,
    /// Same scoring as the sneaky search (range-checked).
    InRange,
    /// Sign bit only, no range check.
    SignOnly,
}

impl BaselineVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineVariant::NoRange => "no-range",
            BaselineVariant::InRange => "in-range",
            BaselineVariant::SignOnly => "sign-only",
        }
    }
}

impl fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-range" => Ok(BaselineVariant::NoRange),
            "in-range" => Ok(BaselineVariant::InRange),
            "sign-only" => Ok(BaselineVariant::SignOnly),
            other => Err(format!("unknown baseline `{other}`")),
        }
    }
}

/// Per-weight candidate of a baseline variant.
pub fn baseline_candidate(weight: WeightRef, bundle: &ModelBundle, variant: BaselineVariant) -> Option<FlipCandidate> {
    let grad = bundle.gradient(weight)?;
    let old = bundle.effective_value(weight).ok()?;
    let flips = bundle.effective_flips(weight).ok()?;
    let stats = bundle.layer_stats(weight.tensor_id);
    let sign_bit = bundle.tensors[weight.tensor_id].meta.format.sign_bit();
    let best = match variant {
        BaselineVariant::NoRange => best_of(&flips, |_| true),
        BaselineVariant::InRange => best_of(&flips, |f| f.new_value.finite().is_some_and(|v| stats.contains(v))),
        BaselineVariant::SignOnly => best_of(&flips, |f| f.bit_position == sign_bit),
    }?;
    Some(candidate_from(weight, old, grad, best))
}

/// Top-`k` baseline candidates over `targets`.
pub fn baseline_rank(bundle: &ModelBundle, targets: &[usize], variant: BaselineVariant, k: usize) -> TopKQueue {
    assert!(bundle.gradients().is_some(), "baseline_rank needs gradients");
    let mut queue = TopKQueue::new(k);
    for &t in targets {
        for i in 0..bundle.tensors[t].len() {
            if let Some(c) = baseline_candidate(WeightRef::new(t, i), bundle, variant) {
                queue.offer(c);
            }
        }
    }
    queue
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitcodec::FormatSpec;
    use crate::nnet::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(t: usize, i: usize, bit: u32, score: f64) -> FlipCandidate {
        FlipCandidate {
            weight: WeightRef::new(t, i),
            bit_position: bit,
            old_value: 0.0,
            delta: 0.0,
            new_value: 0.0,
            impact_score: score,
            finite: true,
        }
    }

    fn random_bundle(seed: u64, shapes: &[(usize, usize)], format: FormatSpec, uniform: bool) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = shapes[0];
        let arch = Architecture::Mlp { input_dim: w, width: h, hidden: shapes[1].0, blocks: 1, num_classes: shapes[1].1 };
        let params: Vec<Vec<f64>> = arch
            .layout()
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                (0..n).map(|_| if uniform { 0.5 } else { rng.gen_range(-1.0..1.0) }).collect()
            })
            .collect();
        let mut b = ModelBundle::from_params(arch, &params, format).unwrap();
        let grads = params
            .iter()
            .map(|p| p.iter().map(|_| if uniform { 1.0 } else { rng.gen_range(-1.0f64..1.0).powi(3) }).collect())
            .collect();
        b.set_gradients(grads).unwrap();
        b
    }

    #[test]
    fn queue_keeps_best_k_in_order() {
        let mut q = TopKQueue::new(3);
        assert_eq!(q.kth_score(), f64::NEG_INFINITY);
        for (i, s) in [1.0, 5.0, 3.0, 4.0, 0.5, 5.0].into_iter().enumerate() {
            q.offer(cand(0, i, 0, s));
        }
        let got: Vec<_> = q.entries().iter().map(|c| (c.weight.flat_index, c.impact_score)).collect();
        assert_eq!(got, vec![(1, 5.0), (5, 5.0), (3, 4.0)]);
        assert_eq!(q.kth_score(), 4.0);
        // Equal score, smaller tie key displaces the boundary entry.
        assert!(q.offer(cand(0, 0, 0, 4.0)));
        assert_eq!(q.entries()[2].weight.flat_index, 0);
        assert!(!q.offer(cand(0, 9, 0, 4.0)));
    }

    #[test]
    fn break_condition_instance() {
        // Queue full at kth 5.0; |grad| 0.1 over range 10 bounds at 1.0.
        let arch = Architecture::Linear { input_dim: 2, num_classes: 1 };
        let mut b = ModelBundle::from_params(arch, &[vec![-5.0, 5.0], vec![0.0]], FormatSpec::FP32).unwrap();
        b.set_gradients(vec![vec![0.1, 0.1], vec![0.0]]).unwrap();
        let mut full = TopKQueue::new(1);
        full.offer(cand(1, 0, 0, 5.0));
        let (scored, skip) = scan_tensor(&b, 0, &[0.1, 0.1], &mut full);
        assert_eq!(scored, 0);
        assert_eq!(full.len(), 1);
        let skip = skip.unwrap();
        assert_eq!((skip.rank, skip.skipped, skip.bound, skip.kth_score), (0, 2, 1.0, 5.0));
    }

    #[test]
    fn uniform_gradients_never_break() {
        let b = random_bundle(1, &[(20, 30), (40, 4)], FormatSpec::BF16, true);
        let targets: Vec<usize> = (0..b.tensors.len()).collect();
        let (q, stats) = skip_search(&b, &targets, DEFAULT_K);
        assert_eq!(q, exhaustive_topk(&b, &targets, DEFAULT_K));
        // Every weight is 0.5 so range is 0: scores and bounds are all zero
        // and nothing can fall strictly below the k-th score.
        assert_eq!(stats.layers_early_broken, 0);
    }

    #[test]
    fn small_model_returns_every_candidate() {
        let arch = Architecture::Linear { input_dim: 3, num_classes: 2 };
        let mut b = ModelBundle::from_params(arch, &[vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], vec![0.1, 0.2]], FormatSpec::FP16)
            .unwrap();
        b.set_gradients(vec![vec![0.3, 0.1, -0.2, 0.05, 0.7, -0.4], vec![1.0, -1.0]]).unwrap();
        let (q, _) = skip_search(&b, &[0, 1], 100);
        let all: usize = (0..6).filter(|&i| best_sneaky_flip(WeightRef::new(0, i), &b).is_some()).count()
            + (0..2).filter(|&i| best_sneaky_flip(WeightRef::new(1, i), &b).is_some()).count();
        assert_eq!(q.len(), all);
        assert_eq!(q, exhaustive_topk(&b, &[0, 1], 100));
    }

    #[test]
    fn skip_matches_oracle_on_random_models() {
        for seed in 0..5 {
            for format in [FormatSpec::BF16, FormatSpec::FP16, FormatSpec::FP32] {
                let b = random_bundle(seed, &[(40, 64), (128, 4)], format, false);
                let targets: Vec<usize> = (0..b.tensors.len()).collect();
                let (q, stats) = skip_search(&b, &targets, DEFAULT_K);
                assert_eq!(q, exhaustive_topk(&b, &targets, DEFAULT_K), "seed {seed} {format}");
                assert!(stats.weights_scored <= stats.weights_considered);
                assert!(stats.reduction_factor() > 1.0);
                let (qc, _) = skip_search_concurrent(&b, &targets, DEFAULT_K);
                assert_eq!(qc, q);
            }
        }
    }

    #[test]
    fn skipped_weights_satisfy_bound() {
        let b = random_bundle(9, &[(30, 50), (100, 4)], FormatSpec::BF16, false);
        let targets: Vec<usize> = (0..b.tensors.len()).collect();
        let (q, stats) = skip_search(&b, &targets, 20);
        let grads = b.gradients().unwrap();
        for s in &stats.skips {
            assert!(s.bound < s.kth_score);
            assert!(s.kth_score <= q.kth_score());
            let order = by_gradient(&grads[s.tensor_id]);
            let range = b.layer_stats(s.tensor_id).range();
            for &i in &order[s.rank..] {
                assert!(grads[s.tensor_id][i].abs() * range < s.kth_score);
            }
        }
    }

    #[test]
    fn sign_only_and_subset_relations() {
        let arch = Architecture::Linear { input_dim: 2, num_classes: 1 };
        let mut b = ModelBundle::from_params(arch, &[vec![0.5, -1.0], vec![0.25]], FormatSpec::FP16).unwrap();
        b.set_gradients(vec![vec![1.0, 1.0], vec![1.0]]).unwrap();
        let c = baseline_candidate(WeightRef::new(0, 0), &b, BaselineVariant::SignOnly).unwrap();
        assert_eq!((c.bit_position, c.delta), (15, -1.0));
        let nr = baseline_candidate(WeightRef::new(0, 0), &b, BaselineVariant::NoRange).unwrap();
        assert_eq!(nr.new_value, 32768.0);
        // bf16 / fp32 words near 1.0 reach +inf under the exponent-MSB flip.
        let mut f = ModelBundle::from_params(
            Architecture::Linear { input_dim: 1, num_classes: 1 },
            &[vec![1.0], vec![0.0]],
            FormatSpec::FP32,
        )
        .unwrap();
        f.set_gradients(vec![vec![1e-3], vec![0.0]]).unwrap();
        let inf = baseline_candidate(WeightRef::new(0, 0), &f, BaselineVariant::NoRange).unwrap();
        assert!(!inf.finite);
        assert_eq!(inf.impact_score, f64::INFINITY);
        assert_eq!(inf.bit_position, 30);
    }

    proptest! {
        #[test]
        fn in_range_choice_is_a_no_range_option(
            values in prop::collection::vec(-2.0f64..2.0, 2..24),
            seed in 0u64..1000,
        ) {
            let n = values.len();
            let arch = Architecture::Linear { input_dim: n, num_classes: 1 };
            let mut b = ModelBundle::from_params(arch, &[values, vec![0.0]], FormatSpec::BF16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.set_gradients(vec![(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![0.0]]).unwrap();
            for i in 0..n {
                let r = WeightRef::new(0, i);
                let universe = b.effective_flips(r).unwrap();
                if let Some(c) = baseline_candidate(r, &b, BaselineVariant::InRange) {
                    prop_assert!(universe.iter().any(|f| f.bit_position == c.bit_position && f.delta == c.delta));
                    let nr = baseline_candidate(r, &b, BaselineVariant::NoRange).unwrap();
                    prop_assert!(nr.impact_score >= c.impact_score);
                    prop_assert_eq!(Some(c), best_sneaky_flip(r, &b));
                }
            }
        }
    }
}
