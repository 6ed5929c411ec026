use proptest::prelude::*;

use sbfa::bitcodec::{decode, encode, enumerate_flips, flip_outcome, BitWord, FormatSpec};
use sbfa::impact::{best_sneaky_flip, is_sneaky, WeightRef};
use sbfa::nnet::Architecture;
use sbfa::search::{exhaustive_topk, rank_order, skip_search, skip_search_concurrent, TopKQueue};
use sbfa::tensormodel::{quantize_int8, AttackMode, Exclusions, LayerStats, ModelBundle};

fn formats() -> impl Strategy<Value = FormatSpec> {
    prop_oneof![Just(FormatSpec::BF16), Just(FormatSpec::FP16), Just(FormatSpec::FP32), Just(FormatSpec::INT8)]
}

fn word() -> impl Strategy<Value = BitWord> {
    (formats(), any::<u32>()).prop_map(|(f, raw)| {
        let mask = if f.bit_width == 32 { u32::MAX } else { (1 << f.bit_width) - 1 };
        BitWord::new(raw & mask, f).unwrap()
    })
}

/// A two-layer linear bundle with arbitrary weights and gradients.
fn bundle(format: FormatSpec, values: Vec<f64>, grads: Vec<f64>) -> ModelBundle {
    let n = values.len();
    let arch = Architecture::Linear { input_dim: n / 2, num_classes: 2 };
    let mut b = ModelBundle::from_params(arch, &[values, vec![0.1, -0.3]], format).unwrap();
    b.set_gradients(vec![grads, vec![0.5, -0.25]]).unwrap();
    b
}

fn model() -> impl Strategy<Value = ModelBundle> {
    (prop_oneof![Just(FormatSpec::BF16), Just(FormatSpec::FP16), Just(FormatSpec::FP32)], 1usize..24)
        .prop_flat_map(|(f, half)| {
            (
                Just(f),
                prop::collection::vec(-3.0f64..3.0, 2 * half),
                prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0, Just(0.5)], 2 * half),
            )
        })
        .prop_map(|(f, v, g)| bundle(f, v, g))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn finite_words_roundtrip_through_encode(w in word()) {
        let v = decode(w);
        prop_assume!(v.is_finite());
        prop_assert_eq!(encode(v, w.format()).unwrap(), w);
    }

    #[test]
    fn flipping_twice_restores_the_word(w in word(), bit in 0u32..32) {
        let bit = bit % w.format().bit_width;
        prop_assert_eq!(w.flipped(bit).flipped(bit), w);
        let mask = if w.format().bit_width == 32 { u32::MAX } else { (1 << w.format().bit_width) - 1 };
        prop_assert_eq!(w.flipped(bit).raw() & !mask, 0);
    }

    #[test]
    fn finite_flag_tracks_decoded_value(w in word()) {
        let flips = enumerate_flips(w);
        prop_assert_eq!(flips.len() as u32, w.format().bit_width);
        for (bit, o) in flips.iter().enumerate() {
            let v = decode(w.flipped(bit as u32));
            prop_assert_eq!(o.finite, v.is_finite());
            prop_assert_eq!(o.bit_position, bit as u32);
            prop_assert_eq!(o.new_raw, flip_outcome(w, bit as u32).new_raw);
            prop_assert_eq!(o.new_raw, w.flipped(bit as u32).raw());
            if o.finite && decode(w).is_finite() {
                prop_assert_eq!(o.delta, v - decode(w));
            }
        }
    }

    #[test]
    fn sneaky_bounds_are_inclusive(lo in -2.0f64..0.0, span in 0.0f64..4.0, t in 0.0f64..=1.0) {
        let stats = LayerStats { w_min: lo, w_max: lo + span };
        let old = lo + t * span;
        prop_assert!(is_sneaky(old, 0.0, stats));
        prop_assert!(is_sneaky(stats.w_min, 0.0, stats));
        prop_assert!(is_sneaky(stats.w_max, 0.0, stats));
        prop_assert!(!is_sneaky(stats.w_max, 1e-9, stats));
        prop_assert!(!is_sneaky(stats.w_min, -1e-9, stats));
        prop_assert!(!is_sneaky(old, f64::INFINITY, stats));
    }

    #[test]
    fn impact_scores_respect_range_bound_and_scaling(b in model(), c in 0.01f64..100.0) {
        let mut scaled = b.clone();
        let grads: Vec<Vec<f64>> = b.gradients().unwrap().iter().map(|g| g.iter().map(|v| v * c).collect()).collect();
        scaled.set_gradients(grads).unwrap();
        for t in 0..b.tensors.len() {
            let stats = b.layer_stats(t);
            for i in 0..b.tensors[t].len() {
                let r = WeightRef::new(t, i);
                let Some(x) = best_sneaky_flip(r, &b) else { continue };
                let g = b.gradient(r).unwrap();
                prop_assert!(x.impact_score <= g.abs() * stats.range());
                prop_assert!(stats.contains(x.new_value));
                prop_assert_eq!(x.impact_score, g.abs() * x.delta.abs());
                let y = best_sneaky_flip(r, &scaled).unwrap();
                prop_assert_eq!(y.bit_position, x.bit_position);
                prop_assert!((y.impact_score - c * x.impact_score).abs() <= 1e-12 * y.impact_score.max(1e-300));
            }
        }
    }

    #[test]
    fn skip_search_equals_oracle(b in model(), k in 1usize..40) {
        let targets: Vec<usize> = (0..b.tensors.len()).collect();
        let (q, stats) = skip_search(&b, &targets, k);
        let oracle = exhaustive_topk(&b, &targets, k);
        prop_assert_eq!(q.entries(), oracle.entries());
        let (concurrent, _) = skip_search_concurrent(&b, &targets, k);
        prop_assert_eq!(concurrent.entries(), oracle.entries());
        prop_assert!(stats.weights_scored <= stats.weights_considered);
        prop_assert!(stats.reduction_factor() >= 1.0);
        for s in &stats.skips {
            prop_assert!(s.bound < s.kth_score);
        }
    }

    #[test]
    fn queue_stays_sorted_bounded_and_kth_monotone(b in model(), k in 1usize..12) {
        let mut q = TopKQueue::new(k);
        let mut last_kth = f64::NEG_INFINITY;
        for t in 0..b.tensors.len() {
            for i in 0..b.tensors[t].len() {
                if let Some(c) = best_sneaky_flip(WeightRef::new(t, i), &b) {
                    q.offer(c);
                }
                prop_assert!(q.len() <= k);
                prop_assert!(q.kth_score() >= last_kth);
                last_kth = q.kth_score();
                prop_assert!(q.entries().windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
            }
        }
    }

    #[test]
    fn apply_then_undo_restores_words_and_stats(b in model(), ops in prop::collection::vec((0usize..64, 0u32..32), 1..12)) {
        let mut m = b.clone();
        let mut tokens = Vec::new();
        for (i, bit) in ops {
            let t = i % 2;
            let idx = i % m.tensors[t].len();
            let bit = bit % m.tensors[t].meta.format.bit_width;
            tokens.push(m.apply_flip(WeightRef::new(t, idx), bit).unwrap());
            prop_assert_eq!(m.layer_stats(t), m.fresh_stats(t));
        }
        while let Some(tok) = tokens.pop() {
            m.undo(tok);
        }
        prop_assert!(m.same_weights(&b));
        prop_assert_eq!(m.stats(), b.stats());
        prop_assert_eq!(m.checksum(), b.checksum());
    }

    #[test]
    fn int8_targets_are_exactly_the_quantized_tensors(v in prop::collection::vec(-1.0f64..1.0, 8)) {
        let arch = Architecture::Mlp { input_dim: 2, width: 2, hidden: 2, blocks: 1, num_classes: 2 };
        let n = arch.num_params();
        let params: Vec<Vec<f64>> = {
            let mut it = v.iter().cycle();
            arch.layout().iter().map(|s| (0..s.shape.iter().product::<usize>()).map(|_| *it.next().unwrap()).collect()).collect()
        };
        let q = quantize_int8(&ModelBundle::from_params(arch, &params, FormatSpec::BF16).unwrap()).unwrap();
        let none = Exclusions::default();
        let int8 = sbfa::tensormodel::targets(&q, AttackMode::Int8, &none).unwrap();
        let mixed = sbfa::tensormodel::targets(&q, AttackMode::Mixed, &none).unwrap();
        prop_assert!(int8.iter().all(|&t| q.tensors[t].meta.quantized));
        prop_assert_eq!(int8.len(), q.tensors.iter().filter(|t| t.meta.quantized).count());
        prop_assert_eq!(mixed.len(), q.tensors.len());
        prop_assert_eq!(q.num_weights(), n);
    }
}
