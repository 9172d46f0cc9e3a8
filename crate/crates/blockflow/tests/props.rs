//! Property tests for the padding rule, the mask's block-causal structure,
//! REPA weight accounting, and checkpoint merging.

use blockflow::backbone::{build_training_mask, Segment, SequenceLayout};
use blockflow::checkpoint::merge_models;
use blockflow::repa::sample_blocks;
use blockflow::synthdata::{pad_eop_frames, EOP_VALUE};
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #[test]
    fn padded_length_is_smallest_valid_multiple(l in 1usize..200, b in 1usize..16) {
        let content = Array2::from_elem((l, 3), 0.25);
        let seq = pad_eop_frames(&content, b);
        let total = seq.total_frames();
        prop_assert_eq!(total % b, 0);
        prop_assert!(total > l, "final block must contain an EOP frame");
        prop_assert!(total - l <= b, "no more than one extra block of padding");
        if l % b == 0 {
            prop_assert_eq!(total, l + b);
        } else {
            prop_assert_eq!(total, l + b - l % b);
        }
        // Every padding frame is exactly the all-ones vector.
        for j in l..total {
            for &x in seq.data.row(j) {
                prop_assert_eq!(x, EOP_VALUE);
            }
        }
        prop_assert!(seq.validate().is_ok());
    }

    #[test]
    fn repa_accumulated_weights_are_exactly_one(k in 1usize..40, m in 1usize..20, seed in 0u64..1000) {
        let s = sample_blocks(k, m, seed).unwrap();
        prop_assert_eq!(s.sampled.len(), k.min(m));
        // Distinct, in range.
        let mut set = std::collections::HashSet::new();
        for &i in &s.sampled {
            prop_assert!(i < k);
            prop_assert!(set.insert(i));
        }
        let max = *s.sampled.iter().max().unwrap();
        for j in 0..k {
            let acc = s.accumulated_weight(j);
            if j < max {
                prop_assert_eq!(acc, 1.0);
            } else {
                prop_assert_eq!(acc, 0.0);
            }
        }
    }

    #[test]
    fn mask_respects_block_causality(
        prompt in 1usize..3,
        lyric in 1usize..5,
        k in 1usize..7,
        b in 1usize..4,
    ) {
        let layout = SequenceLayout::new(prompt, lyric, k, b).unwrap();
        let mask = build_training_mask(&layout).unwrap();
        for q in 0..layout.total_len() {
            for key in 0..layout.total_len() {
                let expect = match (layout.segment(q), layout.segment(key)) {
                    (_, Segment::Prompt | Segment::Lyric) => true,
                    (Segment::Prompt | Segment::Lyric, _) => false,
                    (Segment::Clean(i), Segment::Clean(j)) => j <= i,
                    (Segment::Clean(_), Segment::Noisy(_)) => false,
                    (Segment::Noisy(i), Segment::Clean(j)) => j < i,
                    (Segment::Noisy(i), Segment::Noisy(j)) => i == j,
                };
                prop_assert_eq!(mask[[q, key]], expect);
            }
        }
        // No noisy position ever sees a future clean block or other noisy
        // blocks (the in-place leak that would break generation).
        for i in 0..k {
            let q = layout.noisy_start() + i * b;
            for j in i..k {
                let key = layout.clean_start() + j * b;
                prop_assert!(!mask[[q, key]]);
            }
        }
    }

    #[test]
    fn merge_weights_interpolate_elementwise(w in 0.0f64..=1.0) {
        let cfg = blockflow::backbone::ModelConfig::tiny_for_tests();
        let a = blockflow::backbone::BackboneParams::init(&cfg, 1);
        let b = blockflow::backbone::BackboneParams::init(&cfg, 2);
        let merged = merge_models(&[&a, &b], &[w, 1.0 - w]).unwrap();
        for (((_, m), (_, x)), (_, y)) in merged
            .collect()
            .iter()
            .zip(a.collect().iter())
            .zip(b.collect().iter())
        {
            for ((mm, xx), yy) in m.iter().zip(x.iter()).zip(y.iter()) {
                prop_assert!((mm - (w * xx + (1.0 - w) * yy)).abs() < 1e-12);
            }
        }
    }
}
