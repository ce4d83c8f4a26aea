use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use textrecon::masking::{
    build_cloze_mask, build_permuted_mask, query_text_mask, sample_linguistic_mask, sample_permutations,
    sample_visual_mask, Permutation,
};
use textrecon::synthdata::{dequantize, patchify_pixels, quantize, unpatchify, ImageShape, PatchSize};
use textrecon::textcodec::Charset;
use textrecon::trainer::lr_schedule;

fn perm_strategy(max_len: usize) -> impl Strategy<Value = Permutation> {
    (1..=max_len).prop_flat_map(|len| Just((1..=len).collect::<Vec<_>>()).prop_shuffle()).prop_map(|o| Permutation::new(o).unwrap())
}

proptest! {
    #[test]
    fn codec_round_trip(label in "[a-p]{1,8}") {
        let cs = Charset::prefix(16, 8).unwrap();
        let seq = cs.encode(&label).unwrap();
        prop_assert_eq!(seq.len(), label.chars().count());
        prop_assert!(seq.ids().iter().all(|&id| cs.is_char(id)));
        prop_assert_eq!(cs.decode(seq.ids()).unwrap(), label);
    }

    #[test]
    fn permuted_rows_see_exactly_their_predecessors(perm in perm_strategy(7)) {
        let len = perm.len();
        let m = build_permuted_mask(&perm, len + 1);
        for (step, &p) in perm.order().iter().enumerate() {
            let row = m.row(p - 1);
            prop_assert!(row[0]);
            prop_assert_eq!(row[1..].iter().filter(|&&b| b).count(), step);
            prop_assert!(!row[p], "position {} sees itself", p);
        }
        prop_assert!(m.row(len).iter().all(|&b| b));
    }

    #[test]
    fn masked_columns_are_blank_everywhere(perm in perm_strategy(6), bits in 0u32..64) {
        let len = perm.len();
        let masked: Vec<usize> = (1..=len).filter(|p| bits & (1 << (p - 1)) != 0).collect();
        let m = query_text_mask(&perm, &masked);
        let base = build_permuted_mask(&perm, len + 1);
        for r in 0..=len {
            for c in 0..=len {
                prop_assert_eq!(m.get(r, c), base.get(r, c) && !masked.contains(&c));
            }
        }
    }

    #[test]
    fn cloze_rows_miss_only_their_own_column(len in 1usize..9) {
        let m = build_cloze_mask(len + 1, len + 1);
        for r in 0..=len {
            prop_assert_eq!(m.row(r).iter().filter(|&&b| !b).count(), usize::from(r < len));
        }
    }

    #[test]
    fn permutation_samples_are_distinct(len in 1usize..7, k in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perms = sample_permutations(len, k, &mut rng);
        let total: usize = (1..=len).product();
        prop_assert_eq!(perms.len(), k.min(total));
        prop_assert_eq!(&perms[0], &Permutation::identity(len));
        for i in 0..perms.len() {
            for j in 0..i {
                prop_assert_ne!(&perms[i], &perms[j]);
            }
        }
    }

    #[test]
    fn visual_masks_partition_the_grid(n in 1usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let plan = sample_visual_mask(n, ratio, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(plan.masked().len(), (ratio * n as f64).round() as usize);
        prop_assert_eq!(plan.masked().len() + plan.visible().len(), n);
        for i in 0..n {
            prop_assert_eq!(plan.is_masked(i), !plan.visible().contains(&i));
        }
    }

    #[test]
    fn linguistic_masks_hide_at_least_one(label in "[a-p]{1,8}", ratio in 0.01f64..=1.0, seed in any::<u64>()) {
        let cs = Charset::prefix(16, 8).unwrap();
        let seq = cs.encode(&label).unwrap();
        let m = sample_linguistic_mask(&seq, ratio, &mut ChaCha8Rng::seed_from_u64(seed));
        let k = m.masked_positions().len();
        prop_assert!(k >= 1 && k <= seq.len());
        prop_assert_eq!(k, ((ratio * seq.len() as f64).round() as usize).max(1));
        prop_assert_eq!(m.ids(), seq.ids());
    }

    #[test]
    fn patchify_round_trips(gh in 1usize..5, gw in 1usize..5, ph in 1usize..5, pw in 1usize..5, c in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        use rand::Rng;
        let shape = ImageShape { height: gh * ph, width: gw * pw, channels: c };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f32> = (0..shape.num_values()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grid = patchify_pixels(&pixels, shape, PatchSize { height: ph, width: pw }).unwrap();
        prop_assert_eq!(grid.num_patches(), gh * gw);
        prop_assert_eq!(unpatchify(&grid), pixels);
    }

    #[test]
    fn quantization_error_is_half_a_level(v in -1.0f32..=1.0) {
        prop_assert!((dequantize(quantize(v)) - v).abs() <= 0.5 / 127.5 + 1e-6);
    }

    #[test]
    fn schedule_stays_within_its_envelope(total in 1usize..5000, frac in 0.0f64..=1.0, lr in 1e-5f64..1.0) {
        let step = (frac * total as f64) as usize;
        let v = lr_schedule(step, total, lr);
        prop_assert!(v <= lr * (1.0 + 1e-12));
        prop_assert!(v >= lr / 1000.0 * (1.0 - 1e-12));
        if step > 0 {
            let prev = lr_schedule(step - 1, total, lr);
            let warm = (0.1 * total as f64).ceil() as usize;
            if step < warm {
                prop_assert!(v > prev);
            } else if step > warm {
                prop_assert!(v <= prev);
            }
        }
    }
}
