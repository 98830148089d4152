use ncv_core::data::{Dims, Schema};
use ncv_core::game::{apply_mask, topk_indices, topk_mask, Granularity, UnitLayout};
use ncv_core::nn::{init_params, set_forward, Activation, Mode, NetSpec, Pooling, Readout, SetEncoderSpec, SetVariant};
use ncv_core::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unit `i` is selected iff fewer than `m` units beat it.
fn topk_oracle(scores: &[f64], m: usize) -> Vec<usize> {
    let beats = |j: usize, i: usize| {
        let (a, b) = (scores[j], scores[i]);
        match (a.is_nan(), b.is_nan()) {
            (true, true) => j < i,
            (true, false) => false,
            (false, true) => true,
            (false, false) => a > b || (a == b && j < i),
        }
    };
    (0..scores.len())
        .filter(|&i| (0..scores.len()).filter(|&j| beats(j, i)).count() < m)
        .collect()
}

fn score() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -3i32..=3i32, // coarse grid forces ties
        1 => Just(i32::MIN),
    ]
    .prop_map(|v| if v == i32::MIN { f64::NAN } else { v as f64 * 0.5 })
    .boxed()
    .prop_union((-10.0f64..10.0).boxed())
    .boxed()
}

fn scores_and_m() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(score(), 1..48).prop_flat_map(|s| {
        let n = s.len();
        (Just(s), 0..=n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn topk_matches_counting_oracle((scores, m) in scores_and_m()) {
        let got = topk_indices(&scores, m).unwrap();
        prop_assert_eq!(got.len(), m);
        prop_assert_eq!(got, topk_oracle(&scores, m));
    }
}

#[test]
fn topk_ties_go_to_lower_indices() {
    assert_eq!(topk_indices(&[1.0, 2.0, 2.0, 2.0, 0.0], 2).unwrap(), vec![1, 2]);
    assert_eq!(topk_indices(&[7.0; 10], 4).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(topk_indices(&[0.0, 5.0, 0.0, 0.0], 3).unwrap(), vec![0, 1, 2]);
    assert_eq!(topk_indices(&[f64::NAN, f64::NAN, -1.0], 2).unwrap(), vec![0, 2]);
    assert_eq!(topk_indices(&[-0.0, 0.0], 1).unwrap(), vec![0]);
}

fn permute_slots(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, s, b) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    Tensor::new(
        vec![n, s, b],
        (0..n * s * b)
            .map(|i| {
                let (r, rest) = (i / (s * b), i % (s * b));
                d[r * s * b + perm[rest / b] * b + rest % b]
            })
            .collect(),
    )
    .unwrap()
}

fn encoder(variant: SetVariant, readout: Readout, pooling: Pooling) -> SetEncoderSpec {
    SetEncoderSpec {
        variant,
        slot_width: 6,
        hidden: 8,
        blocks: 2,
        heads: 2,
        pooling,
        readout,
        output: 3,
        activation: Activation::Gelu,
    }
}

const SLOTS: usize = 7;

#[test]
fn pooled_encoders_ignore_slot_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for variant in [SetVariant::SumPoolMlp, SetVariant::AttentionBlocks] {
        for pooling in [Pooling::Sum, Pooling::Mean] {
            let spec = encoder(variant, Readout::Pooled, pooling);
            let mut worst: f64 = 0.0;
            for draw in 0..10 {
                let params = init_params(&NetSpec::Set(spec.clone()), draw);
                let x = Tensor::from_fn(&[3, SLOTS, 6], |_| rng.gen_range(-1.0..1.0));
                let base = set_forward(&spec, &params, &x, Mode::INFERENCE).unwrap();
                for _ in 0..100 {
                    let mut perm: Vec<usize> = (0..SLOTS).collect();
                    perm.shuffle(&mut rng);
                    let y = set_forward(&spec, &params, &permute_slots(&x, &perm), Mode::INFERENCE).unwrap();
                    for (a, b) in base.data().iter().zip(y.data()) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            assert!(worst < 1e-9, "{variant:?} {pooling:?}: deviation {worst:e}");
        }
    }
}

#[test]
fn per_slot_encoders_follow_slot_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for variant in [SetVariant::SumPoolMlp, SetVariant::AttentionBlocks] {
        let spec = encoder(variant, Readout::PerSlot, Pooling::Sum);
        for draw in 0..10 {
            let params = init_params(&NetSpec::Set(spec.clone()), 100 + draw);
            let x = Tensor::from_fn(&[2, SLOTS, 6], |_| rng.gen_range(-1.0..1.0));
            let base = set_forward(&spec, &params, &x, Mode::INFERENCE).unwrap();
            let base = base.reshaped(&[2, SLOTS, 3]).unwrap();
            for _ in 0..20 {
                let mut perm: Vec<usize> = (0..SLOTS).collect();
                perm.shuffle(&mut rng);
                let y = set_forward(&spec, &params, &permute_slots(&x, &perm), Mode::INFERENCE).unwrap();
                let want = permute_slots(&base, &perm);
                for (a, b) in want.data().iter().zip(y.data()) {
                    assert!((a - b).abs() < 1e-9, "{variant:?}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Masking then permuting slots equals permuting slots and their units.
    #[test]
    fn masking_commutes_with_slot_permutation(
        seed in any::<u64>(),
        m in 0usize..=20,
        attribute in any::<bool>(),
    ) {
        let schema = Schema::clevr();
        let slots = 5;
        let dims = Dims::Slot { slots, width: schema.object_width() };
        let gran = if attribute { Granularity::AttributeBlock } else { Granularity::SlotBlock };
        let layout = UnitLayout::new(dims, gran, Some(&schema)).unwrap();
        let m = m.min(layout.units);
        let per = layout.units_per_slot;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[slots, schema.object_width()], |_| rng.gen_range(-1.0..1.0));
        let scores: Vec<f64> = (0..layout.units).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..slots).collect();
        perm.shuffle(&mut rng);

        let masked = apply_mask(&layout, &x, &topk_mask(&scores, m, gran).unwrap()).unwrap();
        let x3 = x.clone().reshaped(&[1, slots, schema.object_width()]).unwrap();
        let permuted_x = permute_slots(&x3, &perm).reshaped(&[slots, schema.object_width()]).unwrap();
        let permuted_scores: Vec<f64> = (0..layout.units).map(|u| scores[perm[u / per] * per + u % per]).collect();
        let lhs = apply_mask(&layout, &permuted_x, &topk_mask(&permuted_scores, m, gran).unwrap()).unwrap();
        let rhs = permute_slots(&masked.reshaped(&[1, slots, schema.object_width()]).unwrap(), &perm);
        prop_assert_eq!(lhs.data(), rhs.data());
    }
}
