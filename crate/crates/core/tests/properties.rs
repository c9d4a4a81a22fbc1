use proptest::prelude::*;
use shadowcert_core::attack::{
    dissim_penalty, select_best, tv_penalty_variant, Candidate, ChannelMode, Perturbation,
    TvVariant,
};
use shadowcert_core::nn::format;
use shadowcert_core::smoothing::clopper_pearson_lower;
use shadowcert_core::Tensor;
use shadowcert_testkit::nets::random_network;

fn image(c: usize, w: usize, h: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, c * w * h)
        .prop_map(move |v| Tensor::new(vec![c, w, h], v).unwrap())
}

fn sized_image() -> impl Strategy<Value = Tensor> {
    (
        prop_oneof![Just(1usize), Just(3usize)],
        1usize..6,
        1usize..6,
    )
        .prop_flat_map(|(c, w, h)| image(c, w, h))
}

proptest! {
    #[test]
    fn tv_ignores_constant_shifts(d in sized_image(), shift in -0.5f32..0.5) {
        let shifted = Tensor::new(d.shape().to_vec(), d.data().iter().map(|v| v + shift).collect()).unwrap();
        for variant in [TvVariant::SquaredDifferences, TvVariant::SquaredTotal] {
            let (a, b) = (tv_penalty_variant(&d, variant).unwrap(), tv_penalty_variant(&shifted, variant).unwrap());
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{:?}: {} vs {}", variant, a, b);
        }
    }

    #[test]
    fn one_channel_perturbations_have_no_dissim(d in image(1, 4, 5)) {
        let p = Perturbation::new(ChannelMode::OneChannel, d.reshape(vec![4, 5]).unwrap()).unwrap();
        let full = p.materialize(3);
        prop_assert_eq!(dissim_penalty(&full, ChannelMode::ThreeChannel).unwrap(), 0.0);
        prop_assert_eq!(dissim_penalty(&full, ChannelMode::OneChannel).unwrap(), 0.0);
    }

    #[test]
    fn clopper_pearson_is_monotone_in_count(n in 1u64..200, a in 0u64..200, b in 0u64..200, alpha in 1e-4f64..0.2) {
        let (lo, hi) = (a.min(b).min(n), a.max(b).min(n));
        let (l, h) = (clopper_pearson_lower(lo, n, alpha).unwrap(), clopper_pearson_lower(hi, n, alpha).unwrap());
        prop_assert!(l <= h);
        prop_assert!((0.0..=1.0).contains(&l) && h <= hi as f64 / n as f64 + 1e-12);
    }

    #[test]
    fn network_files_round_trip(seed in 0u64..500) {
        let (net, _) = random_network(seed);
        let bytes = format::encode(&net);
        let back = format::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(format::encode(&back), bytes);
    }

    #[test]
    fn selection_ignores_positive_rescaling(
        cands in prop::collection::vec((any::<bool>(), 0.0f64..5.0, 0.0f64..5.0), 1..8),
        scale in 0.1f64..10.0,
    ) {
        let make = |s: f64| -> Vec<Candidate> {
            cands.iter().map(|&(success, strength, loss)| Candidate { success, strength: s * strength, final_loss: s * loss }).collect()
        };
        prop_assert_eq!(select_best(&make(1.0)), select_best(&make(scale)));
    }

    #[test]
    fn truncated_network_files_are_rejected(seed in 0u64..100, cut in 1usize..64) {
        let bytes = format::encode(&random_network(seed).0);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(format::decode(&bytes[..keep]).is_err());
    }
}
