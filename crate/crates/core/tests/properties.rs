//! Invariants of each module under random inputs.

use bkprobe::lexicon::{gen_alper_labels, AlperClasses, GraphemeClass, LabelSet, ShapeClass, WordType};
use bkprobe::metrics::{proportion_estimate, separability_score, stratified_bootstrap};
use bkprobe::model_adapter::{probabilities_from_embeddings, FeatureKind, GradientCapture};
use bkprobe::prob_probe::{argmax_label, decode_probs, encode_probs};
use bkprobe::saliency_probe::{choose_side, coarse_map, interpolation_matrix, upsample_bilinear, RegionWeights};
use bkprobe::shapes::{compose_pairs, generate_pairs, sample_points, GenerationParams};
use bkprobe::store::trial_key;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn small_bank(seed_base: u64, pairs: usize) -> Vec<bkprobe::shapes::ShapePair> {
    generate_pairs(&GenerationParams { seed_base, pairs, resolution: 32, ..Default::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composites_are_balanced_and_mirror_closed(seed_base in 0u64..1_000_000, pairs in 1usize..20) {
        let composites = compose_pairs(&small_bank(seed_base, pairs));
        prop_assert_eq!(composites.len(), 2 * pairs);
        let curved_left = composites.iter().filter(|c| c.primary && c.left_class == ShapeClass::Round).count();
        prop_assert!(curved_left == pairs / 2 || curved_left == pairs.div_ceil(2));
        for c in &composites {
            let m = c.mirror();
            prop_assert_eq!(m.left_class, c.right_class);
            prop_assert_eq!(&m.mirror().image, &c.image);
            prop_assert_eq!(m.primary, !c.primary);
        }
    }

    #[test]
    fn point_sets_are_reproducible_and_in_the_disk(seed in any::<u64>(), n in 3usize..16) {
        let a = sample_points(seed, n).unwrap();
        prop_assert_eq!(&a, &sample_points(seed, n).unwrap());
        prop_assert!(a.points.iter().all(|p| p[0] * p[0] + p[1] * p[1] <= 1.0 + 1e-12));
    }

    #[test]
    fn coarse_maps_are_non_negative(values in prop::collection::vec(-5.0f32..5.0, 2 * 3 * 4 * 4), grid in 2usize..4) {
        let conv = GradientCapture {
            score: 0.0,
            activations: Array3::from_shape_vec((3, 4, 4), values[..48].to_vec()).unwrap(),
            gradients: Array3::from_shape_vec((3, 4, 4), values[48..].to_vec()).unwrap(),
            kind: FeatureKind::Convolutional,
        };
        prop_assert!(coarse_map(&conv).unwrap().iter().all(|v| *v >= 0.0));
        let t = grid * grid + 1;
        let att = GradientCapture {
            score: 0.0,
            activations: Array3::from_shape_fn((2, t, t), |(h, i, j)| values[(h * 31 + i * 7 + j) % 48]),
            gradients: Array3::from_shape_fn((2, t, t), |(h, i, j)| values[48 + (h * 13 + i * 5 + j) % 48]),
            kind: FeatureKind::Attention { grid },
        };
        let map = coarse_map(&att).unwrap();
        prop_assert_eq!(map.dim(), (grid, grid));
        prop_assert!(map.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn bilinear_rows_are_convex_weights(out in 1usize..60, inp in 1usize..12) {
        let m = interpolation_matrix(out, inp);
        for row in m.outer_iter() {
            prop_assert!(row.iter().all(|w| *w >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let coarse = Array2::from_shape_fn((inp, inp), |(i, j)| (i * inp + j) as f32);
        let up = upsample_bilinear(&coarse, out, out);
        let max = (inp * inp - 1) as f32;
        prop_assert!(up.iter().all(|v| *v >= -1e-4 && *v <= max + 1e-3));
    }

    #[test]
    fn region_choice_is_scale_invariant(
        cells in prop::collection::vec(0.0f32..1.0, 3 * 7),
        k in 1e-3f32..1e3,
        seed in 0u64..1000,
    ) {
        let composite = &compose_pairs(&small_bank(seed, 1))[0];
        let w = RegionWeights::new(composite, (3, 7));
        let coarse = Array2::from_shape_vec((3, 7), cells).unwrap();
        let a = w.stats(&coarse).unwrap();
        let b = w.stats(&coarse.mapv(|v| v * k)).unwrap();
        prop_assert_eq!(choose_side(a.left_sum, a.right_sum), choose_side(b.left_sum, b.right_sum));
        prop_assert!(a.left_sum >= 0.0 && a.right_sum >= 0.0 && a.gutter_sum >= 0.0);
    }

    #[test]
    fn equal_halves_are_flagged(x in 0.0f64..1e6) {
        let (side, tie) = choose_side(x, x);
        prop_assert!(tie);
        prop_assert_eq!(side, bkprobe::shapes::Side::Left);
    }

    #[test]
    fn softmax_is_a_distribution_and_scale_keeps_the_winner(
        img in prop::collection::vec(-1.0f32..1.0, 6),
        texts in prop::collection::vec(-1.0f32..1.0, 5 * 6),
        scale in 0.5f64..200.0,
    ) {
        let texts = Array2::from_shape_vec((5, 6), texts).unwrap();
        let img = ndarray::Array1::from(img);
        let p = probabilities_from_embeddings(img.view(), texts.view(), scale);
        let q = probabilities_from_embeddings(img.view(), texts.view(), 2.0 * scale);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let labels = LabelSet::new(WordType::Original, bkprobe::lexicon::original_labels()).unwrap().labels;
        let labels: Vec<_> = labels.iter().cycle().take(5).cloned().collect();
        let (a, tie_a) = argmax_label(&p, &labels);
        let (b, tie_b) = argmax_label(&q, &labels);
        if !tie_a && !tie_b {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn stored_probabilities_round_trip_at_half_precision(probs in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let back = decode_probs(&encode_probs(&probs)).unwrap();
        prop_assert_eq!(back.len(), probs.len());
        for (a, b) in probs.iter().zip(&back) {
            prop_assert!((a - *b as f64).abs() <= 1e-3);
        }
    }

    #[test]
    fn posterior_grows_with_successes(n in 1u64..500, s in 0u64..500) {
        let s = s % n;
        let a = proportion_estimate(s, n, 0.25).unwrap();
        let b = proportion_estimate(s + 1, n, 0.25).unwrap();
        prop_assert!(b.posterior_mean > a.posterior_mean);
        prop_assert!(b.ci_low > a.ci_low && b.ci_high > a.ci_high);
        prop_assert!(a.ci_low < a.posterior_mean && a.posterior_mean < a.ci_high);
        let more = proportion_estimate(s, n + 1, 0.25).unwrap();
        prop_assert!(more.posterior_mean < a.posterior_mean);
    }

    #[test]
    fn bootstrap_is_deterministic_per_seed(bits in prop::collection::vec(any::<bool>(), 10..80), seed in any::<u64>()) {
        let outcomes: Vec<(String, bool)> = bits.iter().enumerate().map(|(i, b)| (format!("p{}", i % 3), *b)).collect();
        let a = stratified_bootstrap(&outcomes, 300, seed).unwrap();
        prop_assert_eq!(a, stratified_bootstrap(&outcomes, 300, seed).unwrap());
        prop_assert!(a.ci_low <= a.mean + 1e-12 && a.mean <= a.ci_high + 1e-12);
    }

    #[test]
    fn separability_ignores_rotation_and_scale(seed in 0u64..500, angle in 0.0f64..std::f64::consts::TAU, k in 0.1f32..10.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((20, 3), |(i, j)| rng.random::<f32>() + if j == 0 && classes[i] == 1 { 0.7 } else { 0.0 });
        let (c, s) = (angle.cos() as f32, angle.sin() as f32);
        let rotated = Array2::from_shape_fn((20, 3), |(i, j)| match j {
            0 => k * (c * x[[i, 0]] - s * x[[i, 1]]),
            1 => k * (s * x[[i, 0]] + c * x[[i, 1]]),
            _ => k * x[[i, 2]],
        });
        let a = separability_score(x.view(), &classes).unwrap();
        let b = separability_score(rotated.view(), &classes).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn trial_keys_are_stable_and_separate_parts(a in "[a-z]{0,6}", b in "[a-z]{0,6}") {
        prop_assert_eq!(trial_key(&[&a, &b]), trial_key(&[&a, &b]));
        let joined = format!("{a}{b}");
        prop_assert_ne!(trial_key(&[&a, &b]), trial_key(&[&joined]));
    }
}

#[test]
fn swapping_grapheme_classes_swaps_label_classes() {
    for a in [GraphemeClass::Neutral, GraphemeClass::Round, GraphemeClass::Sharp] {
        let classes = AlperClasses::default().with_a(a);
        let plain = gen_alper_labels(&classes).unwrap();
        let swapped = gen_alper_labels(&classes.swapped()).unwrap();
        assert_eq!(plain.len(), swapped.len());
        for l in &plain {
            let twin = swapped.iter().find(|s| s.text == l.text).expect("same words");
            assert_eq!(twin.shape_class, l.shape_class.opposite());
            assert_eq!(twin.syllables.len(), l.syllables.len());
        }
    }
}
