//! Invariants checked over generated inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssatt::attention::{SpatialAttention, SpectralAttention};
use ssatt::data::reflect_index;
use ssatt::metrics::ConfusionMatrix;
use ssatt::network::{argmax_rows, fusion_weights};
use ssatt::params::ParamStore;
use ssatt::{Tape, Tensor};

fn indicators(k: usize, counts: Vec<u64>) -> [f64; 4] {
    let cm = ConfusionMatrix::from_counts(k, counts).unwrap();
    [
        cm.overall_accuracy().unwrap(),
        cm.average_accuracy().unwrap(),
        cm.kappa().unwrap(),
        cm.f1_macro().unwrap(),
    ]
}

fn count_table() -> impl Strategy<Value = (usize, Vec<u64>)> {
    (2usize..=6)
        .prop_flat_map(|k| (Just(k), prop::collection::vec(0u64..50, k * k)))
        .prop_filter("non-empty", |(_, c)| c.iter().any(|&x| x > 0))
}

proptest! {
    // Logit gaps beyond about 36 (f64) or 16 (f32) round the sigmoid to 1.
    #[test]
    fn fusion_weights_are_convex(a in -15.0f64..15.0, b in -15.0f64..15.0) {
        let (alpha, beta) = fusion_weights(&[a, b]);
        prop_assert_eq!(alpha + beta, 1.0);
        prop_assert!(alpha > 0.0 && alpha < 1.0);
        prop_assert!(beta > 0.0 && beta < 1.0);
        let (alpha32, beta32) = fusion_weights(&[a as f32 / 2.0, b as f32 / 2.0]);
        prop_assert_eq!(alpha32 + beta32, 1.0f32);
        prop_assert!(alpha32 > 0.0 && alpha32 < 1.0);
    }

    #[test]
    fn fusion_weights_depend_only_on_the_difference(a in -10.0f64..10.0, b in -10.0f64..10.0, s in -5.0f64..5.0) {
        let (x, _) = fusion_weights(&[a, b]);
        let (y, _) = fusion_weights(&[a + s, b + s]);
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn attention_maps_lie_strictly_inside_unit_interval(
        seed in 0u64..1000,
        n in 1usize..3,
        c in 3usize..10,
        hw in 1usize..6,
        scale in 0.1f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let kernel = if c >= 3 { 3 } else { 1 };
        let spe = SpectralAttention::new(&mut store, &mut rng, "spe", c, kernel).unwrap();
        let spa = SpatialAttention::new(&mut store, &mut rng, "spa", c, 3).unwrap();
        let len = n * c * hw * hw;
        let data: Vec<f64> = (0..len).map(|i| scale * ((i as f64 * 0.37 + seed as f64).sin())).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::new([n, c, hw, hw], data).unwrap(), false);
        let m1 = spe.map(&mut tape, &bound, x).unwrap();
        let m2 = spa.map(&mut tape, &bound, x).unwrap();
        prop_assert_eq!(tape.shape(m1), &[n, c, 1, 1]);
        prop_assert_eq!(tape.shape(m2), &[n, 1, hw, hw]);
        for v in tape.value(m1).data().iter().chain(tape.value(m2).data()) {
            prop_assert!(*v > 0.0 && *v < 1.0, "gate {}", v);
        }
    }

    #[test]
    fn reflect_index_stays_in_bounds(i in -200isize..200, n in 1usize..40) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        prop_assert_eq!(r, reflect_index(-i, n));
        if (0..n as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
    }

    #[test]
    fn indicators_ignore_class_relabeling((k, counts) in count_table(), rot in 0usize..6) {
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let mut permuted = vec![0; k * k];
        for i in 0..k {
            for j in 0..k {
                permuted[perm[i] * k + perm[j]] = counts[i * k + j];
            }
        }
        let (a, b) = (indicators(k, counts), indicators(k, permuted));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn indicators_ignore_uniform_scaling((k, counts) in count_table(), s in 2u64..20) {
        let scaled = counts.iter().map(|c| c * s).collect();
        let (a, b) = (indicators(k, counts), indicators(k, scaled));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn indicators_are_bounded((k, counts) in count_table()) {
        let [oa, aa, kappa, f1] = indicators(k, counts);
        for v in [oa, aa, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((-1.0..=1.0).contains(&kappa));
    }

    #[test]
    fn argmax_ignores_row_shift_and_positive_scale(
        rows in prop::collection::vec(prop::collection::vec(-100i32..100, 4), 1..10),
        shift in -50i32..50,
        scale in 1i32..5,
    ) {
        let flat: Vec<f64> = rows.iter().flatten().map(|&v| f64::from(v)).collect();
        let moved: Vec<f64> = flat.iter().map(|v| v * f64::from(scale) + f64::from(shift)).collect();
        let a = argmax_rows(&flat, 4);
        prop_assert_eq!(&a, &argmax_rows(&moved, 4));
        for (row, &p) in rows.iter().zip(&a) {
            prop_assert!((1..=4).contains(&p));
            prop_assert_eq!(row[p - 1], *row.iter().max().unwrap());
        }
    }
}
