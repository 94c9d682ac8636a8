#[path = "support/oracles.rs"]
mod oracles;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsad_core::metrics::{auroc, average_precision, connected_components, f1_max, pro, ProSweep};
use zsad_core::Mask;

use oracles::*;

const TOL: f64 = 1e-6;

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (s, y) = instance(&mut rng);
        assert!((auroc(&s, &y).unwrap() - pair_count_auroc(&s, &y)).abs() < TOL);
    }
}

#[test]
fn f1_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let (s, y) = instance(&mut rng);
        assert!((f1_max(&s, &y).unwrap() - sweep_f1(&s, &y)).abs() < TOL);
    }
}

#[test]
fn ap_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let (s, y) = instance(&mut rng);
        assert!((average_precision(&s, &y).unwrap() - sweep_ap(&s, &y)).abs() < TOL);
    }
}

#[test]
fn components_match_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let m = random_mask(&mut rng, h, w, 0.45);
        let (comp, sizes) = connected_components(&m);
        let oracle = regions(&m);
        assert_eq!(sizes.len(), oracle.len());
        for reg in &oracle {
            let id = comp[reg[0]].unwrap();
            assert_eq!(sizes[id], reg.len());
            assert!(reg.iter().all(|&i| comp[i] == Some(id)));
        }
        for (i, c) in comp.iter().enumerate() {
            assert_eq!(c.is_some(), m.data[i] == 1);
        }
    }
}

#[test]
fn pro_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let (maps, masks) = pro_instance(&mut rng);
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        for limit in [0.3, 1.0] {
            let got = pro(&refs, &masks, limit, ProSweep::Exhaustive).unwrap();
            let want = brute_pro(&maps, &masks, limit);
            assert!((got - want).abs() < TOL, "limit {limit}: {got} vs {want}");
        }
    }
}

#[test]
fn pro_two_region_toy() {
    let mask = Mask {
        height: 4,
        width: 4,
        data: vec![
            1, 1, 0, 0, //
            1, 0, 0, 0, //
            0, 0, 0, 1, //
            0, 0, 1, 1,
        ],
    };
    assert_eq!(connected_components(&mask).1.len(), 2);
    let map: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64 / 16.0).collect();
    let got = pro(&[&map], std::slice::from_ref(&mask), 0.3, ProSweep::Exhaustive).unwrap();
    assert!((got - brute_pro(&[map], &[mask], 0.3)).abs() < TOL);
}

#[test]
fn quantile_sweep_tracks_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let masks: Vec<Mask> = (0..10).map(|_| random_mask(&mut rng, 16, 16, 0.2)).collect();
    let maps: Vec<Vec<f64>> =
        masks.iter().map(|m| m.data.iter().map(|&v| rng.random::<f64>() + 0.5 * f64::from(v)).collect()).collect();
    let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
    let exact = pro(&refs, &masks, 0.3, ProSweep::Exhaustive).unwrap();
    let approx = pro(&refs, &masks, 0.3, ProSweep::Quantiles(200)).unwrap();
    assert!((exact - approx).abs() < 0.02, "{exact} vs {approx}");
}

#[test]
fn worked_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.9, 0.6, 0.4, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    assert_eq!(f1_max(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(f1_max(&[0.1, 0.9], &[1, 0]).unwrap(), 2.0 / 3.0);
    assert_eq!(average_precision(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
}

#[test]
fn ap_beats_prevalence_on_average_for_random_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
    let prevalence = 0.25;
    let mut scores: Vec<f64> = (0..40).map(f64::from).collect();
    let mut total = 0.0;
    for _ in 0..1000 {
        scores.shuffle(&mut rng);
        total += average_precision(&scores, &labels).unwrap();
    }
    assert!(total / 1000.0 >= prevalence);
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut y)| {
            y[0] = 1;
            y[1] = 0;
            (s, y)
        })
    })
}

proptest! {
    #[test]
    fn rank_metrics_ignore_monotone_transforms((s, y) in scores_and_labels(), k in 0.1f64..5.0, c in -3.0f64..3.0) {
        let t: Vec<f64> = s.iter().map(|v| (k * v + c).tanh() * 0.5 + v.exp()).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((f1_max(&s, &y).unwrap() - f1_max(&t, &y).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &y).unwrap() - average_precision(&t, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_flips_under_negation((s, y) in scores_and_labels()) {
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_metrics_ignore_input_order((s, y) in scores_and_labels(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let ps: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let py: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&ps, &py).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &y).unwrap() - average_precision(&ps, &py).unwrap()).abs() < 1e-12);
        prop_assert!((f1_max(&s, &y).unwrap() - f1_max(&ps, &py).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pro_ignores_image_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut maps, mut masks) = pro_instance(&mut rng);
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        let a = pro(&refs, &masks, 0.3, ProSweep::Exhaustive).unwrap();
        maps.reverse();
        masks.reverse();
        let refs: Vec<&[f64]> = maps.iter().map(Vec::as_slice).collect();
        let b = pro(&refs, &masks, 0.3, ProSweep::Exhaustive).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rates_stay_in_unit_interval((s, y) in scores_and_labels()) {
        for v in [auroc(&s, &y).unwrap(), f1_max(&s, &y).unwrap(), average_precision(&s, &y).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
