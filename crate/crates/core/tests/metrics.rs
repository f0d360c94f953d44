mod common;

use hmp_eval::metrics::{self, FeatureSet};
use hmp_eval::motion::{rotate_z, PredictionSet};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array4, Axis};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn metrics_match_brute_force() {
    let mut rng = common::rng(11);
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let t = rng.random_range(1..=30);
        let j = rng.random_range(1..=5);
        let raw = common::random_set(&mut rng, n, t, j);
        let gt = common::random_window(&mut rng, t, j);
        let mm: Vec<_> = (0..rng.random_range(1..4)).map(|_| common::random_window(&mut rng, t, j)).collect();
        let views: Vec<_> = mm.iter().map(|w| w.view()).collect();
        let set = PredictionSet::new(raw.clone()).unwrap();
        assert!((metrics::ade(&set, gt.view()).unwrap() - common::ade(&raw, &gt)).abs() < 1e-9);
        assert!((metrics::fde(&set, gt.view()).unwrap() - common::fde(&raw, &gt)).abs() < 1e-9);
        assert!((metrics::mmade(&set, &views).unwrap() - common::mmade(&raw, &mm)).abs() < 1e-9);
        assert!((metrics::mmfde(&set, &views).unwrap() - common::mmfde(&raw, &mm)).abs() < 1e-9);
        assert!((metrics::apd(&set) - common::apd(&raw)).abs() < 1e-9);
    }
}

#[test]
fn mmade_with_single_window_equals_ade() {
    let mut rng = common::rng(3);
    let raw = common::random_set(&mut rng, 6, 8, 3);
    let gt = common::random_window(&mut rng, 8, 3);
    let set = PredictionSet::new(raw).unwrap();
    assert_eq!(metrics::mmade(&set, &[gt.view()]).unwrap(), metrics::ade(&set, gt.view()).unwrap());
    assert_eq!(metrics::mmfde(&set, &[gt.view()]).unwrap(), metrics::fde(&set, gt.view()).unwrap());
}

#[test]
fn apde_of_mean_offsets() {
    // mm-GT: two windows 2 m apart -> APD 2. Predictions 0.5 m apart -> APD 0.5.
    let mut gt = Array4::<f64>::zeros((2, 3, 1, 3));
    gt.index_axis_mut(Axis(0), 1).index_axis_mut(Axis(2), 0).fill(2.0);
    let mut pred = Array4::<f64>::zeros((2, 3, 1, 3));
    pred.index_axis_mut(Axis(0), 1).index_axis_mut(Axis(2), 0).fill(0.5);
    let windows: Vec<_> = gt.outer_iter().collect();
    let v = metrics::apde(&PredictionSet::new(pred).unwrap(), &windows).unwrap().unwrap();
    assert!((v - 1.5).abs() < 1e-12);
}

fn rotate_set(a: &Array4<f64>, angle: f64) -> Array4<f64> {
    let mut out = a.clone();
    for (mut o, s) in out.outer_iter_mut().zip(a.outer_iter()) {
        o.assign(&rotate_z(s, angle));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_invariant_under_z_rotation(seed in any::<u64>(), angle in -10.0f64..10.0) {
        let mut rng = common::rng(seed);
        let (n, t, j) = (rng.random_range(1..8), rng.random_range(1..10), rng.random_range(1..5));
        let raw = common::random_set(&mut rng, n, t, j);
        let gt = common::random_window(&mut rng, t, j);
        let other = common::random_window(&mut rng, t, j);
        let a = PredictionSet::new(raw.clone()).unwrap();
        let b = PredictionSet::new(rotate_set(&raw, angle)).unwrap();
        let (gt_r, other_r) = (rotate_z(gt.view(), angle), rotate_z(other.view(), angle));
        prop_assert!((metrics::ade(&a, gt.view()).unwrap() - metrics::ade(&b, gt_r.view()).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::fde(&a, gt.view()).unwrap() - metrics::fde(&b, gt_r.view()).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::mmade(&a, &[gt.view(), other.view()]).unwrap()
            - metrics::mmade(&b, &[gt_r.view(), other_r.view()]).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::mmfde(&a, &[gt.view(), other.view()]).unwrap()
            - metrics::mmfde(&b, &[gt_r.view(), other_r.view()]).unwrap()).abs() < 1e-9);
        prop_assert!((metrics::apd(&a) - metrics::apd(&b)).abs() < 1e-9);
    }

    #[test]
    fn apd_is_permutation_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let raw = common::random_set(&mut rng, 6, 4, 2);
        let mut order: Vec<usize> = (0..6).collect();
        order.reverse();
        order.swap(1, 4);
        let permuted = raw.select(Axis(0), &order);
        let a = metrics::apd(&PredictionSet::new(raw).unwrap());
        let b = metrics::apd(&PredictionSet::new(permuted).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cmd_forms_agree(curve in prop::collection::vec(0.0f64..2.0, 1..500), mbar in 0.0f64..2.0) {
        let closed = metrics::cmd(&curve, mbar);
        prop_assert!((closed - metrics::cmd_cumulative(&curve, mbar)).abs() <= 1e-9 * closed.max(1.0));
        prop_assert!((closed - common::cmd_double_sum(&curve, mbar)).abs() <= 1e-9 * closed.max(1.0));
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = common::rng(seed);
        let c1 = common::to_dmatrix(&common::random_psd(&mut rng, d));
        let c2 = common::to_dmatrix(&common::random_psd(&mut rng, d));
        let m1 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let m2 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let ab = metrics::frechet_distance(&m1, &c1, &m2, &c2).unwrap();
        let ba = metrics::frechet_distance(&m2, &c2, &m1, &c1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8);
    }
}

#[test]
fn frechet_matches_jacobi_oracle() {
    let mut rng = common::rng(5);
    for d in [3, 5] {
        for _ in 0..50 {
            let c1 = common::random_psd(&mut rng, d);
            let c2 = common::random_psd(&mut rng, d);
            let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expected = common::frechet(&m1, &c1, &m2, &c2);
            let got = metrics::frechet_distance(
                &DVector::from_vec(m1.clone()),
                &common::to_dmatrix(&c1),
                &DVector::from_vec(m2.clone()),
                &common::to_dmatrix(&c2),
            )
            .unwrap();
            assert!((got - expected).abs() < 1e-6, "d={d}: {got} vs {expected}");
        }
    }
}

#[test]
fn frechet_identical_gaussians_is_zero() {
    let mut rng = common::rng(8);
    let c = common::to_dmatrix(&common::random_psd(&mut rng, 4));
    let m = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    assert!(metrics::frechet_distance(&m, &c, &m, &c).unwrap() < 1e-8);
}

#[test]
fn fid_of_same_distribution_is_small() {
    let mut rng = common::rng(21);
    let d = 4;
    let mut draw = |n: usize| {
        let mut normal = hmp_eval::diffusion::NormalRng::seeded(rng.random());
        FeatureSet::from_rows(DMatrix::from_fn(n, d, |_, j| 0.5 * j as f64 + normal.normal()))
    };
    let (a, b) = (draw(10_000), draw(10_000));
    let v = metrics::fid(&a, &b).unwrap();
    assert!(v < 0.05, "FID {v}");
    assert!(metrics::fid(&a, &a).unwrap() < 1e-8);
}
