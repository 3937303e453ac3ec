use exotune::stats::{cv, iqr_outliers, median, permutation_test, quartiles, summarize, MIN_PERMUTATIONS};
use exotune::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_sample(rng: &mut ChaCha8Rng, mu: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(mu, 1.0).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

#[test]
fn cv_fixtures() {
    assert!((cv(&[2.0, 4.0]).unwrap() - 2f64.sqrt() / 3.0).abs() < 1e-15);
    assert_eq!(cv(&[5.0; 6]).unwrap(), 0.0);
    // std = √(32/7), mean = 5.
    let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    assert!((cv(&xs).unwrap() - (32.0f64 / 7.0).sqrt() / 5.0).abs() < 1e-15);
    assert!(matches!(cv(&[-1.0, 1.0]), Err(Error::ZeroMean)));
    assert!(cv(&[]).is_err());
}

#[test]
fn iqr_fixtures() {
    assert_eq!(iqr_outliers(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), vec![false, false, false, false, true]);
    assert!(iqr_outliers(&[3.0; 7]).unwrap().iter().all(|f| !f));
    // Q1 = 2, Q3 = 4, fences at -1 and 7.
    let q = quartiles(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
    assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
    assert_eq!((q.lower_fence, q.upper_fence), (-1.0, 7.0));
    assert_eq!(iqr_outliers(&[-1.0, 2.0, 3.0, 4.0, 7.0]).unwrap(), vec![false; 5]);
    assert_eq!(iqr_outliers(&[-1.5, 2.0, 3.0, 4.0, 7.5]).unwrap(), vec![true, false, false, false, true]);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
}

#[test]
fn summary_collects_the_pieces() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
    assert_eq!(s.n, 5);
    assert_eq!(s.mean, 22.0);
    assert_eq!(s.quartiles.median, 3.0);
    assert!(s.cv.is_some());
    assert!(summarize(&[-1.0, 1.0]).unwrap().cv.is_none());
}

#[test]
fn identical_samples_give_p_one() {
    let a = [1.0, 4.0, 2.5, 7.0, 3.0];
    assert_eq!(permutation_test(&a, &a, 2000, 0).unwrap(), 1.0);
}

#[test]
fn well_separated_samples_are_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = normal_sample(&mut rng, 0.0, 30);
    let b = normal_sample(&mut rng, 5.0, 30);
    let p = permutation_test(&a, &b, 10_000, 1).unwrap();
    assert!(p < 0.001, "p = {p}");
    assert_eq!(p, 1.0 / 10_001.0);
}

#[test]
fn null_rejection_rate_is_calibrated() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let reps = 200;
    let rejected = (0..reps)
        .filter(|&i| {
            let a = normal_sample(&mut rng, 0.0, 15);
            let b = normal_sample(&mut rng, 0.0, 15);
            permutation_test(&a, &b, 1000, i as u64).unwrap() <= 0.05
        })
        .count();
    let rate = rejected as f64 / reps as f64;
    assert!((rate - 0.05).abs() <= 0.03, "rejection rate {rate}");
}

#[test]
fn too_few_permutations_or_empty_samples_are_rejected() {
    assert!(permutation_test(&[1.0], &[2.0], MIN_PERMUTATIONS - 1, 0).is_err());
    assert!(permutation_test(&[], &[2.0], MIN_PERMUTATIONS, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn p_is_symmetric_order_free_and_in_range(
        a in prop::collection::vec(-10.0..10.0f64, 2..12),
        b in prop::collection::vec(-10.0..10.0f64, 2..12),
        seed in any::<u64>(),
    ) {
        let n = 1000;
        let p = permutation_test(&a, &b, n, seed).unwrap();
        prop_assert!(p >= 1.0 / (n as f64 + 1.0) && p <= 1.0);
        prop_assert_eq!(p, permutation_test(&b, &a, n, seed).unwrap());
        let mut ra = a.clone();
        ra.reverse();
        prop_assert_eq!(p, permutation_test(&ra, &b, n, seed).unwrap());
    }

    #[test]
    fn cv_is_scale_invariant(xs in prop::collection::vec(1.0..10.0f64, 2..20), s in 0.1..100.0f64) {
        let scaled: Vec<f64> = xs.iter().map(|x| x * s).collect();
        prop_assert!((cv(&xs).unwrap() - cv(&scaled).unwrap()).abs() < 1e-9);
    }
}
