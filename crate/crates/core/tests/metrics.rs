mod common;

use common::scalar_metrics;
use mdepth::metrics::{evaluate, mae, rmse, sq_rel, MetricsAccumulator, ResolutionPolicy};
use mdepth::{DepthMap, Error};
use proptest::prelude::*;

#[test]
fn hand_examples() {
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535_534).abs() < 1e-6);
    assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
    assert_eq!(sq_rel(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 1.0);
    assert_eq!(sq_rel(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap(), 2.0);
    assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
}

#[test]
fn constant_truth_is_degenerate_for_sq_rel_only() {
    assert!(matches!(sq_rel(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::Degenerate(_))));
    let gt = DepthMap::new(1, 2, vec![2.0, 2.0]).unwrap();
    let pred = DepthMap::new(1, 2, vec![1.0, 3.0]).unwrap();
    let r = evaluate(&[pred], &[gt], &ResolutionPolicy::identity()).unwrap();
    assert_eq!(r.sq_rel, None);
    assert_eq!(r.rmse, 1.0);
    assert_eq!(r.mae, 1.0);
}

#[test]
fn empty_evaluation_is_an_error() {
    assert!(evaluate(&[], &[], &ResolutionPolicy::identity()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn match_scalar_oracle(pairs in prop::collection::vec((0.5f64..10.0, 0.5f64..10.0), 2..64)) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|&v| v != y[0]));
        let (r, s, m) = scalar_metrics(&y, &p);
        prop_assert!((rmse(&y, &p).unwrap() - r).abs() <= 1e-12 * r.max(1.0));
        prop_assert!((sq_rel(&y, &p).unwrap() - s).abs() <= 1e-12 * s.max(1.0));
        prop_assert!((mae(&y, &p).unwrap() - m).abs() <= 1e-12 * m.max(1.0));
        prop_assert!(r >= m - 1e-12);
    }

    #[test]
    fn merged_accumulators_equal_single_pass(
        pairs in prop::collection::vec((0.5f64..10.0, 0.5f64..10.0), 2..64),
        split in 0usize..64,
    ) {
        let cut = split.min(pairs.len());
        let mut all = MetricsAccumulator::default();
        let mut a = MetricsAccumulator::default();
        let mut b = MetricsAccumulator::default();
        for (i, &(y, p)) in pairs.iter().enumerate() {
            all.push(y, p);
            if i < cut { a.push(y, p) } else { b.push(y, p) }
        }
        a.merge(&b);
        prop_assert!((a.rmse().unwrap() - all.rmse().unwrap()).abs() <= 1e-12);
        prop_assert!((a.mae().unwrap() - all.mae().unwrap()).abs() <= 1e-12);
        if let (Ok(x), Ok(z)) = (a.sq_rel(), all.sq_rel()) {
            prop_assert!((x - z).abs() <= 1e-9 * z.max(1.0));
        }
    }
}
