mod common;

use common::naive_ssim;
use mdepth::losses::{
    composite_value, depth_transform, inverse_depth_transform, ssim_value, LossConfig,
};
use mdepth::{DepthMap, Tape, Tensor};
use proptest::prelude::*;

fn img(n: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![n, 1, h, w], data).unwrap()
}

fn pair(n: usize, h: usize, w: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let len = n * h * w;
    (prop::collection::vec(0.0f64..10.0, len), prop::collection::vec(0.0f64..10.0, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_matches_naive_oracle_and_is_symmetric((x, y) in pair(2, 9, 11)) {
        let cfg = LossConfig::default();
        let (tx, ty) = (img(2, 9, 11, x.clone()), img(2, 9, 11, y.clone()));
        let fast = ssim_value(&tx, &ty, &cfg).unwrap();
        let naive = naive_ssim(&x, &y, 2, 9, 11, 7, cfg.c1(), cfg.c2());
        prop_assert!((fast - naive).abs() <= 1e-10, "{fast} vs {naive}");
        prop_assert_eq!(fast, ssim_value(&ty, &tx, &cfg).unwrap());
        prop_assert!((-1.0..=1.0).contains(&fast));
    }

    #[test]
    fn composite_terms_nonnegative_and_zero_on_equal((x, y) in pair(1, 8, 8)) {
        let cfg = LossConfig::default();
        let b = composite_value(&img(1, 8, 8, x.clone()), &img(1, 8, 8, y), &cfg).unwrap();
        prop_assert!(b.l1 >= 0.0 && b.l1_grad >= 0.0 && b.l_ssim >= 0.0 && b.l_ssim <= 1.0);
        prop_assert_eq!(b.total, cfg.lambda * b.l1 + b.l1_grad + b.l_ssim);
        let same = composite_value(&img(1, 8, 8, x.clone()), &img(1, 8, 8, x), &cfg).unwrap();
        prop_assert!(same.total.abs() <= 1e-12);
    }

    #[test]
    fn depth_transform_round_trip(values in prop::collection::vec(0.2f64..15.0, 24)) {
        let d = DepthMap::new(4, 6, values.clone()).unwrap();
        let t = depth_transform(&d, 10.0, 1.0).unwrap();
        let back = inverse_depth_transform(&t, 10.0, 1.0).unwrap();
        for (i, &v) in values.iter().enumerate() {
            let clamped = v.clamp(1.0, 10.0);
            prop_assert!(t.values()[i] >= 1.0 && t.values()[i] <= 10.0);
            prop_assert!((back.values()[i] - clamped).abs() <= 1e-6 * clamped);
        }
    }
}

#[test]
fn depth_transform_hand_values() {
    let d = DepthMap::new(1, 3, vec![5.0, 10.0, 1.0]).unwrap();
    let t = depth_transform(&d, 10.0, 1.0).unwrap();
    assert_eq!(t.values(), &[2.0, 1.0, 10.0]);
}

#[test]
fn depth_transform_masks_holes() {
    let d = DepthMap::new(1, 3, vec![0.0, 4.0, -1.0]).unwrap();
    let t = depth_transform(&d, 10.0, 1.0).unwrap();
    assert_eq!(t.valid(), &[false, true, false]);
    assert!(t.values().iter().all(|v| v.is_finite()));
}

fn loss_of(f: fn(&mut Tape<f64>, mdepth::Var, mdepth::Var) -> mdepth::Result<mdepth::Var>, y: Tensor<f64>, p: Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let yv = tape.constant(y);
    let pv = tape.constant(p);
    let out = f(&mut tape, yv, pv).unwrap();
    tape.item(out).unwrap()
}

#[test]
fn l1_and_grad_hand_values() {
    use mdepth::losses::{grad_loss, l1_loss};
    let l1 = |t: &mut Tape<f64>, a, b| l1_loss(t, a, b, None);
    let g = |t: &mut Tape<f64>, a, b| grad_loss(t, a, b, None);
    let y = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let p = Tensor::new(vec![1, 1, 1, 3], vec![2.0, 2.0, 5.0]).unwrap();
    assert_eq!(loss_of(l1, y, p), 1.0);
    let y = img(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
    assert_eq!(loss_of(g, y, Tensor::zeros(vec![1, 1, 2, 2]).unwrap()), 1.0);
    let c = Tensor::full(vec![1, 1, 3, 3], 4.0).unwrap();
    assert_eq!(loss_of(g, c, Tensor::full(vec![1, 1, 3, 3], -2.0).unwrap()), 0.0);
}

#[test]
fn ssim_constant_images_closed_form() {
    let cfg = LossConfig::default();
    let s = ssim_value(&img(1, 7, 7, vec![0.0; 49]), &img(1, 7, 7, vec![1.0; 49]), &cfg).unwrap();
    let expect = 0.01 / 1.01;
    assert!((s - expect).abs() < 1e-12);
    assert!(((1.0 - s) / 2.0 - 0.495_049_5).abs() < 1e-6);
}

#[test]
fn composite_weighting() {
    assert_eq!(mdepth::losses::combine_terms(0.1f64, 1.0, 1.0, 0.5), 1.6);
}
