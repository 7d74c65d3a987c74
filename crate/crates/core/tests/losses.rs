mod common;

use common::{color_loss, rgb_sv};
use erra::losses::{
    build_laplacian_pyramid, collapse, color_attenuation_loss, haze_density, l1_loss,
    laplace_pyramid_loss, rgb_to_sv, total_loss, LossWeights, PYRAMID_BANDS,
};
use erra::{Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eval<F>(f: F) -> f64
where
    F: FnOnce(&mut Tape<f64>) -> erra::Var<f64>,
{
    let mut t = Tape::no_grad();
    f(&mut t).value().item()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn hsv_matches_scalar_formula() {
    let mut r = rng(1);
    let x = Tensor::<f64>::uniform(Shape::new(2, 3, 5, 4), 0.0, 1.0, &mut r);
    let mut t = Tape::no_grad();
    let xv = t.constant(&x);
    let (s, v) = rgb_to_sv(&mut t, &xv).unwrap();
    let d = haze_density(&mut t, &xv).unwrap();
    for n in 0..2 {
        for i in 0..5 {
            for j in 0..4 {
                let (ws, wv) = rgb_sv(x.at(n, 0, i, j), x.at(n, 1, i, j), x.at(n, 2, i, j));
                assert!((s.value().at(n, 0, i, j) - ws).abs() < 1e-15);
                assert_eq!(v.value().at(n, 0, i, j), wv);
                assert!((d.value().at(n, 0, i, j) - (wv - ws).abs()).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn color_loss_matches_scalar_formula_including_clamping() {
    let mut r = rng(2);
    let w = LossWeights {
        ca_alpha: 0.7,
        ca_beta: 1.3,
        ..LossWeights::default()
    };
    for _ in 0..5 {
        let p = Tensor::<f64>::uniform(Shape::new(2, 3, 6, 6), -0.3, 1.3, &mut r);
        let g = Tensor::<f64>::uniform(Shape::new(2, 3, 6, 6), 0.0, 1.0, &mut r);
        let got = eval(|t| {
            let (pv, gv) = (t.constant(&p), t.constant(&g));
            color_attenuation_loss(t, &pv, &gv, &w).unwrap()
        });
        assert!((got - color_loss(&p, &g, 0.7, 1.3)).abs() < 1e-12);
    }
}

#[test]
fn gray_pair_is_one_eighth() {
    let p = Tensor::<f32>::full(Shape::new(1, 3, 4, 4), 0.5);
    let g = Tensor::<f32>::full(Shape::new(1, 3, 4, 4), 1.0);
    let mut t = Tape::no_grad();
    let (pv, gv) = (t.constant(&p), t.constant(&g));
    let l = color_attenuation_loss(&mut t, &pv, &gv, &LossWeights::default()).unwrap();
    assert_eq!(l.value().item(), 0.125);
}

#[test]
fn identical_inputs_cost_nothing() {
    let mut r = rng(3);
    let x = Tensor::<f32>::uniform(Shape::new(2, 3, 32, 32), 0.0, 1.0, &mut r);
    let mut t = Tape::no_grad();
    let (a, b) = (t.constant(&x), t.constant(&x));
    let terms = total_loss(&mut t, &a, &b, &LossWeights::default()).unwrap();
    assert_eq!(terms.values(), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn total_is_the_weighted_sum() {
    let mut r = rng(4);
    let p = Tensor::<f64>::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r);
    let g = Tensor::<f64>::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r);
    let w = LossWeights {
        alpha1: 0.3,
        alpha2: 2.0,
        ..LossWeights::default()
    };
    let mut t = Tape::no_grad();
    let (pv, gv) = (t.constant(&p), t.constant(&g));
    let (l1, ca, lap, total) = total_loss(&mut t, &pv, &gv, &w).unwrap().values();
    let want_l1 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / p.len() as f64;
    assert!((l1 - want_l1).abs() < 1e-14);
    assert!((ca - color_loss(&p, &g, 1.0, 0.5)).abs() < 1e-14);
    assert!((total - (l1 + 0.3 * ca + 2.0 * lap)).abs() < 1e-14);
    assert!(lap > 0.0);
}

#[test]
fn shape_mismatch_and_bad_sizes_are_rejected() {
    let mut t = Tape::<f32>::no_grad();
    let a = t.constant(&Tensor::zeros(Shape::new(1, 3, 16, 16)));
    let b = t.constant(&Tensor::zeros(Shape::new(1, 3, 16, 24)));
    assert!(l1_loss(&mut t, &a, &b).is_err());
    assert!(color_attenuation_loss(&mut t, &a, &b, &LossWeights::default()).is_err());
    assert!(laplace_pyramid_loss(&mut t, &a, &b).is_err());
    for (h, w) in [(12, 16), (8, 8), (16, 20)] {
        let x = t.constant(&Tensor::zeros(Shape::new(1, 3, h, w)));
        assert!(build_laplacian_pyramid(&mut t, &x).is_err(), "{h}x{w}");
    }
    let gray = t.constant(&Tensor::zeros(Shape::new(1, 1, 16, 16)));
    assert!(rgb_to_sv(&mut t, &gray).is_err());
}

#[test]
fn pyramid_of_a_constant_has_empty_bands() {
    let mut t = Tape::<f64>::no_grad();
    let x = t.constant(&Tensor::full(Shape::new(1, 3, 32, 48), 0.4));
    let p = build_laplacian_pyramid(&mut t, &x).unwrap();
    assert_eq!(p.bands.len(), PYRAMID_BANDS);
    for b in &p.bands {
        assert!(b.value().max_abs_f64() < 1e-15);
    }
    assert_eq!(p.lowpass.shape(), Shape::new(1, 3, 4, 6));
    assert!(p
        .lowpass
        .value()
        .data()
        .iter()
        .all(|v| (v - 0.4).abs() < 1e-15));
}

#[test]
fn pyramid_impulse_response_is_local_and_band_limited() {
    // An impulse spreads through at most the blur support per level.
    let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 64, 64));
    img.make_mut()[32 * 64 + 32] = 1.0;
    let mut t = Tape::no_grad();
    let x = t.constant(&img);
    let p = build_laplacian_pyramid(&mut t, &x).unwrap();
    // band sums cancel: each band is g - up(down(blur(g))) and both terms
    // carry the same mass away from the border
    for b in &p.bands {
        assert!(b.value().sum_f64().abs() < 1e-12);
    }
    let fine = p.bands[0].value();
    assert!(fine.at(0, 0, 32, 32) > 0.5);
    assert_eq!(fine.at(0, 0, 5, 5), 0.0);
    let back = collapse(&mut t, &p).unwrap();
    assert!(back.value().max_abs_diff(&img).unwrap() < 1e-14);
}

#[test]
fn weighting_degenerate_cases() {
    let mut r = rng(5);
    let p = Tensor::<f32>::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r);
    let g = Tensor::<f32>::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r);
    let only_l1 = LossWeights {
        alpha1: 0.0,
        alpha2: 0.0,
        ..LossWeights::default()
    };
    let mut t = Tape::no_grad();
    let (pv, gv) = (t.constant(&p), t.constant(&g));
    let (l1, _, _, total) = total_loss(&mut t, &pv, &gv, &only_l1).unwrap().values();
    assert_eq!(l1, total);
    assert!(LossWeights {
        alpha1: -1.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        ca_beta: f64::NAN,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pyramid_reconstructs(seed in any::<u64>(), hm in 2usize..8, wm in 2usize..8) {
        let mut r = rng(seed);
        let x = Tensor::<f32>::uniform(Shape::new(1, 3, 8 * hm, 8 * wm), 0.0, 1.0, &mut r);
        let mut t = Tape::no_grad();
        let xv = t.constant(&x);
        let p = build_laplacian_pyramid(&mut t, &xv).unwrap();
        let back = collapse(&mut t, &p).unwrap();
        prop_assert!(back.value().max_abs_diff(&x).unwrap() <= 1e-5);
    }

    #[test]
    fn laplace_loss_ignores_a_constant_offset(seed in any::<u64>(), c in -0.5f64..0.5) {
        let mut r = rng(seed);
        let p = Tensor::<f32>::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut r);
        let g = Tensor::<f32>::uniform(Shape::new(1, 3, 32, 32), 0.0, 1.0, &mut r);
        let shifted = p.map(|v| v + c as f32);
        let mut t = Tape::no_grad();
        let (pv, sv, gv) = (t.constant(&p), t.constant(&shifted), t.constant(&g));
        let a = laplace_pyramid_loss(&mut t, &pv, &gv).unwrap().value().item() as f64;
        let b = laplace_pyramid_loss(&mut t, &sv, &gv).unwrap().value().item() as f64;
        prop_assert!((a - b).abs() <= 1e-4);
        let self_shift = laplace_pyramid_loss(&mut t, &sv, &pv).unwrap().value().item() as f64;
        prop_assert!(self_shift <= 1e-4);
    }

    #[test]
    fn losses_are_invariant_to_batch_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = Tensor::<f64>::uniform(Shape::new(3, 3, 16, 16), 0.0, 1.0, &mut r);
        let g = Tensor::<f64>::uniform(Shape::new(3, 3, 16, 16), 0.0, 1.0, &mut r);
        let perm = |x: &Tensor<f64>| Tensor::stack(&[x.batch_item(2), x.batch_item(0), x.batch_item(1)]).unwrap();
        let w = LossWeights::default();
        let mut t = Tape::no_grad();
        let (pv, gv) = (t.constant(&p), t.constant(&g));
        let (pp, gp) = (t.constant(&perm(&p)), t.constant(&perm(&g)));
        let a = total_loss(&mut t, &pv, &gv, &w).unwrap().values();
        let b = total_loss(&mut t, &pp, &gp, &w).unwrap().values();
        prop_assert!((a.3 - b.3).abs() < 1e-12);
        prop_assert!((a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative_and_symmetric_where_expected(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = Tensor::<f64>::uniform(Shape::new(1, 3, 16, 16), -0.2, 1.2, &mut r);
        let g = Tensor::<f64>::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut r);
        let mut t = Tape::no_grad();
        let (pv, gv) = (t.constant(&p), t.constant(&g));
        let w = LossWeights::default();
        let a = total_loss(&mut t, &pv, &gv, &w).unwrap().values();
        let b = total_loss(&mut t, &gv, &pv, &w).unwrap().values();
        prop_assert!(a.0 >= 0.0 && a.1 >= 0.0 && a.2 >= 0.0);
        prop_assert!((a.0 - b.0).abs() < 1e-12);
        prop_assert!((a.2 - b.2).abs() < 1e-12);
    }
}
