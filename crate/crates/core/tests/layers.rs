mod common;

use common::{naive_conv, sigmoid};
use erra::attention::{ChannelAttention, SpatialAttention};
use erra::nn::{reflect_index, BatchNorm, ConvParams, PaddingMode};
use erra::{Shape, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_f64(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let mut t = Tape::no_grad();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
    t.conv2d(&xv, &wv, Some(&bv), stride, pad)
        .unwrap()
        .into_value()
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // (cin, cout, k, stride, pad, h, w); covers pointwise, small-cout and strided paths
    let cases = [
        (3, 8, 3, 1, 1, 9, 7),
        (4, 4, 3, 1, 1, 5, 12),
        (16, 3, 7, 1, 3, 11, 10),
        (5, 6, 1, 1, 0, 6, 6),
        (3, 5, 3, 2, 1, 10, 9),
        (2, 2, 7, 2, 3, 13, 8),
        (6, 1, 3, 1, 0, 4, 5),
        (8, 40, 3, 1, 1, 40, 33),
    ];
    for (cin, cout, k, stride, pad, h, w) in cases {
        let x = Tensor::<f64>::randn(Shape::new(2, cin, h, w), &mut rng);
        let wt = Tensor::<f64>::randn(Shape::new(cout, cin, k, k), &mut rng);
        let b = Tensor::<f64>::randn(Shape::new(1, cout, 1, 1), &mut rng);
        let want = naive_conv(&x, &wt, Some(&b), stride, pad);
        let got = conv_f64(&x, &wt, &b, stride, pad);
        assert_eq!(got.shape(), want.shape());
        let d = got.max_abs_diff(&want).unwrap();
        assert!(
            d < 1e-10,
            "case {:?}: {d:e}",
            (cin, cout, k, stride, pad, h, w)
        );
        // single precision stays close to the f64 oracle
        let mut t = Tape::<f32>::no_grad();
        let (xv, wv, bv) = (
            t.constant(&x.cast()),
            t.constant(&wt.cast()),
            t.constant(&b.cast()),
        );
        let got32 = t
            .conv2d(&xv, &wv, Some(&bv), stride, pad)
            .unwrap()
            .into_value();
        let d32 = got32.cast::<f64>().max_abs_diff(&want).unwrap();
        assert!(
            d32 < 1e-4,
            "f32 case {:?}: {d32:e}",
            (cin, cout, k, stride, pad, h, w)
        );
    }
}

#[test]
fn reflection_padded_conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = ConvParams::<f64>::init(3, 4, 7, 1, 3, PaddingMode::Reflection, &mut rng).unwrap();
    let x = Tensor::<f64>::randn(Shape::new(1, 3, 9, 8), &mut rng);
    let s = x.shape();
    let padded = Tensor::from_fn(s.with_spatial(s.height + 6, s.width + 6), |n, c, i, j| {
        x.at(
            n,
            c,
            reflect_index(i as isize - 3, s.height),
            reflect_index(j as isize - 3, s.width),
        )
    });
    let want = naive_conv(&padded, &conv.weight, Some(&conv.bias), 1, 0);
    let mut t = Tape::no_grad();
    let xv = t.constant(&x);
    let got = conv.forward(&mut t, &xv).unwrap();
    assert!(got.value().max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn reflect_index_mirrors_without_repeating_the_edge() {
    let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
    assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
}

#[test]
fn batch_norm_eval_is_the_documented_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bn = BatchNorm::<f64>::new(3);
    bn.gamma = Tensor::uniform(bn.gamma.shape(), 0.5, 2.0, &mut rng);
    bn.beta = Tensor::randn(bn.beta.shape(), &mut rng);
    bn.running_mean = Tensor::randn(bn.beta.shape(), &mut rng);
    bn.running_var = Tensor::uniform(bn.beta.shape(), 0.1, 3.0, &mut rng);
    bn.training = false;
    let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 4), &mut rng);
    let mut t = Tape::no_grad();
    let xv = t.constant(&x);
    let (y, stats) = bn.forward(&mut t, &xv).unwrap();
    assert!(stats.is_none());
    let want = Tensor::from_fn(x.shape(), |n, c, i, j| {
        let g = bn.gamma.data()[c];
        let (m, v) = (bn.running_mean.data()[c], bn.running_var.data()[c]);
        g * (x.at(n, c, i, j) - m) / (v + bn.eps).sqrt() + bn.beta.data()[c]
    });
    assert!(y.value().max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn batch_norm_train_normalises_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bn = BatchNorm::<f64>::new(4);
    let x = Tensor::<f64>::randn(Shape::new(3, 4, 5, 5), &mut rng).map(|v| 3.0 * v + 1.0);
    let mut t = Tape::no_grad();
    let xv = t.constant(&x);
    let (y, stats) = bn.forward(&mut t, &xv).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, 75);
    for c in 0..4 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..25).map(move |p| (n, p)))
            .map(|(n, p)| y.value().at(n, c, p / 5, p % 5))
            .collect();
        let mean = vals.iter().sum::<f64>() / 75.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 75.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

/// Spatial attention written out per pixel.
fn sa_oracle(sa: &SpatialAttention<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let m = sa.hidden();
    Tensor::from_fn(s, |n, c, i, j| {
        let pooled = (0..s.channels)
            .map(|k| x.at(n, k, i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = sa.conv2.bias.data()[0];
        for h in 0..m {
            let a = sa.conv1.weight.data()[h] * pooled + sa.conv1.bias.data()[h];
            z += sa.conv2.weight.data()[h] * a.max(0.0);
        }
        x.at(n, c, i, j) * sigmoid(z)
    })
}

fn ca_oracle(ca: &ChannelAttention<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let c = s.channels;
    let mid = c / ca.reduction();
    let mut weights = vec![0.0; s.batch * c];
    for n in 0..s.batch {
        let avg: Vec<f64> = (0..c)
            .map(|k| {
                let mut acc = 0.0;
                for i in 0..s.height {
                    for j in 0..s.width {
                        acc += x.at(n, k, i, j);
                    }
                }
                acc / s.plane() as f64
            })
            .collect();
        let hidden: Vec<f64> = (0..mid)
            .map(|h| {
                let z: f64 = (0..c)
                    .map(|k| ca.conv1.weight.data()[h * c + k] * avg[k])
                    .sum();
                (z + ca.conv1.bias.data()[h]).max(0.0)
            })
            .collect();
        for o in 0..c {
            let z: f64 = (0..mid)
                .map(|h| ca.conv2.weight.data()[o * mid + h] * hidden[h])
                .sum();
            weights[n * c + o] = sigmoid(z + ca.conv2.bias.data()[o]);
        }
    }
    Tensor::from_fn(s, |n, k, i, j| x.at(n, k, i, j) * weights[n * c + k])
}

#[test]
fn attention_matches_scalar_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let sa = SpatialAttention::<f64>::init(8, &mut rng).unwrap();
        let ca = ChannelAttention::<f64>::init(32, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(Shape::new(2, 32, 6, 5), &mut rng);
        let mut t = Tape::no_grad();
        let xv = t.constant(&x);
        let got = sa.forward(&mut t, &xv).unwrap();
        assert!(
            got.value().max_abs_diff(&sa_oracle(&sa, &x)).unwrap() < 1e-12,
            "seed {seed}"
        );
        let got = ca.forward(&mut t, &xv).unwrap();
        assert!(
            got.value().max_abs_diff(&ca_oracle(&ca, &x)).unwrap() < 1e-12,
            "seed {seed}"
        );
    }
}

#[test]
fn channel_attention_rejects_wrong_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ca = ChannelAttention::<f32>::init(16, 4, &mut rng).unwrap();
    let mut t = Tape::no_grad();
    let x = t.constant(&Tensor::zeros(Shape::new(1, 8, 4, 4)));
    assert!(matches!(
        ca.forward(&mut t, &x),
        Err(erra::Error::Shape { .. })
    ));
}

#[test]
fn upsample_of_constant_is_constant_and_values_are_interpolated() {
    let mut t = Tape::<f64>::no_grad();
    let c = t.constant(&Tensor::full(Shape::new(1, 2, 3, 4), 0.7));
    let up = t.bilinear_upsample(&c, 2).unwrap();
    assert_eq!(up.shape(), Shape::new(1, 2, 6, 8));
    assert!(up.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    // half-pixel sampling of a ramp [0, 1] along x
    let ramp = t.constant(&Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap());
    let up = t.bilinear_upsample(&ramp, 2).unwrap();
    assert_eq!(
        up.value().data(),
        &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]
    );
}

#[test]
fn blur_preserves_constants_and_mass_is_symmetric() {
    let mut t = Tape::<f64>::no_grad();
    let c = t.constant(&Tensor::full(Shape::new(1, 1, 5, 6), 2.0));
    let b = t.gaussian_blur(&c).unwrap();
    assert!(b.value().data().iter().all(|&v| (v - 2.0).abs() < 1e-14));
    let mut impulse = Tensor::<f64>::zeros(Shape::new(1, 1, 9, 9));
    impulse.make_mut()[4 * 9 + 4] = 1.0;
    let iv = t.constant(&impulse);
    let b = t.gaussian_blur(&iv).unwrap();
    let k = erra::nn::BINOMIAL_5;
    for i in 0..5 {
        for j in 0..5 {
            assert!((b.value().at(0, 0, 2 + i, 2 + j) - k[i] * k[j]).abs() < 1e-15);
        }
    }
    assert!((b.value().sum_f64() - 1.0).abs() < 1e-14);
    let tiny = t.constant(&Tensor::zeros(Shape::new(1, 1, 2, 8)));
    assert!(t.gaussian_blur(&tiny).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_never_amplifies(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = SpatialAttention::<f64>::init(8, &mut rng).unwrap();
        let ca = ChannelAttention::<f64>::init(16, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(Shape::new(2, 16, h, w), &mut rng).map(|v| 5.0 * v);
        let mut t = Tape::no_grad();
        let xv = t.constant(&x);
        for y in [sa.forward(&mut t, &xv).unwrap(), ca.forward(&mut t, &xv).unwrap()] {
            for (a, b) in y.value().data().iter().zip(x.data()) {
                prop_assert!(a.abs() <= b.abs());
                prop_assert!(a * b >= 0.0);
            }
        }
    }

    #[test]
    fn spatial_attention_is_channel_permutation_equivariant(seed in any::<u64>(), shift in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sa = SpatialAttention::<f64>::init(8, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(Shape::new(1, 8, 4, 5), &mut rng);
        let permute = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |n, c, i, j| t.at(n, (c + shift) % 8, i, j));
        let mut t = Tape::no_grad();
        let xv = t.constant(&x);
        let px = t.constant(&permute(&x));
        let a = permute(sa.forward(&mut t, &xv).unwrap().value());
        let b = sa.forward(&mut t, &px).unwrap().into_value();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn conv_is_linear_in_the_kernel(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 6, 6), &mut rng);
        let w1 = Tensor::<f64>::randn(Shape::new(2, 3, 3, 3), &mut rng);
        let w2 = Tensor::<f64>::randn(Shape::new(2, 3, 3, 3), &mut rng);
        let z = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let sum = w1.zip_map(&w2, |a, b| a + b).unwrap();
        let lhs = conv_f64(&x, &sum, &z, 1, 1);
        let rhs = conv_f64(&x, &w1, &z, 1, 1).zip_map(&conv_f64(&x, &w2, &z, 1, 1), |a, b| a + b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
