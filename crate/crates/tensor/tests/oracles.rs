//! Forward results checked against independent direct computations.

use roadfuse_tensor::{Activation, ConvSpec, RunningStats, SeedRng, Tensor};

fn random(rng: &mut SeedRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Literal nested-loop convolution.
fn conv_oracle(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> (Vec<f64>, usize, usize) {
    let (kh, kw) = spec.kernel;
    let ho = (h + 2 * spec.padding.0 - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding.1 - kw) / spec.stride + 1;
    let cout = spec.out_channels;
    let cg_in = c / spec.groups;
    let cg_out = cout / spec.groups;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for co in 0..cout {
            let g = co / cg_out;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cg_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * spec.stride + ki) as isize - spec.padding.0 as isize;
                                let ix = (ox * spec.stride + kj) as isize - spec.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let cin = g * cg_in + ci;
                                let xv = x[((n * c + cin) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * cg_in + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = SeedRng::new(11);
    let cases = [
        (ConvSpec::new(1, 1, 3).padding(1), (1, 1, 5, 5)),
        (ConvSpec::new(3, 4, 3).padding(1).stride(2), (2, 3, 7, 6)),
        (ConvSpec::new(4, 6, 1), (1, 4, 3, 5)),
        (ConvSpec::new(4, 4, 5).groups(4).padding(2), (2, 4, 6, 6)),
        (ConvSpec::new(4, 4, 3).groups(4).padding(1).stride(2).bias(false), (1, 4, 5, 8)),
        (ConvSpec::new(4, 6, 3).groups(2).padding(1), (1, 4, 4, 4)),
        (ConvSpec::new(2, 3, 2).bias(false), (1, 2, 4, 3)),
    ];
    for (spec, dims) in cases {
        let (b, c, h, w) = dims;
        let x = random(&mut rng, b * c * h * w);
        let wt = random(&mut rng, spec.weight_shape().iter().product());
        let bias = spec.bias.then(|| random(&mut rng, spec.out_channels));
        let (want, ho, wo) = conv_oracle(&x, dims, &wt, bias.as_deref(), &spec);
        let xt = Tensor::<f64>::from_vec(&[b, c, h, w], x).unwrap();
        let wtt = Tensor::from_vec(&spec.weight_shape(), wt).unwrap();
        let bt = bias.map(|bb| Tensor::from_vec(&[spec.out_channels], bb).unwrap());
        let got = xt.conv2d(&spec, &wtt, bt.as_ref()).unwrap();
        assert_eq!(got.shape(), &[b, spec.out_channels, ho, wo]);
        for (g, e) in got.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-6, "{spec:?}: {g} vs {e}");
        }
    }
}

#[test]
fn conv2d_f32_matches_oracle_on_5x5() {
    let mut rng = SeedRng::new(3);
    let spec = ConvSpec::new(1, 1, 3).bias(false);
    let x = random(&mut rng, 25);
    let wt = random(&mut rng, 9);
    let (want, _, _) = conv_oracle(&x, (1, 1, 5, 5), &wt, None, &spec);
    let xt = Tensor::<f32>::from_f64(&[1, 1, 5, 5], &x).unwrap();
    let wtt = Tensor::<f32>::from_f64(&[1, 1, 3, 3], &wt).unwrap();
    let got = xt.conv2d(&spec, &wtt, None).unwrap();
    for (g, e) in got.data().iter().zip(&want) {
        assert!((*g as f64 - e).abs() < 1e-5);
    }
}

fn erf_series(x: f64) -> f64 {
    // 2/√π Σ (-1)^n x^(2n+1) / (n! (2n+1))
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series() {
    for x in [1.0, -0.7, 2.3, 0.1] {
        let want = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
        let got = Activation::Gelu.apply(x);
        assert!((got - want).abs() < 1e-6, "gelu({x})");
        let got32 = Activation::Gelu.apply(x as f32) as f64;
        assert!((got32 - want).abs() < 1e-6, "gelu32({x})");
    }
}

#[test]
fn bilinear_2x2_to_4x4_hand_values() {
    let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![0., 1., 2., 3.]).unwrap();
    let y = x.bilinear_resize(4, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    for (g, e) in y.data().iter().zip(want) {
        assert!((g - e).abs() < 1e-12, "{:?}", y.data());
    }
}

#[test]
fn softmax_matches_exp_sum() {
    let mut rng = SeedRng::new(5);
    let v = random(&mut rng, 7);
    let y = Tensor::<f64>::from_vec(&[7], v.clone()).unwrap().softmax(0).unwrap();
    let z: f64 = v.iter().map(|x| x.exp()).sum();
    for (g, x) in y.data().iter().zip(&v) {
        assert!((g - x.exp() / z).abs() < 1e-9);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SeedRng::new(8);
    let a = random(&mut rng, 6);
    let b = random(&mut rng, 6);
    let at = Tensor::<f64>::from_vec(&[1, 2, 3], a.clone()).unwrap();
    let bt = Tensor::<f64>::from_vec(&[3, 2], b.clone()).unwrap();
    let y = at.matmul(&bt).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    for i in 0..2 {
        for j in 0..2 {
            let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 2 + j]).sum();
            assert!((y.data()[i * 2 + j] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_attention_preserves_constant_values() {
    let q = Tensor::<f64>::ones(&[1, 4, 2]);
    let scores = q.matmul(&q.transpose_last().unwrap()).unwrap().mul_scalar(1.0 / 2f64.sqrt());
    let out = scores.softmax(2).unwrap().matmul(&q).unwrap();
    assert_eq!(out.shape(), &[1, 4, 2]);
    assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn batchnorm_training_standardizes() {
    let mut rng = SeedRng::new(21);
    let x = random(&mut rng, 2 * 4 * 9);
    let scale = vec![1.5, 0.5, 2.0, 1.0];
    let shift = vec![0.3, -1.0, 0.0, 2.0];
    let mut stats = RunningStats::new(4);
    let y = Tensor::<f64>::from_vec(&[2, 4, 3, 3], x)
        .unwrap()
        .batch_norm2d(
            &Tensor::from_vec(&[4], scale.clone()).unwrap(),
            &Tensor::from_vec(&[4], shift.clone()).unwrap(),
            &mut stats,
            true,
        )
        .unwrap();
    for c in 0..4 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| y.data()[(n * 4 + c) * 9..][..9].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 18.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0).sqrt();
        assert!((mean - shift[c]).abs() < 1e-9);
        assert!((std - scale[c]).abs() < 1e-3, "std {std} vs {}", scale[c]);
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let run = || {
        let mut rng = SeedRng::new(99);
        let x = Tensor::<f32>::from_f64(&[1, 3, 8, 8], &random(&mut rng, 192)).unwrap();
        let spec = ConvSpec::new(3, 5, 3).padding(1);
        let w = Tensor::from_f64(&spec.weight_shape(), &random(&mut rng, 135)).unwrap();
        let b = Tensor::from_f64(&[5], &random(&mut rng, 5)).unwrap();
        x.conv2d(&spec, &w, Some(&b))
            .unwrap()
            .gelu()
            .dropout2d(0.3, true, &mut rng)
            .unwrap()
            .bilinear_resize(16, 16)
            .unwrap()
            .to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
