use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scd_core::kernels;
use scd_core::{finite_diff_check, Graph, ScdError, Tensor4};

fn random(shape: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_conv(x: &Tensor4, k: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
    let [n, ci, h, w] = x.shape();
    let [co, _, kh, kw] = k.shape();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Tensor4::from_fn([n, co, oh, ow], |[b, o, y, xx]| {
        let mut s = 0.0;
        for c in 0..ci {
            for dy in 0..kh {
                for dx in 0..kw {
                    let iy = (y * stride + dy) as isize - pad as isize;
                    let ix = (xx * stride + dx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        s += x.at(b, c, iy as usize, ix as usize) * k.at(o, c, dy, dx);
                    }
                }
            }
        }
        s
    })
}

#[test]
fn identity_kernel_leaves_input() {
    let x = random([2, 1, 5, 7], 1);
    let k = Tensor4::full([1, 1, 1, 1], 1.0);
    assert_eq!(kernels::conv2d(&x, &k, None, 1, 0).unwrap(), x);
}

#[test]
fn centre_impulse_spreads_to_all_ones() {
    let x = Tensor4::from_fn([1, 1, 3, 3], |[_, _, y, x]| f64::from(y == 1 && x == 1));
    let k = Tensor4::full([1, 1, 3, 3], 1.0);
    let out = kernels::conv2d(&x, &k, None, 1, 1).unwrap();
    assert_eq!(out.shape(), [1, 1, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv_matches_nested_loops() {
    for (seed, stride, pad, ks) in [(0, 1, 1, 3), (1, 2, 1, 3), (2, 2, 0, 1), (3, 1, 3, 7), (4, 3, 2, 5)] {
        let x = random([2, 3, 9, 8], seed);
        let k = random([4, 3, ks, ks], seed + 10);
        let got = kernels::conv2d(&x, &k, None, stride, pad).unwrap();
        let want = naive_conv(&x, &k, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let x = random([1, 3, 4, 4], 0);
    assert!(matches!(kernels::conv2d(&x, &random([2, 2, 3, 3], 1), None, 1, 1), Err(ScdError::Shape(_))));
    assert!(matches!(kernels::conv2d(&x, &random([2, 3, 7, 7], 1), None, 1, 0), Err(ScdError::Shape(_))));
}

#[test]
fn upsample_examples() {
    let c = Tensor4::full([1, 2, 3, 3], 5.0);
    assert!(kernels::upsample(&c, 2).unwrap().data().iter().all(|&v| v == 5.0));
    let x = Tensor4::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(kernels::upsample(&x, 2).unwrap().data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    assert_eq!(kernels::upsample(&random([1, 3, 4, 4], 0), 4).unwrap().shape(), [1, 3, 16, 16]);
    assert!(matches!(kernels::upsample(&x, 1), Err(ScdError::Param(_))));
}

#[test]
fn pooling_and_pointwise_examples() {
    assert_eq!(kernels::global_avg_pool(&Tensor4::full([1, 1, 2, 2], 3.0)).item(), 3.0);
    let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(kernels::global_avg_pool(&x).item(), 2.5);

    let mut g = Graph::new();
    let p = g.param("x", Tensor4::new([1, 1, 1, 4], vec![-2.0, 3.0, 0.0, -1.5]).unwrap());
    let r = g.relu(p).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0, 0.0, 0.0]);
    let a = g.abs(p).unwrap();
    assert_eq!(g.value(a).data(), &[2.0, 3.0, 0.0, 1.5]);
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[-1.0, 1.0, 0.0, -1.0]);
    assert_eq!(scd_core::losses::sigmoid(0.0), 0.5);
}

#[test]
fn softplus_is_overflow_safe() {
    use scd_core::losses::softplus;
    assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(softplus(200.0), 200.0);
    // log1p(e^-50) by its alternating series; the second term is already ~1e-44 relative.
    let e = (-50.0f64).exp();
    let oracle = e - e * e / 2.0;
    let got = softplus(-50.0);
    assert!(got > 0.0);
    assert!((got - oracle).abs() <= 1e-15 * oracle, "{got:e} vs {oracle:e}");
    assert!((got - 1.9287e-22).abs() < 1e-26);
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.param("a", random([1, 2, 4, 4], 0));
    let b = g.param("b", random([1, 3, 4, 4], 1));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), [1, 5, 4, 4]);
    assert_eq!(g.concat_channels(&[a]).unwrap(), a);
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    for n in ["a", "b"] {
        assert!(grads.get(n).unwrap().data().iter().all(|&v| v == 1.0));
    }
    let bad = g.constant(random([1, 1, 3, 4], 2));
    assert!(matches!(g.concat_channels(&[a, bad]), Err(ScdError::Shape(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor4::zeros([1, 2, 3, 3]));
    let s = g.sum(x).unwrap();
    assert!(g.backward(s).unwrap().get("x").unwrap().data().iter().all(|&v| v == 1.0));
    let sig = g.sigmoid(x).unwrap();
    let s2 = g.sum(sig).unwrap();
    assert!(g.backward(s2).unwrap().get("x").unwrap().data().iter().all(|&v| v == 0.25));
    assert!(matches!(g.backward(sig), Err(ScdError::Contract(_))));
}

#[test]
fn gap_gradient_is_uniform() {
    let mut g = Graph::new();
    let x = g.param("x", random([2, 3, 4, 5], 3));
    let p = g.global_avg_pool(x).unwrap();
    let s = g.sum(p).unwrap();
    assert!(g.backward(s).unwrap().get("x").unwrap().data().iter().all(|&v| v == 1.0 / 20.0));
}

#[test]
fn unused_parameter_gets_exact_zeros() {
    let mut g = Graph::new();
    let x = g.param("x", random([1, 2, 3, 3], 0));
    let _ = g.param("unused", random([2, 2, 1, 1], 1));
    let y = g.sigmoid(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let z = grads.get("unused").unwrap();
    assert_eq!(z.shape(), [2, 2, 1, 1]);
    assert!(z.data().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
}

#[test]
fn linear_loss_checks_to_roundoff() {
    let mut g = Graph::new();
    let x = g.param("x", random([1, 3, 4, 4], 0));
    let k = g.constant(random([1, 3, 4, 4], 1));
    let p = g.mul(k, x).unwrap();
    let s = g.sum(p).unwrap();
    // exact for any step size, so a wide step keeps cancellation error small
    let err = finite_diff_check(&mut g, s, 1e-2).unwrap();
    assert!(err < 1e-10, "{err:e}");
}

#[test]
fn three_op_composite_matches_finite_differences() {
    let mut g = Graph::new();
    let x = g.param("x", random([1, 2, 4, 4], 5));
    let k = g.param("k", random([3, 2, 3, 3], 6));
    let c = g.conv2d(x, k, None, 1, 1).unwrap();
    let s = g.sigmoid(c).unwrap();
    let m = g.mean(s).unwrap();
    assert!(finite_diff_check(&mut g, m, 1e-5).unwrap() < 1e-4);
}

#[test]
fn relu_away_from_kinks_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vals = Tensor4::from_fn([2, 4, 8, 8], |_| {
        let m: f64 = rng.random_range(1e-3..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let mut g = Graph::new();
    let x = g.param("x", vals);
    let w = g.constant(random([2, 4, 8, 8], 10));
    let r = g.relu(x).unwrap();
    let p = g.mul(r, w).unwrap();
    let s = g.sum(p).unwrap();
    assert!(finite_diff_check(&mut g, s, 1e-5).unwrap() < 1e-4);
}

fn lin_op(kind: usize, x: &Tensor4, k: &Tensor4, other: &Tensor4) -> Tensor4 {
    match kind {
        0 => kernels::conv2d(x, k, None, 1, 1).unwrap(),
        1 => kernels::global_avg_pool(x),
        2 => kernels::upsample(x, 2).unwrap(),
        _ => kernels::concat_channels(&[x, other]).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_ops_are_linear(seed in 0u64..10_000, kind in 0usize..4, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = random([2, 3, 5, 4], seed);
        let y = random([2, 3, 5, 4], seed + 1);
        let k = random([2, 3, 3, 3], seed + 2);
        let o = random([2, 1, 5, 4], seed + 3);
        let mut mix = x.scale(a);
        mix.add_assign(&y.scale(b));
        let lhs = lin_op(kind, &mix, &k, &o.scale(a + b));
        let mut rhs = lin_op(kind, &x, &k, &o).scale(a);
        rhs.add_assign(&lin_op(kind, &y, &k, &o).scale(b));
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_output_shape_formula(h in 1usize..12, w in 1usize..12, k in 1usize..6, stride in 1usize..4, pad in 0usize..4) {
        let x = Tensor4::zeros([1, 2, h, w]);
        let kern = Tensor4::zeros([3, 2, k, k]);
        let res = kernels::conv2d(&x, &kern, None, stride, pad);
        if h + 2 * pad >= k && w + 2 * pad >= k {
            let out = res.unwrap();
            prop_assert_eq!(out.shape(), [1, 3, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
        } else {
            prop_assert!(matches!(res, Err(ScdError::Shape(_))));
        }
    }

    #[test]
    fn upsample_shape_formula(h in 1usize..6, w in 1usize..6, f in 2usize..5) {
        prop_assert_eq!(kernels::upsample(&Tensor4::zeros([2, 3, h, w]), f).unwrap().shape(), [2, 3, h * f, w * f]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Smooth random composites; readout weights keep the loss near 1e-3 so the
    /// central difference stays above roundoff.
    #[test]
    fn random_composites_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(2..=8);
        let w = rng.random_range(2..=8);
        let mut g = Graph::new();
        let x = g.param("x", random([n, c, h, w], seed));
        let mut cur = x;
        for i in 0..3 {
            let shape = g.value(cur).shape();
            cur = match rng.random_range(0..7) {
                0 => {
                    let co = rng.random_range(1..=4);
                    let k = g.param(format!("k{i}"), random([co, shape[1], 3, 3], seed ^ i));
                    let b = g.param(format!("b{i}"), random([1, co, 1, 1], seed ^ (i + 7)));
                    g.conv2d(cur, k, Some(b), 1, 1).unwrap()
                }
                1 => g.sigmoid(cur).unwrap(),
                2 => g.softplus(cur).unwrap(),
                3 => g.upsample(cur, 2).unwrap(),
                4 => {
                    let gp = g.global_avg_pool(cur).unwrap();
                    let s = g.sigmoid(gp).unwrap();
                    g.mul(cur, s).unwrap()
                }
                5 => {
                    let other = g.param(format!("o{i}"), random(shape, seed ^ (i + 13)));
                    let cat = g.concat_channels(&[cur, other]).unwrap();
                    g.slice_channels(cat, 1, shape[1]).unwrap()
                }
                _ => {
                    let cm = g.channel_mean(cur).unwrap();
                    g.sub(cur, cm).unwrap()
                }
            };
        }
        let wts = random(g.value(cur).shape(), seed ^ 99).scale(1e-3);
        let wn = g.constant(wts);
        let p = g.mul(cur, wn).unwrap();
        let loss = g.sum(p).unwrap();
        let err = finite_diff_check(&mut g, loss, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "max rel error {err:e}");
    }
}
