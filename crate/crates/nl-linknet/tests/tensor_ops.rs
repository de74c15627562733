//! Tensor-engine correctness: op semantics against brute-force oracles,
//! gradient checks against central finite differences, and determinism.

mod common;

use approx::assert_relative_eq;
use common::*;
use nl_linknet::tensor::{
    grad_check, kernels, ConvSpec, GradCheckOptions, PoolSpec, Shape, Tape, Tensor, Var,
};
use nl_linknet::Error;
use proptest::prelude::*;

fn randn4(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    let x = randn4(Shape::new(2, 1, 4, 5), 1);
    let w = Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
    let spec = ConvSpec::new(1, 1, 1).with_bias(false);
    let y = kernels::conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(x, y);
}

#[test]
fn conv2d_all_ones_3x3_sums_window() {
    let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
    let spec = ConvSpec::new(1, 1, 3).with_bias(false);
    let y = kernels::conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
    assert_relative_eq!(y.item().unwrap(), 9.0);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let x = randn4(Shape::new(2, 3, 5, 5), 2);
    let w = randn4(Shape::new(4, 3, 3, 3), 3);
    let b = randn4(Shape::chan(4), 4);
    let spec = ConvSpec::new(3, 4, 3).padding(1);
    let got = kernels::conv2d(&x, &w, Some(&b), &spec).unwrap();
    let want = conv2d_ref(&x, &w, Some(&b), &spec);
    assert!(max_rel_diff(&got, &want) <= 1e-6);
}

#[test]
fn conv2d_strided_dilated_matches_loop_oracle() {
    let x = randn4(Shape::new(1, 2, 9, 8), 5);
    let w = randn4(Shape::new(3, 2, 3, 2), 6);
    let spec = ConvSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: (3, 2),
        stride: 2,
        padding: 2,
        dilation: 2,
        output_padding: 0,
        bias: false,
    };
    let got = kernels::conv2d(&x, &w, None, &spec).unwrap();
    let want = conv2d_ref(&x, &w, None, &spec);
    assert!(max_rel_diff(&got, &want) <= 1e-6);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_zero_output() {
    let x = randn4(Shape::new(1, 2, 4, 4), 7);
    let w = randn4(Shape::new(1, 3, 1, 1), 8);
    let spec = ConvSpec::new(3, 1, 1).with_bias(false);
    assert!(matches!(
        kernels::conv2d(&x, &w, None, &spec),
        Err(Error::Shape(_))
    ));

    let w2 = randn4(Shape::new(1, 2, 5, 5), 9);
    let spec2 = ConvSpec::new(2, 1, 5).with_bias(false);
    let tiny = randn4(Shape::new(1, 2, 3, 3), 10);
    assert!(matches!(
        kernels::conv2d(&tiny, &w2, None, &spec2),
        Err(Error::Config(_))
    ));
}

// ---------------------------------------------------------------------------
// conv_transpose2d
// ---------------------------------------------------------------------------

#[test]
fn conv_transpose_identity_kernel() {
    let x = randn4(Shape::new(1, 1, 3, 4), 11);
    let w = Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
    let spec = ConvSpec::new(1, 1, 1).with_bias(false);
    let y = kernels::conv_transpose2d(&x, &w, None, &spec).unwrap();
    assert_eq!(x, y);
}

#[test]
fn conv_transpose_stride2_single_pixel_matches_oracle() {
    // 1x1 input scattered through a 3x3 all-ones kernel, stride 2 pad 1:
    // output is the center crop of the kernel placement.
    let x = Tensor::full(Shape::new(1, 1, 1, 1), 1.0f64);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
    let spec = ConvSpec::new(1, 1, 3).stride(2).padding(1).with_bias(false);
    let got = kernels::conv_transpose2d(&x, &w, None, &spec).unwrap();
    let want = conv_transpose2d_ref(&x, &w, None, &spec);
    assert_eq!(got.shape(), Shape::new(1, 1, 1, 1));
    assert_eq!(got, want);
    assert_relative_eq!(got.item().unwrap(), 1.0);
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let x = randn4(Shape::new(2, 3, 4, 5), 12);
    let w = randn4(Shape::new(3, 2, 3, 3), 13);
    let b = randn4(Shape::chan(2), 14);
    let spec = ConvSpec::new(3, 2, 3)
        .stride(2)
        .padding(1)
        .output_padding(1);
    let got = kernels::conv_transpose2d(&x, &w, Some(&b), &spec).unwrap();
    let want = conv_transpose2d_ref(&x, &w, Some(&b), &spec);
    assert!(max_rel_diff(&got, &want) <= 1e-6);
}

fn inner<E: nl_linknet::tensor::Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// <conv(x, w), y> == <x, conv_transpose(y, w)> for matched specs.
    #[test]
    fn conv_adjointness(
        seed in 0u64..1_000,
        h in 5usize..9,
        w in 5usize..9,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
        ci in 1usize..3,
        co in 1usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(Shape::new(1, ci, h, w), &mut r);
        let wt = Tensor::<f64>::randn(Shape::new(co, ci, k, k), &mut r);
        let spec = ConvSpec::new(ci, co, k).stride(stride).padding(pad).with_bias(false);
        let (oh, ow) = spec.conv_output(h, w).unwrap();
        let y = Tensor::<f64>::randn(Shape::new(1, co, oh, ow), &mut r);

        let fwd = kernels::conv2d(&x, &wt, None, &spec).unwrap();
        // Transposed direction maps y back to x's extent; output padding
        // recovers sizes that the strided forward floor-divided away.
        let opad_h = h - ((oh - 1) * stride + k - 2 * pad);
        let opad_w = w - ((ow - 1) * stride + k - 2 * pad);
        prop_assume!(opad_h == opad_w && opad_h < stride);
        let tspec = ConvSpec::new(co, ci, k)
            .stride(stride)
            .padding(pad)
            .output_padding(opad_h)
            .with_bias(false);
        let back = kernels::conv_transpose2d(&y, &wt, None, &tspec).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = inner(&fwd, &y);
        let rhs = inner(&x, &back);
        let denom = lhs.abs().max(rhs.abs()).max(1.0);
        prop_assert!(((lhs - rhs) / denom).abs() <= 1e-6);
    }
}

// ---------------------------------------------------------------------------
// maxpool
// ---------------------------------------------------------------------------

#[test]
fn maxpool_constant_input_constant_output() {
    let x = Tensor::full(Shape::new(1, 2, 6, 6), 3.5f64);
    let spec = PoolSpec::new(3, 2, 1);
    let y = kernels::maxpool2d(&x, &spec).unwrap().output;
    assert!(y.data().iter().all(|&v| v == 3.5));
}

#[test]
fn maxpool_2x2_picks_maximum() {
    let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = kernels::maxpool2d(&x, &PoolSpec::new(2, 2, 0)).unwrap().output;
    assert_eq!(y.shape(), Shape::scalar());
    assert_relative_eq!(y.item().unwrap(), 4.0);
}

#[test]
fn maxpool_matches_loop_oracle() {
    let x = randn4(Shape::new(2, 3, 7, 9), 15);
    for spec in [PoolSpec::new(2, 2, 0), PoolSpec::new(3, 2, 1)] {
        let got = kernels::maxpool2d(&x, &spec).unwrap().output;
        let want = maxpool2d_ref(&x, &spec);
        assert_eq!(got, want);
    }
}

#[test]
fn maxpool_rejects_oversized_window() {
    let x = randn4(Shape::new(1, 1, 4, 4), 16);
    assert!(matches!(
        kernels::maxpool2d(&x, &PoolSpec::new(7, 1, 1)),
        Err(Error::Config(_))
    ));
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

fn bn_fixture(c: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let gamma = Tensor::full(Shape::chan(c), 1.0);
    let beta = Tensor::zeros(Shape::chan(c));
    let rm = Tensor::zeros(Shape::chan(c));
    let rv = Tensor::full(Shape::chan(c), 1.0);
    (gamma, beta, rm, rv)
}

#[test]
fn batchnorm_train_normalizes_each_channel() {
    let x = randn4(Shape::new(4, 3, 8, 8), 17);
    let (gamma, beta, rm, rv) = bn_fixture(3);
    let out = kernels::batchnorm2d_train(&x, &gamma, &beta, &rm, &rv, 1e-5, 0.1)
        .unwrap()
        .output;
    // recompute statistics directly per channel
    let s = out.shape();
    let count = (s.batch() * s.height() * s.width()) as f64;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for b in 0..s.batch() {
            for h in 0..s.height() {
                for w in 0..s.width() {
                    let v = out.at(b, c, h, w);
                    sum += v;
                    sq += v * v;
                }
            }
        }
        let mean = sum / count;
        let var = sq / count - mean * mean;
        assert!(mean.abs() <= 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_gamma_zero_yields_beta() {
    let x = randn4(Shape::new(2, 2, 4, 4), 18);
    let gamma = Tensor::zeros(Shape::chan(2));
    let beta = Tensor::new(Shape::chan(2), vec![0.25, -1.5]).unwrap();
    let (_, _, rm, rv) = bn_fixture(2);
    let out = kernels::batchnorm2d_train(&x, &gamma, &beta, &rm, &rv, 1e-5, 0.1)
        .unwrap()
        .output;
    for b in 0..2 {
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(out.at(b, c, h, w), beta.data()[c]);
                }
            }
        }
    }
}

#[test]
fn batchnorm_already_normalized_input_is_preserved() {
    // build an exactly zero-mean unit-variance channel
    let vals = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
    let x = Tensor::new(Shape::new(2, 1, 2, 2), vals).unwrap();
    let (gamma, beta, rm, rv) = bn_fixture(1);
    let out = kernels::batchnorm2d_train(&x, &gamma, &beta, &rm, &rv, 1e-5, 0.1)
        .unwrap()
        .output;
    assert!(max_abs_diff(&x, &out) <= 1e-5);
}

#[test]
fn batchnorm_rejects_empty_reduction() {
    let x = Tensor::<f64>::zeros(Shape::new(0, 2, 4, 4));
    let (gamma, beta, rm, rv) = bn_fixture(2);
    assert!(matches!(
        kernels::batchnorm2d_train(&x, &gamma, &beta, &rm, &rv, 1e-5, 0.1),
        Err(Error::Config(_))
    ));
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

#[test]
fn softmax_uniform_rows() {
    let x = Tensor::full(Shape::new(1, 1, 2, 5), 0.7f64);
    let y = kernels::softmax(&x, 3).unwrap();
    for &v in y.data() {
        assert_relative_eq!(v, 0.2, max_relative = 1e-12);
    }
}

#[test]
fn softmax_survives_huge_logit() {
    let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4));
    x.data_mut()[2] = 1e4;
    let y = kernels::softmax(&x, 3).unwrap();
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert_relative_eq!(y.data()[2], 1.0, epsilon = 1e-12);
}

#[test]
fn softmax_matches_naive_oracle() {
    for axis in 0..4 {
        let x = randn4(Shape::new(2, 3, 4, 5), 19 + axis as u64);
        let got = kernels::softmax(&x, axis).unwrap();
        let want = softmax_ref(&x, axis);
        assert!(max_abs_diff(&got, &want) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..10_000, scale in 1.0f64..1e4) {
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 3, 7), &mut rng(seed)).map(|v| v * scale);
        let y = kernels::softmax(&x, 3).unwrap();
        for r in 0..3 {
            let sum: f64 = (0..7).map(|k| y.at(0, 0, r, k)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
}

// ---------------------------------------------------------------------------
// batched matmul
// ---------------------------------------------------------------------------

#[test]
fn matmul_identity() {
    let m = randn4(Shape::new(1, 1, 3, 3), 20);
    let mut eye = Tensor::zeros(Shape::new(1, 1, 3, 3));
    for i in 0..3 {
        eye.set(0, 0, i, i, 1.0);
    }
    let y = kernels::batched_matmul(&eye, &m).unwrap();
    assert_eq!(y, m);
}

#[test]
fn matmul_1x1() {
    let a = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
    let b = Tensor::new(Shape::new(1, 1, 1, 1), vec![-2.0]).unwrap();
    let y = kernels::batched_matmul(&a, &b).unwrap();
    assert_relative_eq!(y.item().unwrap(), -6.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn4(Shape::new(2, 2, 3, 4), 21);
    let b = randn4(Shape::new(2, 2, 4, 2), 22);
    let got = kernels::batched_matmul(&a, &b).unwrap();
    let want = batched_matmul_ref(&a, &b);
    assert!(max_rel_diff(&got, &want) <= 1e-6);
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let a = randn4(Shape::new(1, 1, 3, 4), 23);
    let b = randn4(Shape::new(1, 1, 3, 4), 24);
    assert!(matches!(
        kernels::batched_matmul(&a, &b),
        Err(Error::Shape(_))
    ));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#[test]
fn relu_and_sigmoid_points() {
    let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
    let r = kernels::relu(&x);
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    let s = kernels::sigmoid(&Tensor::scalar(0.0f64));
    assert_relative_eq!(s.item().unwrap(), 0.5);
}

// ---------------------------------------------------------------------------
// backward / tape semantics
// ---------------------------------------------------------------------------

#[test]
fn backward_of_identity_is_one() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.5f64), true);
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    assert_relative_eq!(tape.grad(x).unwrap().item().unwrap(), 1.0);
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let x0 = randn4(Shape::new(1, 2, 3, 3), 25);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum(sq).unwrap();
    tape.backward(y).unwrap();
    let g = tape.grad(x).unwrap();
    let want = x0.map(|v| 2.0 * v);
    assert!(max_abs_diff(g, &want) <= 1e-12);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn4(Shape::new(1, 1, 2, 2), 26), true);
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0f64), true);
    let y = tape.sum(x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn add_gradient_is_one_for_both_sides() {
    let report = grad_check(
        |tape, vars| {
            let s = tape.add(vars[0], vars[1])?;
            tape.sum(s)
        },
        &[
            randn4(Shape::new(1, 2, 2, 2), 27),
            randn4(Shape::new(1, 2, 2, 2), 28),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

// ---------------------------------------------------------------------------
// gradient checks per op
// ---------------------------------------------------------------------------

/// Contract the op output with a fixed random tensor so the scalar loss
/// exercises every output coordinate with distinct weights.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> nl_linknet::Result<Var> {
    let r = Tensor::randn(tape.shape(out), &mut rng(seed));
    let rv = tape.leaf(r, false);
    let prod = tape.mul(out, rv)?;
    tape.sum(prod)
}

#[test]
fn gradcheck_linear_is_near_exact() {
    let report = grad_check(
        |tape, vars| weighted_sum(tape, vars[0], 100),
        &[randn4(Shape::new(1, 2, 3, 3), 29)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-8, "{}", report.summary());
}

#[test]
fn gradcheck_conv2d() {
    let spec = ConvSpec::new(3, 4, 3).stride(2).padding(1);
    let report = grad_check(
        |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), spec)?;
            weighted_sum(tape, y, 101)
        },
        &[
            randn4(Shape::new(2, 3, 6, 5), 30),
            randn4(Shape::new(4, 3, 3, 3), 31),
            randn4(Shape::chan(4), 32),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_conv_transpose2d() {
    let spec = ConvSpec::new(3, 2, 3).stride(2).padding(1).output_padding(1);
    let report = grad_check(
        |tape, vars| {
            let y = tape.conv_transpose2d(vars[0], vars[1], Some(vars[2]), spec)?;
            weighted_sum(tape, y, 102)
        },
        &[
            randn4(Shape::new(2, 3, 4, 4), 33),
            randn4(Shape::new(3, 2, 3, 3), 34),
            randn4(Shape::chan(2), 35),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_maxpool() {
    let report = grad_check(
        |tape, vars| {
            let y = tape.maxpool2d(vars[0], PoolSpec::new(3, 2, 1))?;
            weighted_sum(tape, y, 103)
        },
        &[randn4(Shape::new(1, 2, 6, 6), 36)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_batchnorm_train() {
    let rm = Tensor::zeros(Shape::chan(3));
    let rv = Tensor::full(Shape::chan(3), 1.0);
    let report = grad_check(
        |tape, vars| {
            let (y, _, _) =
                tape.batchnorm2d_train(vars[0], vars[1], vars[2], &rm, &rv, 1e-5, 0.1)?;
            weighted_sum(tape, y, 104)
        },
        &[
            randn4(Shape::new(2, 3, 4, 4), 37),
            randn4(Shape::chan(3), 38).map(|v| 1.0 + 0.1 * v),
            randn4(Shape::chan(3), 39),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_batchnorm_eval() {
    let rm = randn4(Shape::chan(3), 40);
    let rv = randn4(Shape::chan(3), 41).map(|v| 1.0 + 0.25 * v * v);
    let report = grad_check(
        |tape, vars| {
            let y = tape.batchnorm2d_eval(vars[0], vars[1], vars[2], &rm, &rv, 1e-5)?;
            weighted_sum(tape, y, 105)
        },
        &[
            randn4(Shape::new(2, 3, 4, 4), 42),
            randn4(Shape::chan(3), 43),
            randn4(Shape::chan(3), 44),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_softmax_matmul_and_pointwise() {
    let report = grad_check(
        |tape, vars| {
            let scores = tape.batched_matmul(vars[0], vars[1])?;
            let att = tape.softmax(scores, 3)?;
            let z = tape.batched_matmul(att, vars[2])?;
            let act = tape.sigmoid(z)?;
            let act = tape.relu(act)?;
            let scaled = tape.scale(act, 1.75)?;
            weighted_sum(tape, scaled, 106)
        },
        &[
            randn4(Shape::new(1, 1, 4, 3), 45),
            randn4(Shape::new(1, 1, 3, 4), 46),
            randn4(Shape::new(1, 1, 4, 2), 47),
        ],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn gradcheck_positions_roundtrip_ops() {
    let report = grad_check(
        |tape, vars| {
            let m = tape.to_positions(vars[0])?;
            let t = tape.transpose_mat(m)?;
            let grams = tape.batched_matmul(m, t)?;
            weighted_sum(tape, grams, 107)
        },
        &[randn4(Shape::new(2, 3, 2, 2), 48)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

// ---------------------------------------------------------------------------
// layout ops & determinism
// ---------------------------------------------------------------------------

#[test]
fn positions_matrix_roundtrip_is_lossless() {
    let x = randn4(Shape::new(2, 5, 3, 4), 49);
    let m = kernels::nchw_to_positions(&x);
    assert_eq!(m.shape(), Shape::new(2, 1, 12, 5));
    let back = kernels::positions_to_nchw(&m, 5, 3, 4);
    assert_eq!(x, back);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let x = randn4(Shape::new(2, 3, 16, 16), 50);
    let w = randn4(Shape::new(4, 3, 3, 3), 51);
    let spec = ConvSpec::new(3, 4, 3).padding(1).with_bias(false);

    nl_linknet::exec::set_parallel(true);
    let a = kernels::conv2d(&x, &w, None, &spec).unwrap();
    nl_linknet::exec::set_parallel(false);
    let b = kernels::conv2d(&x, &w, None, &spec).unwrap();
    nl_linknet::exec::set_parallel(true);
    assert_eq!(a, b);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let run = || {
        let x = randn4(Shape::new(1, 2, 8, 8), 52);
        let w = randn4(Shape::new(2, 2, 3, 3), 53);
        let spec = ConvSpec::new(2, 2, 3).padding(1).with_bias(false);
        kernels::conv2d(&x, &w, None, &spec).unwrap()
    };
    assert_eq!(run(), run());
}
