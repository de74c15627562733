//! Non-local operation and block: oracle equivalence, normalization and
//! identity invariants, permutation equivariance, gradient checks.

mod common;

use common::{max_abs_diff, max_rel_diff, rng};
use nl_linknet::nonlocal::{
    attention_weights, nlb_param_count, nonlocal_block, nonlocal_block_tensor, nonlocal_op,
    nonlocal_op_tensor, nonlocal_oracle, LinearEmbed, NonLocalParams, PairwiseKind,
};
use nl_linknet::tensor::{grad_check, GradCheckOptions, Shape, Tape, Tensor, Var};

const ALL_KINDS: [PairwiseKind; 3] = [
    PairwiseKind::DotProduct,
    PairwiseKind::Gaussian,
    PairwiseKind::EmbeddedGaussian,
];

fn params(c1: usize, kind: PairwiseKind, seed: u64) -> NonLocalParams<f64> {
    NonLocalParams::init(c1, kind, &mut rng(seed)).unwrap()
}

/// Params with a non-zero output projection so block tests exercise the
/// full residual path.
fn live_params(c1: usize, kind: PairwiseKind, seed: u64) -> NonLocalParams<f64> {
    let mut p = params(c1, kind, seed);
    let mut r = rng(seed ^ 0xabcd);
    p.output = LinearEmbed::kaiming(p.inner_channels(), c1, &mut r);
    p.output.bias = Tensor::randn(Shape::chan(c1), &mut r);
    p
}

// ---------------------------------------------------------------------------
// trivial cases pinned by hand
// ---------------------------------------------------------------------------

#[test]
fn single_position_returns_value_features() {
    // with one position the normalized weight is 1, so y = g(x)
    for kind in [PairwiseKind::Gaussian, PairwiseKind::EmbeddedGaussian] {
        let p = params(4, kind, 1);
        let x = Tensor::randn(Shape::new(2, 4, 1, 1), &mut rng(2));
        let y = nonlocal_op_tensor(&x, kind, &p).unwrap();
        // g(x) by 1x1 conv semantics
        let mut want = Tensor::zeros(Shape::new(2, 2, 1, 1));
        for b in 0..2 {
            for o in 0..2 {
                let mut acc = p.value.bias.data()[o];
                for i in 0..4 {
                    acc += p.value.weight.at(o, i, 0, 0) * x.at(b, i, 0, 0);
                }
                want.set(b, o, 0, 0, acc);
            }
        }
        assert!(max_abs_diff(&y, &want) <= 1e-12);
        let oracle = nonlocal_oracle(&x, kind, &p).unwrap();
        assert!(max_abs_diff(&oracle, &want) <= 1e-12);
    }
}

#[test]
fn zero_query_gives_uniform_attention() {
    let mut p = params(4, PairwiseKind::EmbeddedGaussian, 3);
    p.query = Some(LinearEmbed::zeros(4, 2));
    let x = Tensor::randn(Shape::new(1, 4, 3, 3), &mut rng(4));
    let y = nonlocal_op_tensor(&x, PairwiseKind::EmbeddedGaussian, &p).unwrap();
    // uniform weights: every position receives the mean of g over positions
    let mut g_mean = vec![0.0f64; 2];
    for h in 0..3 {
        for w in 0..3 {
            for o in 0..2 {
                let mut acc = p.value.bias.data()[o];
                for i in 0..4 {
                    acc += p.value.weight.at(o, i, 0, 0) * x.at(0, i, h, w);
                }
                g_mean[o] += acc / 9.0;
            }
        }
    }
    for h in 0..3 {
        for w in 0..3 {
            for o in 0..2 {
                assert!((y.at(0, o, h, w) - g_mean[o]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn oracle_dot_product_hand_case() {
    // one channel, two positions, identity embeddings: x = (1, 2)
    // y_0 = (1*1*1 + 1*2*2) / 2 = 2.5 ; y_1 = (2*1*1 + 2*2*2) / 2 = 5.0
    let ident = || LinearEmbed {
        weight: Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap(),
        bias: Tensor::zeros(Shape::chan(1)),
    };
    let p = NonLocalParams::from_parts(Some(ident()), Some(ident()), ident(), ident()).unwrap();
    let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
    let y = nonlocal_oracle(&x, PairwiseKind::DotProduct, &p).unwrap();
    assert_eq!(y.data(), &[2.5, 5.0]);
    // matrix path agrees with the hand evaluation
    let y2 = nonlocal_op_tensor(&x, PairwiseKind::DotProduct, &p).unwrap();
    assert!(max_abs_diff(&y, &y2) <= 1e-12);
}

// ---------------------------------------------------------------------------
// oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn op_matches_oracle_on_random_instances() {
    for (i, kind) in ALL_KINDS.iter().enumerate() {
        let p = params(4, *kind, 10 + i as u64);
        let x = Tensor::randn(Shape::new(2, 4, 3, 3), &mut rng(20 + i as u64));
        let got = nonlocal_op_tensor(&x, *kind, &p).unwrap();
        let want = nonlocal_oracle(&x, *kind, &p).unwrap();
        assert!(
            max_rel_diff(&got, &want) <= 1e-10,
            "{} disagrees with oracle",
            kind.name()
        );
    }
}

// ---------------------------------------------------------------------------
// invariants
// ---------------------------------------------------------------------------

#[test]
fn attention_rows_sum_to_one_for_exponential_kinds() {
    for kind in [PairwiseKind::Gaussian, PairwiseKind::EmbeddedGaussian] {
        let p = params(4, kind, 30);
        // include large-magnitude features to stress normalization
        let x = Tensor::randn(Shape::new(1, 4, 4, 4), &mut rng(31)).map(|v| v * 3.0);
        let w = attention_weights(&x, kind, &p).unwrap();
        let n = 16;
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| w.at(0, 0, i, j)).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row {i} sums to {sum}");
        }
    }
}

#[test]
fn permuting_positions_permutes_output_identically() {
    let kind = PairwiseKind::EmbeddedGaussian;
    let p = params(4, kind, 40);
    let x = Tensor::randn(Shape::new(1, 4, 2, 3), &mut rng(41));
    let n = 6;
    // a fixed permutation of the six spatial positions
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let s = t.shape();
        let mut out = Tensor::zeros(s);
        for c in 0..s.channels() {
            for (dst, &src) in perm.iter().enumerate() {
                let v = t.at(0, c, src / s.width(), src % s.width());
                out.set(0, c, dst / s.width(), dst % s.width(), v);
            }
        }
        out
    };
    let y_then_permute = permute(&nonlocal_op_tensor(&x, kind, &p).unwrap());
    let permute_then_y = nonlocal_op_tensor(&permute(&x), kind, &p).unwrap();
    assert!(max_abs_diff(&y_then_permute, &permute_then_y) <= 1e-10);
    let _ = n;
}

#[test]
fn zero_output_projection_makes_block_identity() {
    for kind in ALL_KINDS {
        let p = params(6, kind, 50);
        let x = Tensor::randn(Shape::new(2, 6, 3, 3), &mut rng(51));
        let z = nonlocal_block_tensor(&x, kind, &p).unwrap();
        // bit-exact: 0 * y + 0 + x
        assert_eq!(x.data(), z.data());
    }
}

#[test]
fn all_zero_params_make_block_identity() {
    let p = NonLocalParams::<f64>::from_parts(
        Some(LinearEmbed::zeros(4, 2)),
        Some(LinearEmbed::zeros(4, 2)),
        LinearEmbed::zeros(4, 2),
        LinearEmbed::zeros(2, 4),
    )
    .unwrap();
    let x = Tensor::randn(Shape::new(1, 4, 2, 2), &mut rng(52));
    let z = nonlocal_block_tensor(&x, PairwiseKind::EmbeddedGaussian, &p).unwrap();
    assert_eq!(x.data(), z.data());
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

fn bind_from_slice(
    kind: PairwiseKind,
    vars: &[Var],
) -> nl_linknet::nonlocal::NonLocalVars {
    if kind.uses_embeddings() {
        nl_linknet::nonlocal::NonLocalVars {
            query: Some((vars[1], vars[2])),
            key: Some((vars[3], vars[4])),
            value: (vars[5], vars[6]),
            output: (vars[7], vars[8]),
        }
    } else {
        nl_linknet::nonlocal::NonLocalVars {
            query: None,
            key: None,
            value: (vars[1], vars[2]),
            output: (vars[3], vars[4]),
        }
    }
}

fn param_tensors(p: &NonLocalParams<f64>) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for e in [&p.query, &p.key].into_iter().flatten() {
        v.push(e.weight.clone());
        v.push(e.bias.clone());
    }
    v.push(p.value.weight.clone());
    v.push(p.value.bias.clone());
    v.push(p.output.weight.clone());
    v.push(p.output.bias.clone());
    v
}

#[test]
fn gradcheck_nonlocal_op_all_kinds() {
    for (i, kind) in ALL_KINDS.iter().enumerate() {
        let p = params(4, *kind, 60 + i as u64);
        let x = Tensor::randn(Shape::new(1, 4, 3, 3), &mut rng(70 + i as u64));
        let mut inputs = vec![x];
        inputs.extend(param_tensors(&p));
        let report = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let nv = bind_from_slice(*kind, vars);
                let y = nonlocal_op(tape, vars[0], *kind, &nv)?;
                let r = Tensor::randn(tape.shape(y), &mut rng(80));
                let rv = tape.leaf(r, false);
                let prod = tape.mul(y, rv)?;
                tape.sum(prod)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{}: {}", kind.name(), report.summary());
    }
}

#[test]
fn gradcheck_nonlocal_block_all_kinds() {
    for (i, kind) in ALL_KINDS.iter().enumerate() {
        let p = live_params(4, *kind, 90 + i as u64);
        let x = Tensor::randn(Shape::new(1, 4, 3, 3), &mut rng(100 + i as u64));
        let mut inputs = vec![x];
        inputs.extend(param_tensors(&p));
        let report = grad_check(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let nv = bind_from_slice(*kind, vars);
                let z = nonlocal_block(tape, vars[0], *kind, &nv)?;
                let r = Tensor::randn(tape.shape(z), &mut rng(110));
                let rv = tape.leaf(r, false);
                let prod = tape.mul(z, rv)?;
                tape.sum(prod)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{}: {}", kind.name(), report.summary());
    }
}

// ---------------------------------------------------------------------------
// parameter count cross-check against live parameter tensors
// ---------------------------------------------------------------------------

#[test]
fn formula_matches_actual_tensor_sizes() {
    for kind in ALL_KINDS {
        for c1 in [2usize, 4, 8, 128, 256] {
            let p = params(c1, kind, 120);
            let actual: usize = param_tensors(&p).iter().map(|t| t.numel()).sum();
            assert_eq!(actual as u64, nlb_param_count(c1, kind).unwrap());
        }
    }
}
