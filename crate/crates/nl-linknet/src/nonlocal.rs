//! Non-local attention: every output position is a normalized weighted sum
//! over all input positions, which gives a single layer a global receptive
//! field. Three pairwise similarity functions are supported, and the
//! residual block form can be dropped into a trained network as an exact
//! identity thanks to its zero-initialized output projection.
//!
//! `nonlocal_oracle` is the correctness reference: a literal double loop
//! over position pairs with the normalization written out explicitly. It
//! shares no code with the matrix implementation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, Tensor, Var};

/// Pairwise similarity selector. The normalizer is tied to the kind:
/// the raw dot product divides by the position count, the exponential
/// kinds divide by the row sum (softmax attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairwiseKind {
    DotProduct,
    Gaussian,
    EmbeddedGaussian,
}

impl PairwiseKind {
    /// The Gaussian kind scores raw features and has no query/key embeds.
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, PairwiseKind::Gaussian)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot-product" | "dot" => Ok(PairwiseKind::DotProduct),
            "gaussian" => Ok(PairwiseKind::Gaussian),
            "embedded-gaussian" | "embedded" => Ok(PairwiseKind::EmbeddedGaussian),
            other => Err(Error::Config(format!(
                "unknown pairwise kind '{other}' (expected dot-product, gaussian or embedded-gaussian)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairwiseKind::DotProduct => "dot-product",
            PairwiseKind::Gaussian => "gaussian",
            PairwiseKind::EmbeddedGaussian => "embedded-gaussian",
        }
    }
}

/// A pointwise linear map `W x + b`, stored as a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct LinearEmbed<E: Scalar> {
    /// `(out_channels, in_channels, 1, 1)` convolution weight.
    pub weight: Tensor<E>,
    /// `(1, out_channels, 1, 1)` bias.
    pub bias: Tensor<E>,
}

impl<E: Scalar> LinearEmbed<E> {
    pub fn kaiming<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        LinearEmbed {
            weight: Tensor::kaiming(Shape::new(out_c, in_c, 1, 1), in_c, rng),
            bias: Tensor::zeros(Shape::chan(out_c)),
        }
    }

    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        LinearEmbed {
            weight: Tensor::zeros(Shape::new(out_c, in_c, 1, 1)),
            bias: Tensor::zeros(Shape::chan(out_c)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels()
    }

    /// Evaluate `W x + b` for one feature vector; used by the oracle.
    fn apply_vec(&self, x: &[E]) -> Vec<E> {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let w = self.weight.data();
        let b = self.bias.data();
        (0..co)
            .map(|o| {
                let mut acc = b[o];
                for (i, &xv) in x.iter().enumerate().take(ci) {
                    acc += w[o * ci + i] * xv;
                }
                acc
            })
            .collect()
    }
}

/// Parameters of one non-local block: query/key/value embeddings plus the
/// residual output projection. Query and key are absent for the Gaussian
/// kind.
#[derive(Debug, Clone)]
pub struct NonLocalParams<E: Scalar> {
    pub query: Option<LinearEmbed<E>>,
    pub key: Option<LinearEmbed<E>>,
    pub value: LinearEmbed<E>,
    pub output: LinearEmbed<E>,
}

impl<E: Scalar> NonLocalParams<E> {
    /// Standard construction: inner channels are half the input channels,
    /// the output projection (and its bias) start at exactly zero so the
    /// block is an identity when inserted.
    pub fn init<R: Rng>(c1: usize, kind: PairwiseKind, rng: &mut R) -> Result<Self> {
        if c1 == 0 || c1 % 2 != 0 {
            return Err(Error::Config(format!(
                "non-local block needs an even channel count, got {c1}"
            )));
        }
        let c2 = c1 / 2;
        let (query, key) = if kind.uses_embeddings() {
            (
                Some(LinearEmbed::kaiming(c1, c2, rng)),
                Some(LinearEmbed::kaiming(c1, c2, rng)),
            )
        } else {
            (None, None)
        };
        Ok(NonLocalParams {
            query,
            key,
            value: LinearEmbed::kaiming(c1, c2, rng),
            output: LinearEmbed::zeros(c2, c1),
        })
    }

    /// Assemble from explicit parts; shapes may deviate from the `c2 = c1/2`
    /// convention (hand-built test fixtures use square embeddings).
    pub fn from_parts(
        query: Option<LinearEmbed<E>>,
        key: Option<LinearEmbed<E>>,
        value: LinearEmbed<E>,
        output: LinearEmbed<E>,
    ) -> Result<Self> {
        let p = NonLocalParams {
            query,
            key,
            value,
            output,
        };
        p.validate_shapes()?;
        Ok(p)
    }

    pub fn in_channels(&self) -> usize {
        self.value.in_channels()
    }

    pub fn inner_channels(&self) -> usize {
        self.value.out_channels()
    }

    fn validate_shapes(&self) -> Result<()> {
        let (c1, c2) = (self.in_channels(), self.inner_channels());
        for (name, e) in [("query", &self.query), ("key", &self.key)] {
            if let Some(e) = e {
                if e.in_channels() != c1 || e.out_channels() != c2 {
                    return Err(Error::Config(format!(
                        "{name} embed is {}x{}, expected {c2}x{c1}",
                        e.out_channels(),
                        e.in_channels()
                    )));
                }
            }
        }
        if self.output.in_channels() != c2 || self.output.out_channels() != c1 {
            return Err(Error::Config(format!(
                "output projection is {}x{}, expected {c1}x{c2}",
                self.output.out_channels(),
                self.output.in_channels()
            )));
        }
        Ok(())
    }

    /// Kind/parameter agreement: embeddings exactly when the kind uses them.
    pub fn validate_for(&self, kind: PairwiseKind) -> Result<()> {
        self.validate_shapes()?;
        match (
            kind.uses_embeddings(),
            self.query.is_some(),
            self.key.is_some(),
        ) {
            (true, true, true) | (false, false, false) => Ok(()),
            (false, _, _) => Err(Error::Config(
                "gaussian pairwise function takes no query/key embeddings".into(),
            )),
            _ => Err(Error::Config(format!(
                "{} pairwise function requires query and key embeddings",
                kind.name()
            ))),
        }
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> NonLocalVars {
        let mut embed = |e: &LinearEmbed<E>| {
            (
                tape.leaf(e.weight.clone(), requires_grad),
                tape.leaf(e.bias.clone(), requires_grad),
            )
        };
        NonLocalVars {
            query: self.query.as_ref().map(&mut embed),
            key: self.key.as_ref().map(&mut embed),
            value: embed(&self.value),
            output: embed(&self.output),
        }
    }
}

/// Tape handles for the parameters of one non-local block, wherever they
/// live (standalone params or a model's parameter table).
#[derive(Debug, Clone, Copy)]
pub struct NonLocalVars {
    pub query: Option<(Var, Var)>,
    pub key: Option<(Var, Var)>,
    pub value: (Var, Var),
    pub output: (Var, Var),
}

/// Matrix view of a feature map: `H*W` position rows by channel columns,
/// with enough bookkeeping to reshape back losslessly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlattenedFeatures {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FlattenedFeatures {
    pub fn from_shape(shape: Shape) -> Self {
        FlattenedFeatures {
            batch: shape.batch(),
            channels: shape.channels(),
            height: shape.height(),
            width: shape.width(),
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn flatten<E: Scalar>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        tape.to_positions(x)
    }

    pub fn unflatten<E: Scalar>(&self, tape: &mut Tape<E>, m: Var, channels: usize) -> Result<Var> {
        tape.from_positions(m, channels, self.height, self.width)
    }
}

fn embed_channels<E: Scalar>(tape: &Tape<E>, vars: (Var, Var)) -> (usize, usize) {
    let s = tape.shape(vars.0);
    (s.channels(), s.batch())
}

fn check_op_inputs<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    kind: PairwiseKind,
    vars: &NonLocalVars,
) -> Result<(usize, usize)> {
    match (
        kind.uses_embeddings(),
        vars.query.is_some(),
        vars.key.is_some(),
    ) {
        (true, true, true) | (false, false, false) => {}
        (false, _, _) => {
            return Err(Error::Config(
                "gaussian pairwise function takes no query/key embeddings".into(),
            ))
        }
        _ => {
            return Err(Error::Config(format!(
                "{} pairwise function requires query and key embeddings",
                kind.name()
            )))
        }
    }
    let (c1, c2) = embed_channels(tape, vars.value);
    let xs = tape.shape(x);
    if xs.channels() != c1 {
        return Err(Error::Shape(format!(
            "input has {} channels, non-local parameters expect {c1}",
            xs.channels()
        )));
    }
    if xs.height() * xs.width() == 0 {
        return Err(Error::Config(
            "non-local operation over zero positions".into(),
        ));
    }
    Ok((c1, c2))
}

fn conv1x1<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    vars: (Var, Var),
    in_c: usize,
    out_c: usize,
) -> Result<Var> {
    tape.conv2d(x, vars.0, Some(vars.1), ConvSpec::new(in_c, out_c, 1))
}

/// The non-local operation: per position `i`, a weighted sum over every
/// position `j` of the value features, with weights from the pairwise
/// function normalized per row. Input `(b, c1, h, w)`, output
/// `(b, c2, h, w)`; attention never crosses batch items.
pub fn nonlocal_op<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    kind: PairwiseKind,
    vars: &NonLocalVars,
) -> Result<Var> {
    let (c1, c2) = check_op_inputs(tape, x, kind, vars)?;
    let flat = FlattenedFeatures::from_shape(tape.shape(x));
    let n = flat.positions();

    let values = conv1x1(tape, x, vars.value, c1, c2)?;
    let value_rows = flat.flatten(tape, values)?; // (b, 1, n, c2)

    let scores = match kind {
        PairwiseKind::Gaussian => {
            let rows = flat.flatten(tape, x)?; // (b, 1, n, c1)
            let cols = tape.transpose_mat(rows)?;
            tape.batched_matmul(rows, cols)?
        }
        _ => {
            let q = conv1x1(tape, x, vars.query.expect("checked"), c1, c2)?;
            let k = conv1x1(tape, x, vars.key.expect("checked"), c1, c2)?;
            let q_rows = flat.flatten(tape, q)?;
            let k_rows = flat.flatten(tape, k)?;
            let k_cols = tape.transpose_mat(k_rows)?;
            tape.batched_matmul(q_rows, k_cols)? // (b, 1, n, n)
        }
    };

    let weights = match kind {
        // raw scores divided by the position count
        PairwiseKind::DotProduct => tape.scale(scores, E::from_f64_lossy(1.0 / n as f64))?,
        // exponential kinds: row softmax == exp-then-normalize
        PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => tape.softmax(scores, 3)?,
    };

    let mixed = tape.batched_matmul(weights, value_rows)?; // (b, 1, n, c2)
    flat.unflatten(tape, mixed, c2)
}

/// Residual non-local block: `z = W_z y + b_z + x`, shape preserving.
/// With the mandated zero init of the output projection this is exactly
/// the identity.
pub fn nonlocal_block<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    kind: PairwiseKind,
    vars: &NonLocalVars,
) -> Result<Var> {
    let y = nonlocal_op(tape, x, kind, vars)?;
    let (c2_out, c1_out) = embed_channels(tape, vars.output);
    if c2_out != tape.shape(y).channels() || c1_out != tape.shape(x).channels() {
        return Err(Error::Config(format!(
            "output projection is {c1_out}x{c2_out}, expected {}x{}",
            tape.shape(x).channels(),
            tape.shape(y).channels()
        )));
    }
    let projected = conv1x1(tape, y, vars.output, c2_out, c1_out)?;
    tape.add(projected, x)
}

fn pairwise_eval(
    kind: PairwiseKind,
    params: &NonLocalParams<f64>,
    xi: &[f64],
    xj: &[f64],
) -> f64 {
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    match kind {
        PairwiseKind::DotProduct => {
            let ui = params.query.as_ref().expect("validated").apply_vec(xi);
            let vj = params.key.as_ref().expect("validated").apply_vec(xj);
            dot(&ui, &vj)
        }
        PairwiseKind::EmbeddedGaussian => {
            let ui = params.query.as_ref().expect("validated").apply_vec(xi);
            let vj = params.key.as_ref().expect("validated").apply_vec(xj);
            dot(&ui, &vj).exp()
        }
        PairwiseKind::Gaussian => dot(xi, xj).exp(),
    }
}

/// Literal reference implementation of the non-local operation: a double
/// loop over position pairs with the pairwise function and the
/// normalization constant evaluated explicitly. No matrix products, no
/// softmax shortcut.
pub fn nonlocal_oracle(
    x: &Tensor<f64>,
    kind: PairwiseKind,
    params: &NonLocalParams<f64>,
) -> Result<Tensor<f64>> {
    params.validate_for(kind)?;
    let s = x.shape();
    let (c1, c2) = (params.in_channels(), params.inner_channels());
    if s.channels() != c1 {
        return Err(Error::Shape(format!(
            "input has {} channels, non-local parameters expect {c1}",
            s.channels()
        )));
    }
    let (h, w) = (s.height(), s.width());
    let n = h * w;
    if n == 0 {
        return Err(Error::Config(
            "non-local operation over zero positions".into(),
        ));
    }

    let feature = |b: usize, pos: usize| -> Vec<f64> {
        (0..c1).map(|c| x.at(b, c, pos / w, pos % w)).collect()
    };

    let mut out = Tensor::zeros(Shape::new(s.batch(), c2, h, w));
    for b in 0..s.batch() {
        for i in 0..n {
            let xi = feature(b, i);
            let mut f_row = Vec::with_capacity(n);
            for j in 0..n {
                f_row.push(pairwise_eval(kind, params, &xi, &feature(b, j)));
            }
            let normalizer = match kind {
                PairwiseKind::DotProduct => n as f64,
                PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian => {
                    f_row.iter().sum::<f64>()
                }
            };
            // y_i = (1/C) sum_j f(x_i, x_j) g(x_j)
            let mut yi = vec![0.0; c2];
            for (j, &f) in f_row.iter().enumerate() {
                let gj = params.value.apply_vec(&feature(b, j));
                for (acc, gv) in yi.iter_mut().zip(&gj) {
                    *acc += f * gv;
                }
            }
            for (c, &v) in yi.iter().enumerate() {
                out.set(b, c, i / w, i % w, v / normalizer);
            }
        }
    }
    Ok(out)
}

/// Normalized attention weights `(b, 1, n, n)` for inspection: row `i`
/// holds `f(x_i, .) / C_i`. Uses the oracle's literal evaluation.
pub fn attention_weights(
    x: &Tensor<f64>,
    kind: PairwiseKind,
    params: &NonLocalParams<f64>,
) -> Result<Tensor<f64>> {
    params.validate_for(kind)?;
    let s = x.shape();
    let (h, w) = (s.height(), s.width());
    let n = h * w;
    let c1 = params.in_channels();
    if s.channels() != c1 || n == 0 {
        return Err(Error::Shape(
            "input does not match non-local parameters".into(),
        ));
    }
    let feature = |b: usize, pos: usize| -> Vec<f64> {
        (0..c1).map(|c| x.at(b, c, pos / w, pos % w)).collect()
    };
    let mut out = Tensor::zeros(Shape::new(s.batch(), 1, n, n));
    for b in 0..s.batch() {
        for i in 0..n {
            let xi = feature(b, i);
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                row.push(pairwise_eval(kind, params, &xi, &feature(b, j)));
            }
            let c = match kind {
                PairwiseKind::DotProduct => n as f64,
                _ => row.iter().sum::<f64>(),
            };
            for (j, &f) in row.iter().enumerate() {
                out.set(b, 0, i, j, f / c);
            }
        }
    }
    Ok(out)
}

/// Learnable parameter count of one non-local block at `c1` input
/// channels (weights plus biases of the 1x1 convolutions).
pub fn nlb_param_count(c1: usize, kind: PairwiseKind) -> Result<u64> {
    if c1 == 0 || c1 % 2 != 0 {
        return Err(Error::Config(format!(
            "non-local block needs an even channel count, got {c1}"
        )));
    }
    let c1 = c1 as u64;
    let c2 = c1 / 2;
    Ok(match kind {
        PairwiseKind::DotProduct | PairwiseKind::EmbeddedGaussian => 4 * c1 * c2 + (3 * c2 + c1),
        PairwiseKind::Gaussian => 2 * c1 * c2 + (c2 + c1),
    })
}

/// Run the matrix implementation on plain tensors (no gradients).
pub fn nonlocal_op_tensor<E: Scalar>(
    x: &Tensor<E>,
    kind: PairwiseKind,
    params: &NonLocalParams<E>,
) -> Result<Tensor<E>> {
    params.validate_for(kind)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let vars = params.bind(&mut tape, false);
    let y = nonlocal_op(&mut tape, xv, kind, &vars)?;
    Ok(tape.value(y).clone())
}

/// As [`nonlocal_op_tensor`] but for the full residual block.
pub fn nonlocal_block_tensor<E: Scalar>(
    x: &Tensor<E>,
    kind: PairwiseKind,
    params: &NonLocalParams<E>,
) -> Result<Tensor<E>> {
    params.validate_for(kind)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let vars = params.bind(&mut tape, false);
    let z = nonlocal_block(&mut tape, xv, kind, &vars)?;
    Ok(tape.value(z).clone())
}
