//! Central finite-difference verification of tape gradients.
//!
//! Runs in f64 only; single precision drowns the difference quotient in
//! rounding noise.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::data::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Coordinates checked per input tensor (random subsample).
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: 64,
            seed: 0x9d2c_5681,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    /// Index of the tensor in the `inputs` slice.
    pub index: usize,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "gradcheck {}: max relative error {:.3e} (tolerance {:.1e}, {} tensors)",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.per_tensor.len()
        )
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` rebuilds the computation from scratch on every call: it receives a
/// fresh tape plus one leaf per input tensor (all `requires_grad`) and
/// returns the scalar root.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.take_grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_tensor = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0_f64;

    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, opts.max_coords_per_tensor).into_vec()
        };
        let mut worst = 0.0_f64;
        for &ci in &coords {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = rel_error(analytic[ti].data()[ci], numeric);
            worst = worst.max(err);
        }
        max_rel = max_rel.max(worst);
        per_tensor.push(TensorCheck {
            index: ti,
            max_rel_error: worst,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        per_tensor,
        max_rel_error: max_rel,
        passed: max_rel <= opts.tolerance,
        tolerance: opts.tolerance,
    })
}
