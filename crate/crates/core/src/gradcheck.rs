//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever runs forward passes: each input element is
//! perturbed by `±step` and the projected output `Σ y·r` is differenced. The
//! analytic side backpropagates the same projection `r` through the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor, so inputs with an identically zero gradient (a key bias
/// under softmax, say) compare rounding noise against this rather than itself.
pub const ZERO_GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per input: `max |analytic − numeric| / max |numeric|`.
    pub rel_err: Vec<f64>,
    pub max_abs_err: f64,
    pub evaluations: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Compare tape gradients of `f` at `inputs` against central differences.
///
/// `f` receives one `Var` per input, in order, and may return any shape.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&mut tape, &vars)?.value().clone())
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let projection = random_tensor(out.shape(), seed ^ 0x9e37_79b9, 1.0);
    tape.backward_with_seed(&out, &projection)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop(tape);

    let project = |y: &Tensor<f64>| -> f64 { y.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum() };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut max_abs_err: f64 = 0.0;
    let mut evaluations = 0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = project(&eval(&work)?);
            work[i].data_mut()[j] = orig - step;
            let minus = project(&eval(&work)?);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
            evaluations += 2;
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(ZERO_GRAD_FLOOR);
        let err = analytic[i]
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        max_abs_err = max_abs_err.max(err);
        rel_err.push(err / scale);
    }
    Ok(GradReport {
        rel_err,
        max_abs_err,
        evaluations,
    })
}
