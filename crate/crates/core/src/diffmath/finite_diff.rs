//! Central finite-difference oracle for tape gradients.
//!
//! The numerical side only ever reads forward values, so it stays
//! independent of every backward rule it is used to check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Cap on checked coordinates per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` of the scalar built by `f` against central
/// differences in every input.
pub fn check_gradient<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheck {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &inputs[slot]);
        let n = inputs[slot].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => {
                let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[slot].data()[i];
            work[slot].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[slot].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[slot].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(a, numeric, opts.floor));
            report.coordinates += 1;
        }
    }
    Ok(report)
}
