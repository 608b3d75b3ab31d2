//! Central finite-difference verification of tape gradients (f64 only).

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per input; `None` probes every element.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_error: f64,
    /// `(input, element)` where `max_error` occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `inputs` against central differences.
///
/// `f` records a one-element loss from the input handles. It is evaluated
/// twice at the unperturbed point; differing values are an error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval_tape = Tape::inference();
    let mut eval = |point: &[Tensor<f64>]| -> Result<f64> {
        eval_tape.reset();
        let vars = point.iter().map(|t| eval_tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut eval_tape, &vars)?;
        Ok(eval_tape.value(loss).item())
    };
    let again = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Nondeterministic {
            first: base,
            second: again,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = inputs.to_vec();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
        passed: true,
    };
    for t in 0..inputs.len() {
        let n = inputs[t].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for e in coords {
            let x0 = inputs[t].data()[e];
            point[t] = perturbed(&inputs[t], e, x0 + opts.eps);
            let plus = eval(&point)?;
            point[t] = perturbed(&inputs[t], e, x0 - opts.eps);
            let minus = eval(&point)?;
            point[t] = inputs[t].clone();

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[t][e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() || err > report.max_error {
                report.max_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some((t, e));
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_error <= opts.tol;
    Ok(report)
}

fn perturbed(t: &Tensor<f64>, e: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[e] = value;
    Tensor::new(t.shape(), data).expect("same shape")
}
