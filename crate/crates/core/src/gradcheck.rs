//! Central finite-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖numeric‖, ‖analytic‖, floor)` over probed entries.
    pub rel_error: f64,
    pub probed: usize,
    pub max_abs_numeric: f64,
}

/// Compares autograd gradients of the scalar `f` against central finite
/// differences for every input (at most `max_probes` entries per input,
/// spread evenly).
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, max_probes: usize, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.grad(out, &vars, false);
        grads
            .into_iter()
            .zip(inputs)
            .map(|(g, t)| match g {
                Some(g) => g.value().as_ref().clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut diff_sq = 0.0;
    let mut num_sq = 0.0;
    let mut ana_sq = 0.0;
    let mut probed = 0;
    let mut max_abs_numeric: f64 = 0.0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = (n / max_probes.max(1)).max(1);
        for j in (0..n).step_by(step).take(max_probes) {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            diff_sq += (a - numeric).powi(2);
            num_sq += numeric * numeric;
            ana_sq += a * a;
            max_abs_numeric = max_abs_numeric.max(numeric.abs());
            probed += 1;
        }
    }
    let denom = num_sq.sqrt().max(ana_sq.sqrt()).max(1e-12);
    GradCheckReport {
        rel_error: diff_sq.sqrt() / denom,
        probed,
        max_abs_numeric,
    }
}
