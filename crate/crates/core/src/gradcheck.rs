//! Central finite-difference checks for graph gradients.

use crate::autodiff::{Graph, Mode, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares `d f / d inputs` from [`Graph::backward`] against central
/// differences with step `h`. `f` must build a scalar from the leaves it is
/// given and be deterministic. At most `max_per_input` entries of each input
/// are perturbed, spread evenly.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, max_per_input: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let vars = vals.iter().map(|t| g.leaf(t.clone(), false)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new(Mode::Train);
    let vars = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut vals = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + h;
            let up = eval(&vals)?;
            vals[k].data_mut()[i] = orig - h;
            let down = eval(&vals)?;
            vals[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
