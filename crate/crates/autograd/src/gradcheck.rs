//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|autodiff - fd| / max(1, |fd|)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a relu/clamp/std-floor kink lies within `2h`.
    pub excluded: Vec<usize>,
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(AutogradError::NonFinite("grad_check function value".into()));
    }
    Ok((value, g.branch_signature()))
}

/// Checks every coordinate of `x`; see [`grad_check_coords`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &all)
}

/// Compares the autodiff gradient of scalar `f` at `x` with central
/// differences of step `h` on the given coordinates.
///
/// A coordinate is excluded when the branch signature of the graph differs
/// between `x - 2h`, `x` and `x + 2h` along it.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutogradError::InvalidArgument {
            op: "grad_check",
            reason: format!("step {} must be positive and finite", h),
        });
    }
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;
    let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    if !analytic.all_finite() {
        return Err(AutogradError::NonFinite("autodiff gradient".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(AutogradError::InvalidArgument {
                op: "grad_check",
                reason: format!("coordinate {} out of range", i),
            });
        }
        let orig = x.data()[i];
        let mut at = |delta: f64| -> Result<(f64, u64)> {
            probe.data_mut()[i] = orig + delta;
            let r = evaluate(&f, &probe);
            probe.data_mut()[i] = orig;
            r
        };
        let (_, sig_lo) = at(-2.0 * h)?;
        let (_, sig_hi) = at(2.0 * h)?;
        if sig_lo != base_sig || sig_hi != base_sig {
            report.excluded.push(i);
            continue;
        }
        let (fp, _) = at(h)?;
        let (fm, _) = at(-h)?;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
