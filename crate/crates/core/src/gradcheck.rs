//! Central finite-difference gradient checking.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of comparing analytic against numeric gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over every checked element.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheck {
    pub(crate) fn observe(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((input, element));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Folds another report into this one, keeping the worst element.
    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            let checked = self.checked;
            *self = other.clone();
            self.checked += checked;
        } else {
            self.checked += other.checked;
        }
    }
}

/// Fourth-order central difference
/// `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h` that stays on the smooth
/// piece containing the base point.
///
/// `probe(delta)` returns the function value at the offset and the graph's
/// branch signature. While any probe takes a different piecewise branch
/// than `base`, the step shrinks tenfold, at most [`MAX_REFINEMENTS`] times.
pub fn central_difference(mut probe: impl FnMut(f64) -> Result<(f64, u64)>, base: u64, step: f64) -> Result<f64> {
    let mut h = step;
    let mut estimate = 0.0;
    for _ in 0..=MAX_REFINEMENTS {
        let mut same = true;
        let mut at = |delta: f64| -> Result<f64> {
            let (v, sig) = probe(delta)?;
            same &= sig == base;
            Ok(v)
        };
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        estimate = (8.0 * near - far) / (12.0 * h);
        if same {
            break;
        }
        h /= 10.0;
    }
    Ok(estimate)
}

pub const MAX_REFINEMENTS: usize = 3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar-valued composite with respect to every
/// element of every input.
///
/// `f` is evaluated once on a graph whose inputs require gradients and at
/// least `4 · #elements` more times on constant inputs perturbed by `±step`
/// and `±2·step`.
pub fn grad_check<T, F>(mut f: F, inputs: &[Tensor<T>], step: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'g> FnMut(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let (analytic, base) = {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&g, &vars)?;
        let base = g.branch_signature();
        g.backward(loss)?;
        let grads: Vec<Tensor<T>> = vars.iter().map(|v| v.grad().expect("leaf gradient")).collect();
        (grads, base)
    };
    let mut eval = |xs: &[Tensor<T>]| -> Result<(f64, u64)> {
        let g = Graph::new();
        let vars: Vec<Var<'_, T>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let value = loss.value_ref().data()[0].as_f64();
        Ok((value, g.branch_signature()))
    };
    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let base_value = input.data()[e];
            let numeric = central_difference(
                |delta| {
                    work[i].data_mut()[e] = T::from_f64_lossy(base_value.as_f64() + delta);
                    let out = eval(&work);
                    work[i].data_mut()[e] = base_value;
                    out
                },
                base,
                step,
            )?;
            report.observe(i, e, analytic[i].data()[e].as_f64(), numeric);
        }
    }
    Ok(report)
}
