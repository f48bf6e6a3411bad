//! Finite-difference oracle for tape gradients.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Tolerances for a single primitive evaluated in f64.
pub const PRIMITIVE_TOL: Tolerance = Tolerance {
    rel: 1e-4,
    abs: 1e-7,
};

/// Tolerances for composite functions (loss heads, renderer).
pub const COMPOSITE_TOL: Tolerance = Tolerance {
    rel: 1e-3,
    abs: 1e-7,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

/// Outcome of comparing an analytic gradient against a numeric one.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|)` and only
/// counts when its absolute error exceeds `abs`; coordinates whose absolute
/// error is below `abs` are treated as agreeing.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat coordinate with the largest counted relative error.
    pub worst: Option<usize>,
    pub coords: usize,
    pub passed: bool,
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = checked(f(&probe)?)?;
        probe[i] = orig - eps;
        let lo = checked(f(&probe)?)?;
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DiffError::NonFiniteFunction { value: v })
    }
}

pub fn compare_gradients(
    op: &str,
    analytic: &[f64],
    numeric: &[f64],
    tol: Tolerance,
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        if abs > tol.abs {
            let rel = abs / a.abs().max(n.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = Some(i);
            }
        }
    }
    GradCheckReport {
        op: op.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst,
        coords: analytic.len(),
        passed: max_rel <= tol.rel || max_abs <= tol.abs,
    }
}

/// Checks the tape gradient of a scalar function of several tensor inputs
/// against central differences over every input coordinate.
///
/// `f` records the function on a fresh tape for each evaluation; it must be
/// deterministic and return a single-element node.
pub fn gradient_check<F>(
    op: &str,
    f: F,
    inputs: &[Tensor<f64>],
    tol: Tolerance,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(x.numel())),
        }
    }

    let flat: Vec<f64> = inputs.iter().flat_map(|x| x.data().iter().copied()).collect();
    let eval = |p: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let mut off = 0;
        let mut vars = Vec::with_capacity(inputs.len());
        for x in inputs {
            let n = x.numel();
            vars.push(tape.input(Tensor::new(x.shape().to_vec(), p[off..off + n].to_vec())?));
            off += n;
        }
        let r = f(&tape, &vars)?;
        Ok(tape.item(r))
    };
    let numeric = finite_difference_gradient(eval, &flat, FD_EPS)?;
    Ok(compare_gradients(op, &analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_cubic() {
        let g = finite_difference_gradient(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[2.0, 5.0], 1e-5)
            .unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn compare_flags_a_wrong_gradient() {
        let r = compare_gradients("fixture", &[1.0, 2.0], &[1.0, 2.1], PRIMITIVE_TOL);
        assert!(!r.passed);
        assert_eq!(r.worst, Some(1));
        let ok = compare_gradients("fixture", &[1e-9, 2.0], &[0.0, 2.0], PRIMITIVE_TOL);
        assert!(ok.passed);
    }

    #[test]
    fn non_finite_function_is_reported() {
        let e = finite_difference_gradient(|_| Ok(f64::NAN), &[0.0], 1e-5);
        assert!(matches!(e, Err(DiffError::NonFiniteFunction { .. })));
    }
}
