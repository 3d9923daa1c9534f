//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on absolute error scaled by it,
/// so that round-off in near-zero components cannot dominate the ratio.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat coordinate (across all probed tensors) with the largest relative error.
    pub worst_coordinate: usize,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Check a scalar function of a single tensor.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps, tol)
}

/// Check a scalar function of several tensors, probing every coordinate.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor], coordinate: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::Shape(format!(
                "grad_check needs a scalar function, got {:?}",
                value.shape()
            )));
        }
        let v = value.item();
        if !v.is_finite() {
            return Err(Error::Numeric {
                coordinate,
                message: format!("function value {v}"),
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numeric {
            coordinate: 0,
            message: format!("function value {base} at the probe point"),
        });
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        coordinates: 0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = points.to_vec();
    let mut flat = 0;
    for (pi, (point, var)) in points.iter().zip(&vars).enumerate() {
        let zeros = Tensor::zeros(point.shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for c in 0..point.numel() {
            let x0 = point.data()[c];
            probe[pi].data_mut()[c] = x0 + eps;
            let plus = eval(&probe, flat)?;
            probe[pi].data_mut()[c] = x0 - eps;
            let minus = eval(&probe, flat)?;
            probe[pi].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = flat;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
        let report = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5, 1e-10).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_abs_error < 1e-10);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn(&[4], |i| (i as f64).sin() * 3.0);
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let s = t.softmax(v, 0)?;
            Ok(t.sum(s))
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&mut tape, v).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-8));
        let report = grad_check(f, &x, 1e-5, 1e-4).unwrap();
        assert!(report.max_abs_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_value_reports_coordinate() {
        // blows up once the second coordinate is nudged past 2
        let x = Tensor::vector(vec![0.0, 2.0 - 1e-6]);
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let s = t.sum(v);
            if t.value(v).data()[1] > 2.0 {
                Ok(t.scale(s, f64::NAN))
            } else {
                Ok(s)
            }
        };
        let err = grad_check(f, &x, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Numeric { coordinate: 1, .. }), "{err}");
    }
}
