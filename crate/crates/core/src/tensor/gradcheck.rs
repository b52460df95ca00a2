//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{GammaError, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The central difference straddled a ReLU kink and a one-sided
    /// difference on the smooth side was used instead.
    pub one_sided: bool,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub one_sided: usize,
    pub worst: Option<CoordinateError>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    /// Folds another report into this one (max errors, summed counts).
    pub fn merge(&mut self, other: &CheckReport) {
        self.coordinates += other.coordinates;
        self.one_sided += other.one_sided;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.tol = self.tol.min(other.tol);
    }

    pub fn empty(tol: f64) -> Self {
        Self {
            coordinates: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            one_sided: 0,
            worst: None,
            tol,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[coord]` with finite differences of `eval`.
///
/// `eval(coord, delta)` must return the scalar objective with coordinate
/// `coord` shifted by `delta`, along with the kink signature of that
/// evaluation (see [`Tape::kink_signature`]). `base_signature` is the
/// signature at the unperturbed point.
pub fn grad_check_with<E>(
    analytic: &[f64],
    coords: &[usize],
    base_value: f64,
    base_signature: u64,
    opts: GradCheckOptions,
    mut eval: E,
) -> Result<CheckReport>
where
    E: FnMut(usize, f64) -> Result<(f64, u64)>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(GammaError::Domain(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let mut report = CheckReport::empty(opts.tol);
    let finite = |v: f64, what: &str| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GammaError::NumericDomain(format!("objective is {v} at {what}")))
        }
    };
    finite(base_value, "base point")?;
    for &k in coords {
        let (plus, sig_p) = eval(k, opts.eps)?;
        let (minus, sig_m) = eval(k, -opts.eps)?;
        let plus = finite(plus, "x + eps")?;
        let minus = finite(minus, "x - eps")?;
        let (numeric, one_sided) = match (sig_p == base_signature, sig_m == base_signature) {
            (true, true) | (false, false) => ((plus - minus) / (2.0 * opts.eps), false),
            (true, false) => ((plus - base_value) / opts.eps, true),
            (false, true) => ((base_value - minus) / opts.eps, true),
        };
        let a = analytic[k];
        let rel = relative_error(a, numeric);
        report.coordinates += 1;
        report.one_sided += usize::from(one_sided);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordinateError {
                index: k,
                analytic: a,
                numeric,
                rel_error: rel,
                one_sided,
            });
        }
    }
    Ok(report)
}

/// Checks the tape gradient of scalar `f` at `x` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps` on every coordinate.
pub fn grad_check<'p, F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape<'p>, Var) -> Result<Var>,
{
    let (rows, cols) = (x.rows(), x.cols());
    let run = |data: Vec<f64>, grad: bool| -> Result<(Tape<'p>, Var, Var)> {
        let mut tape = Tape::new().tracking_kinks();
        let v = if grad {
            tape.variable(rows, cols, data)?
        } else {
            tape.constant(rows, cols, data)?
        };
        let out = f(&mut tape, v)?;
        if tape.shape(out) != (1, 1) {
            return Err(GammaError::Contract("grad_check needs a scalar-valued function".into()));
        }
        Ok((tape, v, out))
    };

    let (tape, xv, out) = run(x.data().to_vec(), true)?;
    let base = tape.scalar_value(out);
    let sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    drop(tape);

    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_with(&analytic, &coords, base, sig, GradCheckOptions { eps, tol }, |k, delta| {
        let mut data = x.data().to_vec();
        data[k] += delta;
        let (t, _, o) = run(data, false)?;
        Ok((t.scalar_value(o), t.kink_signature()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let r = grad_check(|t, _| t.constant(1, 1, vec![4.0]), &x, 1e-5, 1e-12).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 1e-2, 1e-4).is_err());
    }

    #[test]
    fn non_finite_objective_is_a_numeric_error() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|t, v| Ok(t.scale(v, f64::INFINITY)), &x, 1e-5, 1e-4);
        assert!(matches!(r, Err(GammaError::NumericDomain(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relative error is computed against the true slope, so a bogus
        // analytic value must fail
        let r = grad_check_with(&[5.0], &[0], 1.0, 0, GradCheckOptions::default(), |_, d| {
            Ok((1.0 + 2.0 * d, 0))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn kink_straddle_falls_back_to_one_sided() {
        // relu at x = 2e-6: the central difference spans the kink
        let x = Tensor::scalar(2e-6);
        let r = grad_check(|t, v| Ok(t.relu(v)), &x, 1e-5, 1e-6).unwrap();
        assert_eq!(r.one_sided, 1);
        assert!(r.passed(), "{r:?}");
    }
}
