//! Adaptive quadrature on finite intervals, used for the splitting-potential
//! and gluing-constant integrals. All integrands here are smooth with
//! exponential tails, so adaptive Simpson with a generous budget is plenty.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quadrature budget exceeded: error estimate {err:.3e} above target {tol:.3e}")]
    BudgetExceeded { err: f64, tol: f64 },
}

/// Result of an adaptive integration: value and an error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

struct Worker<'a, F> {
    f: &'a F,
    evals: usize,
    budget: usize,
}

impl<F: Fn(f64) -> f64> Worker<'_, F> {
    fn eval(&mut self, x: f64) -> f64 {
        self.evals += 1;
        (self.f)(x)
    }

    /// Recursive Simpson with Richardson error control on [a, b].
    #[allow(clippy::too_many_arguments)]
    fn simpson(
        &mut self,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = self.eval(lm);
        let frm = self.eval(rm);
        let h = b - a;
        let left = h / 12.0 * (fa + 4.0 * flm + fm);
        let right = h / 12.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || self.evals > self.budget || delta.abs() <= 15.0 * tol {
            return (left + right + delta / 15.0, delta.abs() / 15.0);
        }
        let (lv, le) = self.simpson(a, m, fa, flm, fm, left, tol / 2.0, depth - 1);
        let (rv, re) = self.simpson(m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
        (lv + rv, le + re)
    }
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<QuadResult, QuadError> {
    integrate_with_budget(f, a, b, tol, 200_000)
}

pub fn integrate_with_budget<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
    budget: usize,
) -> Result<QuadResult, QuadError> {
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let mut w = Worker {
        f: &f,
        evals: 0,
        budget,
    };
    let fa = w.eval(a);
    let m = 0.5 * (a + b);
    let fm = w.eval(m);
    let fb = w.eval(b);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let (value, error) = w.simpson(a, b, fa, fm, fb, whole, tol, 48);
    if error > tol.max(1e-15) * 10.0 {
        return Err(QuadError::BudgetExceeded { err: error, tol });
    }
    Ok(QuadResult {
        value,
        error,
        evaluations: w.evals,
    })
}

/// Complex-valued variant: integrates real and imaginary parts separately.
pub fn integrate_complex<F: Fn(f64) -> Complex64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<(Complex64, f64), QuadError> {
    let re = integrate(|x| f(x).re, a, b, tol)?;
    let im = integrate(|x| f(x).im, a, b, tol)?;
    Ok((Complex64::new(re.value, im.value), re.error + im.error))
}
