//! Unperturbed separatrix geometry for the pendulum factor and the classical
//! auxiliary functions `mu`, `kappa`, `chi` entering the separatrix map.
//!
//! The pendulum `p^2/2 + cos q - 1` has a figure-eight separatrix through the
//! saddle `(p, q) = (0, 0) mod 2pi`; the two loops are selected by a sign
//! `sigma`. Everything here is closed form or a rapidly convergent quadrature.

use crate::hamiltonian::{
    frequency_nu, saddle_linearization, wrap_angle, ModelError, PhasePoint,
};
use crate::quad;
use serde::{Deserialize, Serialize};
#[allow(unused_imports)]
use std::f64::consts::PI;

/// Loop selector for the two separatrix branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeparatrixBranch {
    /// `sigma = +1`: upper loop (p > 0).
    Plus,
    /// `sigma = -1`: lower loop (p < 0).
    Minus,
}

impl SeparatrixBranch {
    pub fn sign(self) -> f64 {
        match self {
            SeparatrixBranch::Plus => 1.0,
            SeparatrixBranch::Minus => -1.0,
        }
    }

    pub fn from_sign(s: f64) -> Self {
        if s >= 0.0 {
            SeparatrixBranch::Plus
        } else {
            SeparatrixBranch::Minus
        }
    }
}

impl std::fmt::Display for SeparatrixBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeparatrixBranch::Plus => write!(f, "+"),
            SeparatrixBranch::Minus => write!(f, "-"),
        }
    }
}

/// A point on a time-parametrized separatrix branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparatrixPoint {
    pub tau: f64,
    pub p: f64,
    pub q: f64,
}

/// `(p, q) = (2 sigma / cosh tau, 4 arctan(e^{sigma tau}))`.
pub fn pendulum_separatrix(sigma: SeparatrixBranch, tau: f64) -> (f64, f64) {
    let s = sigma.sign();
    let p = 2.0 * s / tau.cosh();
    let q = 4.0 * (s * tau).exp().atan();
    (p, q)
}

/// The separatrix angle measured relative to the saddle lift it approaches,
/// i.e. `q mod 2pi` mapped into `(-pi, pi]`, computed without cancellation
/// for large `|tau|`: `q_rel = sign(sigma tau) * (pi - ...)` collapses to
/// `4 arctan(e^{-|sigma tau|})` on the incoming side and its negative on the
/// outgoing side.
pub fn separatrix_q_rel(sigma: SeparatrixBranch, tau: f64) -> f64 {
    let st = sigma.sign() * tau;
    if st >= 0.0 {
        // q = 2pi - 4 arctan(e^{-st})
        -4.0 * (-st).exp().atan()
    } else {
        4.0 * st.exp().atan()
    }
}

/// Lifted unperturbed orbit `Gamma_sigma(I, xi, tau) = (I, xi + I tau, p(tau), q(tau))`
/// with the clock coordinate set to zero.
pub fn gamma_full(action: f64, xi: f64, tau: f64, sigma: SeparatrixBranch) -> PhasePoint {
    let (p, q) = pendulum_separatrix(sigma, tau);
    PhasePoint {
        action,
        phi: wrap_angle(xi + action * tau),
        p,
        q,
        t: 0.0,
    }
}

/// Integrand of `mu` and `chi`: `-nu(I) + d_I H0(I, gamma(I, t))`. The Arnold
/// base Hamiltonian has an uncoupled pendulum factor, so this vanishes
/// identically; the quadrature path is kept for the general contract.
pub fn mu_integrand(action: f64, _sigma: SeparatrixBranch, _t: f64) -> f64 {
    // d_I H0 = I, nu(I) = I.
    action - frequency_nu(action)
}

/// Tail-truncation half-width for the mu/chi quadratures; the integrands of
/// interest decay like `e^{-t}`.
const TAIL_T: f64 = 30.0;

/// `mu(I, sigma)`: total integral of the `mu` integrand over the real line.
pub fn mu(action: f64, sigma: SeparatrixBranch) -> f64 {
    quad::integrate(|t| mu_integrand(action, sigma, t), -TAIL_T, TAIL_T, 1e-12)
        .map(|r| r.value)
        .unwrap_or(0.0)
}

/// `chi(I, sigma, tau)`: cumulative integral of the `mu` integrand from
/// `-infinity` to `tau`, normalized by `chi -> 0` as `tau -> -infinity`.
pub fn chi(action: f64, sigma: SeparatrixBranch, tau: f64) -> f64 {
    let lo = (-TAIL_T).min(tau - 1.0);
    quad::integrate(|t| mu_integrand(action, sigma, t), lo, tau, 1e-12)
        .map(|r| r.value)
        .unwrap_or(0.0)
}

/// Evaluates the gluing-constant expression
/// `<a_+, gamma(-t)> <a_-, gamma(t)> e^{2 lambda t}` at time `t`, with the
/// pendulum coordinates taken relative to the saddle lift each asymptotic end
/// approaches.
fn kappa_expression(action: f64, sigma: SeparatrixBranch, t: f64) -> Result<f64, ModelError> {
    let saddle = saddle_linearization(action)?;
    let eval = |tau: f64, a: &[f64; 2]| -> f64 {
        let (p, _) = pendulum_separatrix(sigma, tau);
        let q_rel = separatrix_q_rel(sigma, tau);
        a[0] * p + a[1] * q_rel
    };
    let incoming = eval(-t, &saddle.a_plus);
    let outgoing = eval(t, &saddle.a_minus);
    Ok(incoming * outgoing * (2.0 * saddle.lambda * t).exp())
}

/// Gluing constant `kappa(I, sigma) = 1 / |lim_{t->inf} <a_+, gamma(-t)>
/// <a_-, gamma(t)> e^{2 lambda t}|`. For the pendulum the limit is `-32`,
/// so `kappa = 1/32`.
pub fn kappa(action: f64, sigma: SeparatrixBranch) -> Result<f64, ModelError> {
    let at_20 = kappa_expression(action, sigma, 20.0)?;
    let at_30 = kappa_expression(action, sigma, 30.0)?;
    if (at_30 - at_20).abs() > 1e-6 * at_30.abs() {
        return Err(ModelError::NonConvergent {
            what: "kappa limit".into(),
            residual: (at_30 - at_20).abs(),
        });
    }
    Ok(1.0 / at_30.abs())
}

/// Finite-time evaluation of the gluing constant at truncation time `t`;
/// [`kappa`] is its `t -> inf` limit.
pub fn kappa_truncated(
    action: f64,
    sigma: SeparatrixBranch,
    t: f64,
) -> Result<f64, ModelError> {
    Ok(1.0 / kappa_expression(action, sigma, t)?.abs())
}

/// Rows for the `geometry tabulate` CLI output.
pub fn tabulate(
    sigma: SeparatrixBranch,
    tau_start: f64,
    tau_end: f64,
    n: usize,
) -> Vec<(f64, f64, f64, f64)> {
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let tau = tau_start + (tau_end - tau_start) * i as f64 / (n - 1) as f64;
            let (p, q) = pendulum_separatrix(sigma, tau);
            (tau, p, q, chi(0.0, sigma, tau))
        })
        .collect()
}
