//! The separatrix map in its three asymptotic forms: the first-order
//! implicit (Treschev) form, the refined non-resonant form, and the resonant
//! slow-fast form, together with the zone-dispatching orbit iterator.
//!
//! All three maps act on section coordinates `(eta, xi, h, tau, sigma)`:
//! action, slow angle, energy, section time, and loop selector. The implicit
//! structure (starred variables appearing inside the right-hand sides) is
//! resolved by damped fixed-point iteration; the contraction factor is
//! `O(eps log eps)`.

use crate::geometry::{self, SeparatrixBranch};
use crate::hamiltonian::{energy_e, frequency_nu, wrap_angle, ModelError, ModelSpec};
use crate::melnikov::{
    self, classify_zone, MelnikovError, ResonanceVector, ZoneKind, ZoneLabel,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const FP_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 100;
/// Below this |eta| the resonant B-function switches to its analytic limit.
const ETA_LIMIT: f64 = 1e-6;
const LAMBDA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("|h - E(eta)| = {0:.3e} outside the normal-form neighborhood (bound {1:.3e})")]
    OutOfNeighborhood(f64, f64),
    #[error("no integer tbar satisfies the window c < |w| e^(lambda tbar) < 1/c for |w| = {0:.3e}")]
    NoAdmissibleTime(f64),
    #[error("fixed-point iteration did not converge (residual {0:.3e} after {1} iterations)")]
    NonConvergence(f64, usize),
    #[error("|w| = {w:.3e} outside the regime window ({lo:.3e}, {hi:.3e})")]
    WindowViolation { w: f64, lo: f64, hi: f64 },
    #[error("state with action {0} is in the wrong zone for this map form")]
    WrongZone(f64),
    #[error("slow-fast change undefined for k_phi = 0")]
    ZeroK0,
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Section coordinates of the separatrix map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SepMapState {
    pub eta: f64,
    pub xi: f64,
    pub h: f64,
    pub tau: f64,
    pub sigma: SeparatrixBranch,
}

impl SepMapState {
    pub fn new(eta: f64, xi: f64, h: f64, tau: f64, sigma: SeparatrixBranch) -> Self {
        Self {
            eta,
            xi,
            h,
            tau,
            sigma,
        }
    }
}

/// Solver and regime bookkeeping attached to each map evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapDiagnostics {
    pub w_value: f64,
    pub zone: ZoneLabel,
    pub bar_t: i64,
    pub fixed_point_iters: usize,
    pub residual: f64,
}

/// `w(eta*, h*) = h* - E(eta*)` under the first-order Moser identification
/// `g(r) = r`; the documented model error is `O(w^2)`.
pub fn w_nonres(eta_star: f64, h_star: f64, model: &ModelSpec) -> Result<f64, MapError> {
    let w = h_star - energy_e(eta_star);
    if w.abs() > model.constants.kappa_star {
        return Err(MapError::OutOfNeighborhood(
            w.abs(),
            model.constants.kappa_star,
        ));
    }
    Ok(w)
}

/// `w0(eta*, h*, xi*) = h* - E(eta*) - eps H1bar(eta*, xi*)` with the
/// time-frozen resonant Hamiltonian.
pub fn w0_res(
    eta_star: f64,
    h_star: f64,
    xi_star: f64,
    model: &ModelSpec,
) -> Result<f64, MapError> {
    let w = w_nonres(eta_star, h_star, model)?;
    Ok(w - model.epsilon * melnikov::boldface_h1_frozen(eta_star, xi_star, model)?)
}

fn regime_window(model: &ModelSpec) -> (f64, f64) {
    let c = model.constants.c;
    let eps = model.epsilon;
    (eps.powf(1.0 + model.constants.a) / c, c * eps)
}

fn check_regime(w: f64, model: &ModelSpec) -> Result<(), MapError> {
    if model.epsilon == 0.0 {
        return Ok(());
    }
    let (lo, hi) = regime_window(model);
    if w.abs() <= lo || w.abs() >= hi {
        return Err(MapError::WindowViolation { w: w.abs(), lo, hi });
    }
    Ok(())
}

/// Integers `tbar` satisfying the closed window
/// `c <= |w| e^(lambda tbar) <= 1/c`.
pub fn admissible_bar_ts(w: f64, c: f64) -> Vec<i64> {
    let tol = 1e-12;
    let x = -w.abs().ln() / LAMBDA;
    let mut out = Vec::new();
    let t0 = x.round_ties_even() as i64;
    for t in t0 - 4..=t0 + 4 {
        let v = w.abs() * (LAMBDA * t as f64).exp();
        if v >= c - tol && v <= 1.0 / c + tol {
            out.push(t);
        }
    }
    out
}

/// Picks the return-time integer: the admissible integer nearest to
/// `-log|w| / lambda`, ties toward even. The regime gate
/// `eps^(1+a)/c < |w| < c eps` is enforced when `eps > 0`.
pub fn select_bar_t(w: f64, model: &ModelSpec) -> Result<i64, MapError> {
    if w == 0.0 || !w.is_finite() {
        return Err(MapError::NoAdmissibleTime(w.abs()));
    }
    check_regime(w, model)?;
    select_bar_t_free(w, model)
}

/// [`select_bar_t`] without the regime gate (the admissibility window
/// `c < |w| e^{lambda tbar} < 1/c` is eps-independent and always enforced).
fn select_bar_t_free(w: f64, model: &ModelSpec) -> Result<i64, MapError> {
    if w == 0.0 || !w.is_finite() {
        return Err(MapError::NoAdmissibleTime(w.abs()));
    }
    let x = -w.abs().ln() / LAMBDA;
    let candidates = admissible_bar_ts(w, model.constants.c);
    candidates
        .into_iter()
        .min_by(|&a, &b| {
            let da = (a as f64 - x).abs();
            let db = (b as f64 - x).abs();
            if (da - db).abs() > 1e-12 {
                da.partial_cmp(&db).unwrap()
            } else {
                // Exact tie: prefer the even integer, then the smaller one.
                (a.rem_euclid(2), a).cmp(&(b.rem_euclid(2), b))
            }
        })
        .ok_or(MapError::NoAdmissibleTime(w.abs()))
}

/// `H1bar(I, phi)` and its first partials, from the bump-filtered Fourier
/// table. The action derivative is a centered difference (it includes the
/// bump-weight variation, which has no closed form on the transition band).
struct H1Bar<'a> {
    model: &'a ModelSpec,
}

impl H1Bar<'_> {
    fn eval(&self, action: f64, phi: f64) -> Result<f64, MapError> {
        Ok(melnikov::boldface_h1_frozen(action, phi, self.model)?)
    }

    fn d_phi(&self, action: f64, phi: f64) -> Result<f64, MapError> {
        let table = melnikov::boldface_table(action, self.model)?;
        let mut acc = Complex64::new(0.0, 0.0);
        for (&(k_phi, k_t), &c) in &table.modes {
            acc += c
                * Complex64::new(0.0, k_phi as f64)
                * Complex64::new(0.0, k_phi as f64 * phi + k_t as f64 * 0.0).exp();
        }
        Ok(acc.re)
    }

    fn d_action(&self, action: f64, phi: f64) -> Result<f64, MapError> {
        let h = 1e-6;
        Ok((self.eval(action + h, phi)? - self.eval(action - h, phi)?) / (2.0 * h))
    }
}

fn theta_partials_or_zero(
    eta: f64,
    xi: f64,
    tau: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<(f64, f64, f64), MapError> {
    if model.epsilon == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    Ok(melnikov::theta_partials(eta, xi, tau, sigma, model)?)
}

/// First-order implicit (Treschev) form of the separatrix map. Valid in both
/// zones inside the window `eps^(5/4) |log eps| / c < |w0| <= c eps^(7/8)`.
pub fn map_treschev(
    state: &SepMapState,
    model: &ModelSpec,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    let eps = model.epsilon;
    let h1 = H1Bar { model };
    let mu = geometry::mu(state.eta, state.sigma);
    let kappa = geometry::kappa(state.eta, state.sigma)?;

    // w0 at the entry angle xi + nu(eta*) tau + mu(eta*).
    let w0_at = |eta_star: f64, h_star: f64| -> Result<f64, MapError> {
        let angle = state.xi + frequency_nu(eta_star) * state.tau + mu;
        Ok(w_nonres(eta_star, h_star, model)? - eps * h1.eval(eta_star, angle)?)
    };

    let mut eta_star = state.eta;
    let mut h_star = state.h;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    while iters < MAX_ITERS {
        iters += 1;
        let angle = state.xi + frequency_nu(eta_star) * state.tau + mu;
        let w0 = w0_at(eta_star, h_star)?;
        let log_term = (kappa * w0.abs() / LAMBDA).ln();
        let d_phi = if eps == 0.0 {
            0.0
        } else {
            h1.d_phi(eta_star, angle)?
        };
        let (d_xi_theta, d_tau_theta, _) =
            theta_partials_or_zero(eta_star, state.xi, state.tau, state.sigma, model)?;
        // d_xi w0 = -eps d_phi H1bar; d_tau w0 = -eps nu d_phi H1bar.
        let eta_new = state.eta - eps * d_xi_theta + eps * d_phi * log_term / LAMBDA;
        let h_new =
            state.h - eps * d_tau_theta + eps * frequency_nu(eta_star) * d_phi * log_term / LAMBDA;
        residual = (eta_new - eta_star).abs().max((h_new - h_star).abs());
        eta_star += 0.5 * (eta_new - eta_star);
        h_star += 0.5 * (h_new - h_star);
        if residual < FP_TOL {
            break;
        }
    }
    if residual >= FP_TOL {
        return Err(MapError::NonConvergence(residual, iters));
    }

    let w0 = w0_at(eta_star, h_star)?;
    if eps > 0.0 {
        let c = model.constants.c;
        let lo = eps.powf(1.25) * eps.ln().abs() / c;
        let hi = c * eps.powf(0.875);
        if w0.abs() <= lo || w0.abs() > hi {
            return Err(MapError::WindowViolation { w: w0.abs(), lo, hi });
        }
    }
    let bar_t = nearest_admissible_bar_t(w0, model)?;
    let log_term = (kappa * w0.abs() / LAMBDA).ln();
    let angle = state.xi + frequency_nu(eta_star) * state.tau + mu;
    let (_, _, d_eta_theta) =
        theta_partials_or_zero(eta_star, state.xi, state.tau, state.sigma, model)?;
    // d_eta* w0 = -eta* - eps (d_I + tau d_phi) H1bar.
    let d_eta_w0 = if eps == 0.0 {
        -eta_star
    } else {
        -eta_star
            - eps * (h1.d_action(eta_star, angle)? + state.tau * h1.d_phi(eta_star, angle)?)
    };
    let xi_star = wrap_angle(
        state.xi + mu + eps * d_eta_theta + d_eta_w0 * log_term / LAMBDA,
    );
    let tau_star = state.tau + bar_t as f64 + log_term / LAMBDA;
    let sigma_star = if w0 >= 0.0 {
        state.sigma
    } else {
        SeparatrixBranch::from_sign(-state.sigma.sign())
    };
    Ok((
        SepMapState::new(eta_star, xi_star, h_star, tau_star, sigma_star),
        MapDiagnostics {
            w_value: w0,
            zone: classify_zone(state.eta, model)?,
            bar_t,
            fixed_point_iters: iters,
            residual,
        },
    ))
}

/// `select_bar_t` without the (eps-dependent) regime gate; the Treschev form
/// has its own window.
fn nearest_admissible_bar_t(w: f64, model: &ModelSpec) -> Result<i64, MapError> {
    if w == 0.0 || !w.is_finite() {
        return Err(MapError::NoAdmissibleTime(w.abs()));
    }
    let x = -w.abs().ln() / LAMBDA;
    admissible_bar_ts(w, model.constants.c)
        .into_iter()
        .min_by(|&a, &b| {
            let da = (a as f64 - x).abs();
            let db = (b as f64 - x).abs();
            if (da - db).abs() > 1e-12 {
                da.partial_cmp(&db).unwrap()
            } else {
                (a.rem_euclid(2), a).cmp(&(b.rem_euclid(2), b))
            }
        })
        .ok_or(MapError::NoAdmissibleTime(w.abs()))
}

pub(crate) fn nonresonant_core(
    state: &SepMapState,
    model: &ModelSpec,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    nonresonant_core_with(state, model, true)
}

fn nonresonant_core_with(
    state: &SepMapState,
    model: &ModelSpec,
    gated: bool,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    let eps = model.epsilon;
    // eta* is implicit through Theta(eta*, xi, tau); h* follows explicitly.
    let mut eta_star = state.eta;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    let mut d_tau_theta = 0.0;
    while iters < MAX_ITERS {
        iters += 1;
        let (d_xi, d_tau, _) =
            theta_partials_or_zero(eta_star, state.xi, state.tau, state.sigma, model)?;
        d_tau_theta = d_tau;
        let eta_new = state.eta - eps * d_xi;
        residual = (eta_new - eta_star).abs();
        eta_star += 0.5 * (eta_new - eta_star);
        if residual < FP_TOL {
            break;
        }
    }
    if residual >= FP_TOL {
        return Err(MapError::NonConvergence(residual, iters));
    }
    let h_star = state.h - eps * d_tau_theta;
    let w = w_nonres(eta_star, h_star, model)?;
    if gated {
        check_regime(w, model)?;
    }
    let bar_t = select_bar_t_free(w, model)?;
    let kappa = geometry::kappa(eta_star, state.sigma)?;
    // Truncated gluing phase: (Phi^sigma)'(w) = log kappa + O(w).
    let bracket = w.abs().ln() + kappa.ln();
    let xi_star = wrap_angle(state.xi - eta_star * bracket);
    let tau_star = state.tau + bar_t as f64 + bracket;
    let sigma_star = if w >= 0.0 {
        state.sigma
    } else {
        SeparatrixBranch::from_sign(-state.sigma.sign())
    };
    Ok((
        SepMapState::new(eta_star, xi_star, h_star, tau_star, sigma_star),
        MapDiagnostics {
            w_value: w,
            zone: classify_zone(state.eta, model)?,
            bar_t,
            fixed_point_iters: iters,
            residual,
        },
    ))
}

/// Refined non-resonant form of the separatrix map.
pub fn map_nonresonant(
    state: &SepMapState,
    model: &ModelSpec,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    let zone = classify_zone(state.eta, model)?;
    if !matches!(zone.kind, ZoneKind::NonResonant) {
        return Err(MapError::WrongZone(state.eta));
    }
    nonresonant_core(state, model)
}

/// `B^{eta,sigma}`: the averaged inner-drift correction of the resonant map,
/// with the analytic `eta -> 0` limit.
pub fn b_eta(state: &SepMapState, w0: f64, model: &ModelSpec) -> Result<f64, MapError> {
    let h1 = H1Bar { model };
    let kappa = geometry::kappa(state.eta, state.sigma)?;
    let l = (kappa * w0.abs()).ln();
    // The inner drift acts forward over the transit duration -l > 0, so the
    // slow phase advances to xi - eta l (matching the non-resonant xi*).
    if state.eta.abs() < ETA_LIMIT {
        Ok(h1.d_phi(state.eta, state.xi)? * l)
    } else {
        Ok(
            (h1.eval(state.eta, state.xi)? - h1.eval(state.eta, state.xi - state.eta * l)?)
                / state.eta,
        )
    }
}

/// The general-form counterpart of [`b_eta`] (difference of inner averages
/// at the entry and exit angles), parametrized by `mu` for cross-checks.
pub fn b_eta_general(
    state: &SepMapState,
    w0: f64,
    mu: f64,
    model: &ModelSpec,
) -> Result<f64, MapError> {
    let h1 = H1Bar { model };
    let nu = frequency_nu(state.eta);
    let kappa = geometry::kappa(state.eta, state.sigma)?;
    let l = (kappa * w0.abs() / LAMBDA).ln();
    let a = h1.eval(state.eta, state.xi + nu * state.tau)?;
    let b = h1.eval(state.eta, state.xi)?;
    let c = h1.eval(state.eta, state.xi + nu * state.tau + mu)?;
    let d = h1.eval(state.eta, state.xi - nu / LAMBDA * l + mu)?;
    Ok((-(a - b) + (c - d)) / nu)
}

/// `B^{h,sigma}` with the model's own `mu` (identically zero here).
pub fn b_h(state: &SepMapState, model: &ModelSpec) -> Result<f64, MapError> {
    b_h_with_mu(state, geometry::mu(state.eta, state.sigma), model)
}

/// `B^{h,sigma} = H1bar(eta, xi + nu tau + mu) - H1bar(eta, xi + nu tau)`
/// with an injectable `mu` for testing.
pub fn b_h_with_mu(state: &SepMapState, mu: f64, model: &ModelSpec) -> Result<f64, MapError> {
    let h1 = H1Bar { model };
    let base = state.xi + frequency_nu(state.eta) * state.tau;
    Ok(h1.eval(state.eta, base + mu)? - h1.eval(state.eta, base)?)
}

/// Structural envelope `C (1 + |tau| + |log|kappa w0|| + tbar)` bounding the
/// unmodelled angle corrections `B^{xi,sigma}`, `B^{tau,sigma}`. The map
/// itself uses zero for both; this is remainder accounting only.
pub fn b_angles(
    state: &SepMapState,
    w0: f64,
    bar_t: i64,
    model: &ModelSpec,
) -> Result<(f64, f64), MapError> {
    let kappa = geometry::kappa(state.eta, state.sigma)?;
    let env = 1.0 + state.tau.abs() + (kappa * w0.abs()).ln().abs() + bar_t.max(0) as f64;
    let _ = model;
    Ok((env, env))
}

/// Resonant slow-fast form of the separatrix map. The drift terms carry the
/// signs dictated by the underlying dynamics (`Idot = -eps d_phi H1`), which
/// match the non-resonant form.
pub fn map_resonant(
    state: &SepMapState,
    model: &ModelSpec,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    let zone = classify_zone(state.eta, model)?;
    if !matches!(zone.kind, ZoneKind::Resonant(_)) {
        return Err(MapError::WrongZone(state.eta));
    }
    resonant_core(state, model, zone)
}

pub(crate) fn resonant_core(
    state: &SepMapState,
    model: &ModelSpec,
    zone: ZoneLabel,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    resonant_core_with(state, model, zone, true)
}

fn resonant_core_with(
    state: &SepMapState,
    model: &ModelSpec,
    zone: ZoneLabel,
    gated: bool,
) -> Result<(SepMapState, MapDiagnostics), MapError> {
    let eps = model.epsilon;
    let h1 = H1Bar { model };
    let kappa = geometry::kappa(state.eta, state.sigma)?;
    // Theta partials are evaluated at the unstarred point in this form.
    let (d_xi_theta, d_tau_theta, _) =
        theta_partials_or_zero(state.eta, state.xi, state.tau, state.sigma, model)?;
    let h_star = state.h - eps * d_tau_theta;

    // w0 is implicit: it enters xi* and B, which feed back into it.
    let mut w0 = w_nonres(state.eta, state.h, model)? - eps * h1.eval(state.eta, state.xi)?;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    while iters < MAX_ITERS {
        iters += 1;
        let l = (kappa * w0.abs() / LAMBDA).ln();
        let b = b_eta(state, w0, model)?;
        let eta_trial = state.eta - eps * d_xi_theta + eps * b;
        let xi_trial = state.xi - state.eta * l;
        let w0_new = w_nonres(eta_trial, h_star, model)? - eps * h1.eval(eta_trial, xi_trial)?;
        residual = (w0_new - w0).abs();
        w0 += 0.5 * (w0_new - w0);
        if residual < FP_TOL {
            break;
        }
    }
    if residual >= FP_TOL {
        return Err(MapError::NonConvergence(residual, iters));
    }
    // Rebuild the outputs from the converged w0 (the log makes them sensitive
    // to which iterate they came from).
    let l = (kappa * w0.abs() / LAMBDA).ln();
    let eta_star = state.eta - eps * d_xi_theta + eps * b_eta(state, w0, model)?;
    let xi_star = state.xi - state.eta * l;
    if gated {
        check_regime(w0, model)?;
    }
    let bar_t = nearest_admissible_bar_t(w0, model)?;
    let l = (kappa * w0.abs() / LAMBDA).ln();
    let tau_star = state.tau + bar_t as f64 + l;
    let sigma_star = if w0 >= 0.0 {
        state.sigma
    } else {
        SeparatrixBranch::from_sign(-state.sigma.sign())
    };
    Ok((
        SepMapState::new(eta_star, wrap_angle(xi_star), h_star, tau_star, sigma_star),
        MapDiagnostics {
            w_value: w0,
            zone,
            bar_t,
            fixed_point_iters: iters,
            residual,
        },
    ))
}

/// Symplectic slow-fast change of variables
/// `(I, phi, A, t) -> (J, theta, D, t) = (I/k0, k0 phi + k1 t, A - (k1/k0) I, t)`.
pub fn slow_fast(point: [f64; 4], k: ResonanceVector) -> Result<[f64; 4], MapError> {
    if k.k_phi == 0 {
        return Err(MapError::ZeroK0);
    }
    let (k0, k1) = (k.k_phi as f64, k.k_t as f64);
    let [i, phi, a, t] = point;
    Ok([i / k0, k0 * phi + k1 * t, a - (k1 / k0) * i, t])
}

/// Inverse of [`slow_fast`].
pub fn slow_fast_inv(point: [f64; 4], k: ResonanceVector) -> Result<[f64; 4], MapError> {
    if k.k_phi == 0 {
        return Err(MapError::ZeroK0);
    }
    let (k0, k1) = (k.k_phi as f64, k.k_t as f64);
    let [j, theta, d, t] = point;
    let i = k0 * j;
    Ok([i, (theta - k1 * t) / k0, d + (k1 / k0) * i, t])
}

/// Zone dispatch policy for [`iterate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimePolicy {
    Auto,
    NonResonant,
    Resonant,
}

/// Why an orbit ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OrbitTermination {
    Completed,
    /// The window precondition failed: the orbit left the separatrix
    /// neighborhood and the map is no longer defined there.
    Captured { step: usize, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Orbit {
    pub states: Vec<SepMapState>,
    pub diagnostics: Vec<MapDiagnostics>,
    pub termination: OrbitTermination,
}

/// Applies the map `n` times, dispatching by zone. The section time is
/// rebased modulo pi between steps (every map formula depends on tau only
/// through pi-periodic phases), which keeps the domain condition satisfied
/// along long orbits.
pub fn iterate(
    state: &SepMapState,
    model: &ModelSpec,
    n: usize,
    policy: RegimePolicy,
) -> Result<Orbit, MapError> {
    iterate_with_gate(state, model, n, policy, true)
}

/// Like [`iterate`] but without the theorem's eps-sized regime gate: the map
/// runs as a standalone dynamical system wherever its formulas are defined
/// (`w != 0`). Long exploratory orbits live in the full chaotic collar, so
/// excursions beyond the O(eps) window are part of the dynamics there, not
/// a domain error.
pub fn iterate_ungated(
    state: &SepMapState,
    model: &ModelSpec,
    n: usize,
    policy: RegimePolicy,
) -> Result<Orbit, MapError> {
    iterate_with_gate(state, model, n, policy, false)
}

fn iterate_with_gate(
    state: &SepMapState,
    model: &ModelSpec,
    n: usize,
    policy: RegimePolicy,
    gated: bool,
) -> Result<Orbit, MapError> {
    let mut states = vec![*state];
    let mut diagnostics = Vec::new();
    let mut current = *state;
    for step in 0..n {
        let zone = classify_zone(current.eta, model)?;
        let use_resonant = match policy {
            RegimePolicy::Auto => matches!(zone.kind, ZoneKind::Resonant(_)),
            RegimePolicy::NonResonant => false,
            RegimePolicy::Resonant => true,
        };
        let result = if use_resonant {
            resonant_core_with(&current, model, zone, gated)
        } else {
            nonresonant_core_with(&current, model, gated)
        };
        match result {
            Ok((mut next, diag)) => {
                next.tau = rebase_tau(next.tau);
                states.push(next);
                diagnostics.push(diag);
                current = next;
            }
            Err(
                e @ (MapError::WindowViolation { .. }
                | MapError::NoAdmissibleTime(_)
                | MapError::OutOfNeighborhood(..)),
            ) => {
                return Ok(Orbit {
                    states,
                    diagnostics,
                    termination: OrbitTermination::Captured {
                        step,
                        reason: e.to_string(),
                    },
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Orbit {
        states,
        diagnostics,
        termination: OrbitTermination::Completed,
    })
}

/// Reduces `tau` modulo pi into `(-pi/2, pi/2]`.
pub fn rebase_tau(tau: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut r = tau.rem_euclid(pi);
    if r > pi / 2.0 {
        r -= pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{wrap_angle_pm, RegimeConstants, TrigPerturbation};

    fn model(eps: f64) -> ModelSpec {
        ModelSpec::new(TrigPerturbation::pendulum_times_cos(1, 0, 1.0), eps, (-2.0, 2.0), 0.25)
            .unwrap()
    }

    /// Golden model plus a saddle-surviving harmonic `0.1 cos phi`, which
    /// creates the resonant zone around eta = 0.
    fn resonant_model(eps: f64) -> ModelSpec {
        let mut pert = TrigPerturbation::pendulum_times_cos(1, 0, 1.0);
        pert.add_cos(0, 1, 0, 0.1);
        ModelSpec::new(pert, eps, (-2.0, 2.0), 0.25).unwrap()
    }

    #[test]
    fn w_functions() {
        let m = model(0.001);
        assert_eq!(w_nonres(1.0, 0.5, &m).unwrap(), 0.0);
        assert!((w_nonres(1.0, 0.5 + 1e-3, &m).unwrap() - 1e-3).abs() < 1e-18);
        assert!(w_nonres(1.0, 0.5 - 2e-3, &m).unwrap() < 0.0);
        assert!(matches!(
            w_nonres(0.0, 1.0, &m),
            Err(MapError::OutOfNeighborhood(..))
        ));
        // eps = 0 and non-resonant action: w0 reduces to w.
        let m0 = resonant_model(0.0);
        assert_eq!(
            w0_res(1.0, 0.5 + 1e-3, 0.3, &m0).unwrap(),
            w_nonres(1.0, 0.5 + 1e-3, &m0).unwrap()
        );
        // Non-resonant eta*: H1bar vanishes, so w0 reduces to w even at eps > 0.
        let mr = resonant_model(0.001);
        let v = w0_res(1.5, 1.125 + 1e-3, 0.3, &mr).unwrap();
        assert_eq!(v, w_nonres(1.5, 1.125 + 1e-3, &mr).unwrap());
        // At resonance (I = 0) the surviving harmonic is subtracted.
        let v = w0_res(0.0, 1e-3, 0.3, &mr).unwrap();
        let expected = 1e-3 - 0.001 * 0.1 * 0.3f64.cos();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn bar_t_window_example() {
        // lambda = 1, w = e^-5, window constant e: admissible {4, 5, 6},
        // nearest-integer selection returns 5.
        let mut m = model(0.0);
        m.constants = RegimeConstants {
            c: (1.0f64).exp().recip(),
            a: 0.5,
            kappa_star: 0.45,
        };
        let w = (-5.0f64).exp();
        assert_eq!(admissible_bar_ts(w, m.constants.c), vec![4, 5, 6]);
        assert_eq!(select_bar_t(w, &m).unwrap(), 5);
    }

    #[test]
    fn bar_t_monotone_and_gated() {
        let m = model(1e-3);
        let w = 1e-4;
        let t1 = select_bar_t(w, &m).unwrap();
        let t2 = select_bar_t(w / 2.0, &m).unwrap();
        assert!(t2 >= t1, "{t2} vs {t1}");
        assert!((t2 - t1).unsigned_abs() <= 1);
        // Outside the regime gate (eps^2/c, c eps) = (5e-6, 2e-4): error.
        assert!(matches!(
            select_bar_t(5e-4, &m),
            Err(MapError::WindowViolation { .. })
        ));
        assert!(matches!(
            select_bar_t(1e-6, &m),
            Err(MapError::WindowViolation { .. })
        ));
    }

    #[test]
    fn nonresonant_integrable_shear() {
        let m = model(0.0);
        let (eta, xi, tau) = (0.8, 1.3, 0.2);
        let w = 1e-3;
        let h = energy_e(eta) + w;
        let s = SepMapState::new(eta, xi, h, tau, SeparatrixBranch::Plus);
        let (out, diag) = map_nonresonant(&s, &m).unwrap();
        assert_eq!(out.eta, eta);
        assert_eq!(out.h, h);
        let kappa = 1.0f64 / 32.0;
        let bracket = w.ln() + kappa.ln();
        assert!((out.xi - wrap_angle(xi - eta * bracket)).abs() < 1e-12);
        assert!((out.tau - (tau + diag.bar_t as f64 + bracket)).abs() < 1e-12);
        assert_eq!(out.sigma, SeparatrixBranch::Plus);
        assert!(diag.w_value > 0.0);
    }

    #[test]
    fn treschev_matches_nonresonant_at_eps_zero() {
        let m = model(0.0);
        let (eta, xi, tau) = (0.8, 1.3, 0.2);
        let h = energy_e(eta) + 1e-3;
        let s = SepMapState::new(eta, xi, h, tau, SeparatrixBranch::Plus);
        let (a, _) = map_treschev(&s, &m).unwrap();
        let (b, _) = nonresonant_core(&s, &m).unwrap();
        assert!((a.eta - b.eta).abs() < 1e-14);
        assert!((a.h - b.h).abs() < 1e-14);
        assert!(wrap_angle_pm(a.xi - b.xi).abs() < 1e-12);
        assert!((a.tau - b.tau).abs() < 1e-12);
    }

    #[test]
    fn treschev_window_and_convergence() {
        // Window eps^(5/4)|log eps|/c < |w0| <= c eps^(7/8) needs a larger c
        // at practical eps; c = 0.6 keeps the integer window nonempty too.
        let mut m = model(1e-4);
        m.constants.c = 0.6;
        let eta = 0.8;
        let h = energy_e(eta) + 1.7e-4;
        let s = SepMapState::new(eta, 0.03, h, 0.2, SeparatrixBranch::Plus);
        let (out, diag) = map_treschev(&s, &m).unwrap();
        assert!(diag.residual < FP_TOL);
        assert!(diag.fixed_point_iters < MAX_ITERS);
        // The action kick is O(eps), dominated by d_xi Theta.
        assert!((out.eta - eta).abs() < 10.0 * m.epsilon);
        assert!((out.eta - eta).abs() > 1e-6);
        // Outside the window: error.
        let s_bad = SepMapState::new(eta, 0.03, energy_e(eta) + 0.3, 0.2, SeparatrixBranch::Plus);
        assert!(matches!(
            map_treschev(&s_bad, &m),
            Err(MapError::WindowViolation { .. })
        ));
    }

    #[test]
    fn treschev_no_kick_without_pendulum_coupling() {
        // H1 independent of (p, q): Theta = 0 and w0 loses its xi-dependence
        // at non-resonant eta, so eta* = eta up to solver tolerance.
        let mut pert = TrigPerturbation::new(1);
        pert.add_cos(0, 1, 0, 1.0);
        let mut m = ModelSpec::new(pert, 1e-4, (-2.0, 2.0), 0.25).unwrap();
        m.constants.c = 0.6;
        let eta = 0.8;
        let s = SepMapState::new(eta, 1.3, energy_e(eta) + 1.7e-4, 0.2, SeparatrixBranch::Plus);
        let (out, _) = map_treschev(&s, &m).unwrap();
        assert!((out.eta - eta).abs() < 1e-12, "{}", out.eta - eta);
    }

    #[test]
    fn nonresonant_implicit_residual() {
        let m = model(1e-3);
        let eta = 0.8;
        // Small xi keeps the action kick (and hence the drift of w) inside
        // the regime window.
        let s = SepMapState::new(eta, 0.03, energy_e(eta) + 1e-4, 0.2, SeparatrixBranch::Plus);
        let (out, diag) = map_nonresonant(&s, &m).unwrap();
        // Substituting the solution back must satisfy the defining relation.
        let (d_xi, d_tau, _) =
            melnikov::theta_partials(out.eta, s.xi, s.tau, s.sigma, &m).unwrap();
        assert!((out.eta - (eta - m.epsilon * d_xi)).abs() < 1e-11);
        assert!((out.h - (s.h - m.epsilon * d_tau)).abs() < 1e-11);
        assert!(diag.residual < FP_TOL);
    }

    #[test]
    fn wrong_zone_is_rejected() {
        let m = resonant_model(1e-3);
        // eta = 0.1 lies in the (1,0) resonant zone (beta = 0.25).
        let s = SepMapState::new(0.1, 1.3, energy_e(0.1) + 1e-4, 0.2, SeparatrixBranch::Plus);
        assert!(matches!(map_nonresonant(&s, &m), Err(MapError::WrongZone(_))));
        let s = SepMapState::new(0.8, 1.3, energy_e(0.8) + 1e-4, 0.2, SeparatrixBranch::Plus);
        assert!(matches!(map_resonant(&s, &m), Err(MapError::WrongZone(_))));
    }

    #[test]
    fn resonant_map_basics() {
        let m = resonant_model(1e-3);
        let eta = 0.05; // inside the (1,0) zone
        let s = SepMapState::new(eta, 0.1, energy_e(eta) + 1.9e-4, 0.2, SeparatrixBranch::Plus);
        let (out, diag) = map_resonant(&s, &m).unwrap();
        assert!(diag.residual < FP_TOL);
        // Defining relations hold at the solution.
        let kappa = 1.0 / 32.0;
        let l = (kappa * diag.w_value.abs()).ln();
        let (d_xi, d_tau, _) = melnikov::theta_partials(eta, s.xi, s.tau, s.sigma, &m).unwrap();
        let b = b_eta(&s, diag.w_value, &m).unwrap();
        assert!((out.eta - (eta - m.epsilon * d_xi + m.epsilon * b)).abs() < 1e-11);
        assert!((out.h - (s.h - m.epsilon * d_tau)).abs() < 1e-12);
        assert!(wrap_angle_pm(out.xi - wrap_angle(s.xi - eta * l)).abs() < 1e-10);
        assert!((out.tau - (s.tau + diag.bar_t as f64 + l)).abs() < 1e-10);
        // w0 differs from w by the surviving harmonic 0.1 cos xi*.
        let w = w_nonres(out.eta, out.h, &m).unwrap();
        let h1bar = 0.1 * out.xi.cos() * bump_weight(out.eta, &m);
        assert!((diag.w_value - (w - m.epsilon * h1bar)).abs() < 1e-10);
    }

    fn bump_weight(eta: f64, m: &ModelSpec) -> f64 {
        melnikov::bump_psi(eta / m.beta)
    }

    #[test]
    fn branch_switching_on_negative_w0() {
        let m = model(0.0);
        let eta = 0.8;
        let s = SepMapState::new(eta, 1.3, energy_e(eta) - 1e-3, 0.2, SeparatrixBranch::Plus);
        let (out, diag) = nonresonant_core(&s, &m).unwrap();
        assert!(diag.w_value < 0.0);
        assert_eq!(out.sigma, SeparatrixBranch::Minus);
    }

    #[test]
    fn b_eta_limit_and_general_form() {
        let m = resonant_model(1e-3);
        let w0 = 1e-4;
        // eta -> 0 continuity against the analytic limit.
        let s = SepMapState::new(1e-7, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
        let direct = {
            // Evaluate the difference quotient path just above the switch.
            let s2 = SepMapState::new(2e-6, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
            b_eta(&s2, w0, &m).unwrap()
        };
        let limit = b_eta(&s, w0, &m).unwrap();
        assert!((direct - limit).abs() < 1e-4, "{direct} vs {limit}");

        // General-form cross-check with mu = 0, nu = eta, lambda = 1.
        let s = SepMapState::new(0.05, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
        let a = b_eta(&s, w0, &m).unwrap();
        let b = b_eta_general(&s, w0, 0.0, &m).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");

        // H1bar independent of xi: B = 0. A (0, 1) harmonic at its resonance
        // nu = 0 would need eta = 0; instead check the trivial cancellation
        // directly with a xi-independent table by symmetry: same xi shift.
        // l = ln|kappa w0| with w0 = 32 gives l = 0, so the shift vanishes.
        let s_same = SepMapState::new(0.05, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
        let z = b_eta(&s_same, 32.0, &m);
        assert!(z.unwrap().abs() < 1e-12);
    }

    #[test]
    fn b_h_zero_and_injected_mu() {
        let m = resonant_model(1e-3);
        let s = SepMapState::new(0.05, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
        assert_eq!(b_h(&s, &m).unwrap(), 0.0);
        assert_eq!(b_h_with_mu(&s, 0.0, &m).unwrap(), 0.0);
        // Synthetic mu = pi: brute-force Fourier difference of the surviving
        // 0.1 cos xi harmonic at resonance.
        let mu = std::f64::consts::PI;
        let v = b_h_with_mu(&s, mu, &m).unwrap();
        let base = s.xi + s.eta * s.tau;
        let w = 0.1 * bump_weight(s.eta, &m);
        let expected = w * ((base + mu).cos() - base.cos());
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn b_angles_envelope() {
        let m = resonant_model(1e-3);
        let s = SepMapState::new(0.05, 0.9, 0.0, 0.1, SeparatrixBranch::Plus);
        let (a1, t1) = b_angles(&s, 1e-4, 9, &m).unwrap();
        let (a2, t2) = b_angles(&s, 1e-4, 12, &m).unwrap();
        assert!(a2 > a1 && t2 > t1);
    }

    #[test]
    fn slow_fast_round_trip_and_symplectic() {
        let k = ResonanceVector::new(2, 1);
        let p = [2.0, 0.0, 0.7, std::f64::consts::PI];
        let out = slow_fast(p, k).unwrap();
        assert_eq!(out[0], 1.0);
        assert!((out[1] - std::f64::consts::PI).abs() < 1e-15);
        let back = slow_fast_inv(out, k).unwrap();
        for i in 0..4 {
            assert!((back[i] - p[i]).abs() < 1e-14);
        }
        // k = (1, 0): identity on (I, phi), D = A.
        let k10 = ResonanceVector::new(1, 0);
        let out = slow_fast(p, k10).unwrap();
        assert_eq!(out, p);
        assert!(matches!(
            slow_fast(p, ResonanceVector::new(0, 1)),
            Err(MapError::ZeroK0)
        ));
        // Symplecticity: J^T Omega J = Omega for the 4x4 Jacobian. The map is
        // linear, so columns are images of basis vectors.
        let mut jac = [[0.0f64; 4]; 4];
        for j in 0..4 {
            let mut e = [0.0; 4];
            e[j] = 1.0;
            let img = slow_fast(e, k).unwrap();
            for i in 0..4 {
                jac[i][j] = img[i];
            }
        }
        // Omega pairs (I, phi) and (A, t): Omega = [[0,1,0,0],[-1,0,0,0],...].
        let omega = [
            [0.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0, 0.0],
        ];
        let mut lhs = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        s += jac[a][i] * omega[a][b] * jac[b][j];
                    }
                }
                lhs[i][j] = s;
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert!((lhs[i][j] - omega[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn approximate_symplecticity_of_nonresonant_map() {
        let m = model(1e-3);
        let eta = 0.8;
        let base = SepMapState::new(eta, 0.03, energy_e(eta) + 1e-4, 0.2, SeparatrixBranch::Plus);
        let h = 1e-7;
        let eval = |s: &SepMapState| {
            let (out, _) = nonresonant_core(s, &m).unwrap();
            [out.eta, out.xi, out.h, out.tau]
        };
        let center = eval(&base);
        let mut jac = [[0.0f64; 4]; 4];
        let coords = |s: &SepMapState| [s.eta, s.xi, s.h, s.tau];
        for j in 0..4 {
            let mut sp = base;
            let mut sm = base;
            let mut cp = coords(&base);
            cp[j] += h;
            sp.eta = cp[0];
            sp.xi = cp[1];
            sp.h = cp[2];
            sp.tau = cp[3];
            let mut cm = coords(&base);
            cm[j] -= h;
            sm.eta = cm[0];
            sm.xi = cm[1];
            sm.h = cm[2];
            sm.tau = cm[3];
            let fp = eval(&sp);
            let fm = eval(&sm);
            for i in 0..4 {
                let mut d = fp[i] - fm[i];
                if i == 1 {
                    d = wrap_angle_pm(d);
                }
                jac[i][j] = d / (2.0 * h);
            }
        }
        let _ = center;
        // det via explicit 4x4 cofactor expansion.
        let det = det4(&jac);
        assert!((det - 1.0).abs() < 5e-3, "det = {det}");
    }

    fn det4(m: &[[f64; 4]; 4]) -> f64 {
        let det3 = |a: [[f64; 3]; 3]| -> f64 {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        let minor = |row: usize, col: usize| -> [[f64; 3]; 3] {
            let mut out = [[0.0; 3]; 3];
            let mut r = 0;
            for i in 0..4 {
                if i == row {
                    continue;
                }
                let mut c = 0;
                for j in 0..4 {
                    if j == col {
                        continue;
                    }
                    out[r][c] = m[i][j];
                    c += 1;
                }
                r += 1;
            }
            out
        };
        (0..4).fold(0.0, |acc, j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            acc + sign * m[0][j] * det3(minor(0, j))
        })
    }

    #[test]
    fn zone_boundary_coherence() {
        // In the overlap band beta/2 < |divisor| < beta the two refined forms
        // agree on (eta*, h*) to O(eps).
        let m = resonant_model(1e-3);
        let eta = 0.2; // divisor 0.2 in (0.125, 0.25)
        let s = SepMapState::new(eta, 0.1, energy_e(eta) + 1e-4, 0.2, SeparatrixBranch::Plus);
        let zone = classify_zone(eta, &m).unwrap();
        assert!(matches!(zone.kind, ZoneKind::Resonant(_)));
        let (a, _) = resonant_core(&s, &m, zone).unwrap();
        let (b, _) = nonresonant_core(&s, &m).unwrap();
        assert!((a.eta - b.eta).abs() < 5.0 * m.epsilon, "{}", a.eta - b.eta);
        assert!((a.h - b.h).abs() < 5.0 * m.epsilon);
    }

    #[test]
    fn iterate_basics() {
        let m = model(0.0);
        let eta = 0.8;
        let s = SepMapState::new(eta, 1.3, energy_e(eta) + 1e-3, 0.2, SeparatrixBranch::Plus);
        let orbit = iterate(&s, &m, 0, RegimePolicy::Auto).unwrap();
        assert_eq!(orbit.states.len(), 1);
        assert_eq!(orbit.termination, OrbitTermination::Completed);

        let orbit = iterate(&s, &m, 25, RegimePolicy::Auto).unwrap();
        assert_eq!(orbit.states.len(), 26);
        for st in &orbit.states {
            assert!((st.eta - eta).abs() < 1e-12);
            assert!((st.h - s.h).abs() < 1e-12);
            assert!(st.tau.abs() <= std::f64::consts::PI / 2.0 + 1e-12);
        }
    }

    #[test]
    fn iterate_reports_capture() {
        // A state outside the regime window terminates with Captured.
        let m = model(1e-3);
        let eta = 0.8;
        let s = SepMapState::new(eta, 1.3, energy_e(eta) + 0.05, 0.2, SeparatrixBranch::Plus);
        let orbit = iterate(&s, &m, 5, RegimePolicy::Auto).unwrap();
        assert!(matches!(
            orbit.termination,
            OrbitTermination::Captured { step: 0, .. }
        ));
    }
}
