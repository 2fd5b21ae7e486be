//! Resonance bookkeeping, bump-filtered resonant Hamiltonians, the averaging
//! operator `d^{-1}`, and quadrature evaluation of the splitting potentials
//! `Theta_sigma`.
//!
//! The splitting potential of the rotor-pendulum family is
//!
//! ```text
//! Theta_sigma(eta, xi, tau) =
//!     sum_k exp(i (k_phi xi - 2 k_t tau))
//!         * Int [ c_k(eta, p(s)) e^{i k_q q(s)} - c_k(eta, 0) ]
//!               e^{i (k_phi eta + k_t) s} ds
//! ```
//!
//! after the substitution `s = tau + t` that moves the section time into the
//! phase prefactor; the bracket decays like `e^{-|s|}` because the separatrix
//! approaches the saddle exponentially.

use crate::geometry::{self, separatrix_q_rel, SeparatrixBranch};
use crate::hamiltonian::{frequency_nu, ModelError, ModelSpec, TrigPerturbation};
use crate::quad::{self, QuadError};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Tolerance below which a summed Fourier coefficient counts as zero.
const COEFF_TOL: f64 = 1e-14;
/// Reality tolerance for trigonometric sums built from conjugate pairs.
const REALITY_TOL: f64 = 1e-10;
/// Half-width of the quadrature window; integrands decay like `e^{-|s|}`.
const TAIL_T: f64 = 34.0;
/// Default absolute tolerance for splitting-potential quadratures.
const QUAD_TOL: f64 = 1e-11;

#[derive(Debug, thiserror::Error)]
pub enum MelnikovError {
    #[error("resonant zones overlap inside the action window: {0} and {1}")]
    OverlappingZones(ResonanceVector, ResonanceVector),
    #[error("small divisor {divisor:.3e} for mode (k_phi={k_phi}, k_t={k_t}); inversion undefined")]
    SmallDivisor { k_phi: i32, k_t: i32, divisor: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trig sum is not real (imaginary part {0:.3e})")]
    NonRealValue(f64),
}

/// A `(k_phi, k_t)` harmonic label. Zone identity uses the primitive
/// (gcd-reduced, sign-normalized) representative.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ResonanceVector {
    pub k_phi: i32,
    pub k_t: i32,
}

impl ResonanceVector {
    pub fn new(k_phi: i32, k_t: i32) -> Self {
        Self { k_phi, k_t }
    }

    pub fn is_zero(self) -> bool {
        self.k_phi == 0 && self.k_t == 0
    }

    /// gcd-reduced with the first nonzero component positive.
    pub fn primitive(self) -> Self {
        if self.is_zero() {
            return self;
        }
        let g = gcd(self.k_phi.unsigned_abs(), self.k_t.unsigned_abs()) as i32;
        let mut k = Self::new(self.k_phi / g, self.k_t / g);
        let lead = if k.k_phi != 0 { k.k_phi } else { k.k_t };
        if lead < 0 {
            k.k_phi = -k.k_phi;
            k.k_t = -k.k_t;
        }
        k
    }

    /// The divisor `k_phi nu(I) + k_t` that controls the zone classification.
    pub fn divisor(self, action: f64) -> f64 {
        self.k_phi as f64 * frequency_nu(action) + self.k_t as f64
    }
}

impl std::fmt::Display for ResonanceVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.k_phi, self.k_t)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Zone classification of an action value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ZoneKind {
    NonResonant,
    Resonant(ResonanceVector),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneLabel {
    pub kind: ZoneKind,
    pub beta: f64,
}

/// Fourier table over `(phi, t)` modes with complex coefficients, closed
/// under conjugation when it represents a real function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FourierTable {
    pub modes: BTreeMap<(i32, i32), Complex64>,
}

impl FourierTable {
    pub fn insert(&mut self, k_phi: i32, k_t: i32, c: Complex64) {
        if c.norm() > COEFF_TOL {
            *self
                .modes
                .entry((k_phi, k_t))
                .or_insert(Complex64::new(0.0, 0.0)) += c;
        }
    }

    pub fn eval(&self, phi: f64, t: f64) -> Result<f64, MelnikovError> {
        let mut acc = Complex64::new(0.0, 0.0);
        for (&(k_phi, k_t), &c) in &self.modes {
            acc += c * Complex64::new(0.0, k_phi as f64 * phi + k_t as f64 * t).exp();
        }
        if acc.im.abs() > REALITY_TOL * (1.0 + acc.re.abs()) {
            return Err(MelnikovError::NonRealValue(acc.im));
        }
        Ok(acc.re)
    }

    /// Applies the directional derivative `d = nu(I) d_phi + d_t`, i.e.
    /// multiplies each mode by `i (k_phi nu + k_t)`.
    pub fn partial(&self, action: f64) -> FourierTable {
        let mut out = FourierTable::default();
        for (&(k_phi, k_t), &c) in &self.modes {
            let d = ResonanceVector::new(k_phi, k_t).divisor(action);
            out.insert(k_phi, k_t, c * Complex64::new(0.0, d));
        }
        out
    }
}

/// The harmonic support of `H1` restricted to the saddle `p = q = 0`, as a
/// Fourier table in `(phi, t)` with coefficients evaluated at `I = action`.
pub fn saddle_fourier(pert: &TrigPerturbation, action: f64) -> FourierTable {
    let mut table = FourierTable::default();
    for term in &pert.terms {
        table.insert(term.k_phi, term.k_t, term.coeff.eval(action, 0.0));
    }
    table
}

/// Returns `(N, N2)`: the harmonics of `H1|_{p=q=0}` (coefficients summed
/// over `k_q`, nonzero as polynomials in `I`) and their pairwise sums, both
/// excluding `(0, 0)`.
pub fn harmonic_sets(pert: &TrigPerturbation) -> (Vec<ResonanceVector>, Vec<ResonanceVector>) {
    // Group coefficient polynomials at p = 0 by (k_phi, k_t); a mode is
    // present when the summed polynomial in I is nonzero.
    let mut groups: BTreeMap<(i32, i32), BTreeMap<u32, Complex64>> = BTreeMap::new();
    for term in &pert.terms {
        let entry = groups.entry((term.k_phi, term.k_t)).or_default();
        for m in &term.coeff.monomials {
            if m.p_pow == 0 {
                *entry.entry(m.i_pow).or_insert(Complex64::new(0.0, 0.0)) +=
                    Complex64::new(m.coeff.0, m.coeff.1);
            }
        }
    }
    let mut n: Vec<ResonanceVector> = groups
        .iter()
        .filter(|(_, poly)| poly.values().any(|c| c.norm() > COEFF_TOL))
        .map(|(&(k_phi, k_t), _)| ResonanceVector::new(k_phi, k_t))
        .filter(|k| !k.is_zero())
        .collect();
    n.sort();
    let mut n2: Vec<ResonanceVector> = Vec::new();
    for a in &n {
        for b in &n {
            let s = ResonanceVector::new(a.k_phi + b.k_phi, a.k_t + b.k_t);
            if !s.is_zero() && !n2.contains(&s) {
                n2.push(s);
            }
        }
    }
    n2.sort();
    (n, n2)
}

/// Primitive zone labels from `N` and `N2`, deduplicated.
pub fn zone_vectors(pert: &TrigPerturbation) -> Vec<ResonanceVector> {
    let (n, n2) = harmonic_sets(pert);
    let mut out: Vec<ResonanceVector> = n
        .into_iter()
        .chain(n2)
        .map(ResonanceVector::primitive)
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Checks that the resonant intervals `{ I : |k . (nu(I), 1)| <= beta }` of
/// distinct primitive labels are pairwise disjoint inside the action window.
pub fn validate_zones(model: &ModelSpec) -> Result<(), MelnikovError> {
    let beta = model.beta;
    let (lo, hi) = model.action_window;
    let ks = zone_vectors(&model.perturbation);
    let interval = |k: ResonanceVector| -> Option<(f64, f64)> {
        if k.k_phi == 0 {
            // Constant divisor |k_t|; resonant everywhere or nowhere.
            if (k.k_t as f64).abs() <= beta {
                Some((lo, hi))
            } else {
                None
            }
        } else {
            let c = k.k_phi as f64;
            let (a, b) = ((-(k.k_t as f64) - beta) / c, (-(k.k_t as f64) + beta) / c);
            let (a, b) = (a.min(b), a.max(b));
            if b < lo || a > hi {
                None
            } else {
                Some((a.max(lo), b.min(hi)))
            }
        }
    };
    for (i, &a) in ks.iter().enumerate() {
        for &b in &ks[i + 1..] {
            if let (Some(ia), Some(ib)) = (interval(a), interval(b)) {
                if ia.0 <= ib.1 && ib.0 <= ia.1 {
                    return Err(MelnikovError::OverlappingZones(a, b));
                }
            }
        }
    }
    Ok(())
}

/// Classifies an action value into the non-resonant zone or the (unique)
/// resonant zone containing it.
pub fn classify_zone(action: f64, model: &ModelSpec) -> Result<ZoneLabel, MelnikovError> {
    validate_zones(model)?;
    let beta = model.beta;
    let mut hit: Option<ResonanceVector> = None;
    for k in zone_vectors(&model.perturbation) {
        if k.divisor(action).abs() <= beta {
            if let Some(prev) = hit {
                return Err(MelnikovError::OverlappingZones(prev, k));
            }
            hit = Some(k);
        }
    }
    Ok(ZoneLabel {
        kind: match hit {
            Some(k) => ZoneKind::Resonant(k),
            None => ZoneKind::NonResonant,
        },
        beta,
    })
}

/// Smooth even bump: `1` on `|r| <= 1/2`, `0` on `|r| >= 1`, a mollifier
/// smooth-step in between.
pub fn bump_psi(r: f64) -> f64 {
    let x = r.abs();
    if x <= 0.5 {
        1.0
    } else if x >= 1.0 {
        0.0
    } else {
        // Smooth step s(u) = f(u) / (f(u) + f(1-u)) with f(u) = e^{-1/u},
        // evaluated at u = 2(1 - x) so the plateaus glue C-infinity smoothly.
        let f = |u: f64| if u > 0.0 { (-1.0 / u).exp() } else { 0.0 };
        let u = 2.0 * (1.0 - x);
        f(u) / (f(u) + f(1.0 - u))
    }
}

/// Bump-filtered resonant part of `H1` restricted to the saddle:
/// `sum_k psi(divisor/beta) H1^k(I) e^{i k.(phi, t)}`.
pub fn boldface_h1(
    action: f64,
    phi: f64,
    t: f64,
    model: &ModelSpec,
) -> Result<f64, MelnikovError> {
    boldface_table(action, model)?.eval(phi, t)
}

/// Fourier table of the bump-filtered saddle restriction.
pub fn boldface_table(action: f64, model: &ModelSpec) -> Result<FourierTable, MelnikovError> {
    let saddle = saddle_fourier(&model.perturbation, action);
    let mut out = FourierTable::default();
    for (&(k_phi, k_t), &c) in &saddle.modes {
        let k = ResonanceVector::new(k_phi, k_t);
        if k.is_zero() {
            continue;
        }
        let w = bump_psi(k.divisor(action) / model.beta);
        if w > 0.0 {
            out.insert(k_phi, k_t, c * w);
        }
    }
    Ok(out)
}

/// Time-frozen resonant Hamiltonian `H1bar(I, phi) = boldface_h1(I, phi, 0)`.
pub fn boldface_h1_frozen(action: f64, phi: f64, model: &ModelSpec) -> Result<f64, MelnikovError> {
    boldface_h1(action, phi, 0.0, model)
}

/// Second-order resonant Hamiltonian built from the `xy`-derivatives of the
/// Fourier coefficients at the saddle; in pendulum coordinates
/// `d_xy = (d_pp - d_qq) / (2 lambda)` with the Moser identification
/// `xy = (p^2 - q^2)/2 + O_3`.
pub fn boldface_h2(
    action: f64,
    phi: f64,
    t: f64,
    model: &ModelSpec,
) -> Result<f64, MelnikovError> {
    let lambda = 1.0;
    // d_xy of each mode coefficient C_k(I, p, q) = sum_{k_q} c(I, p) e^{i k_q q}
    // at p = q = 0: d_pp contributes c'' in p; d_qq contributes -k_q^2 c.
    let mut table = FourierTable::default();
    for term in &model.perturbation.terms {
        let d_pp = term.coeff.d2_p(action, 0.0);
        let d_qq = term.coeff.eval(action, 0.0) * (-((term.k_q * term.k_q) as f64));
        table.insert(term.k_phi, term.k_t, (d_pp - d_qq) / (2.0 * lambda));
    }
    let mut filtered = FourierTable::default();
    for (&(k_phi, k_t), &c) in &table.modes {
        let k = ResonanceVector::new(k_phi, k_t);
        if k.is_zero() {
            continue;
        }
        let w = bump_psi(k.divisor(action) / model.beta);
        if w > 0.0 {
            filtered.insert(k_phi, k_t, c * w);
        }
    }
    filtered.eval(phi, t)
}

/// Inverts the averaging operator `d = nu(I) d_phi + d_t` mode by mode,
/// dividing each coefficient by `i (k_phi nu(I) + k_t)`. Modes with divisor
/// smaller than `beta / 2` must be absent.
pub fn inv_partial(
    table: &FourierTable,
    action: f64,
    model: &ModelSpec,
) -> Result<FourierTable, MelnikovError> {
    let mut out = FourierTable::default();
    for (&(k_phi, k_t), &c) in &table.modes {
        let d = ResonanceVector::new(k_phi, k_t).divisor(action);
        if d.abs() <= model.beta / 2.0 {
            return Err(MelnikovError::SmallDivisor {
                k_phi,
                k_t,
                divisor: d,
            });
        }
        out.insert(k_phi, k_t, c / Complex64::new(0.0, d));
    }
    Ok(out)
}

/// The inner-averaging correction
/// `vartheta(I, phi, tau) = -d^{-1}[ H1|_{p=q=0} - H1bar ]` evaluated at
/// `(phi, tau)`.
pub fn vartheta(
    action: f64,
    phi: f64,
    tau: f64,
    _sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<f64, MelnikovError> {
    let table = vartheta_table(action, model)?;
    table.eval(phi, tau)
}

/// Fourier table of `vartheta`.
pub fn vartheta_table(action: f64, model: &ModelSpec) -> Result<FourierTable, MelnikovError> {
    let saddle = saddle_fourier(&model.perturbation, action);
    let filtered = boldface_table(action, model)?;
    let mut diff = FourierTable::default();
    for (&(k_phi, k_t), &c) in &saddle.modes {
        if k_phi == 0 && k_t == 0 {
            // The mean is annihilated by d and carries no dynamics here.
            continue;
        }
        let f = filtered
            .modes
            .get(&(k_phi, k_t))
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0));
        diff.insert(k_phi, k_t, c - f);
    }
    let inv = inv_partial(&diff, action, model)?;
    let mut out = FourierTable::default();
    for (&k, &c) in &inv.modes {
        out.insert(k.0, k.1, -c);
    }
    Ok(out)
}

/// Value and accumulated quadrature error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaValue {
    pub value: f64,
    pub error: f64,
}

/// One per-harmonic reduced integral
/// `A_k = Int [c_k(eta, p(s)) e^{i k_q q_rel(s)} - c_k(eta, 0)] e^{i omega s} ds`
/// with `omega = k_phi eta + k_t`, the quantity that multiplies the phase
/// factor `e^{i (k_phi xi - 2 k_t tau)}` in the splitting potential.
fn reduced_integral(
    term: &crate::hamiltonian::TrigTerm,
    eta: f64,
    sigma: SeparatrixBranch,
    weight: fn(f64) -> f64,
) -> Result<(Complex64, f64), MelnikovError> {
    let omega = term.k_phi as f64 * eta + term.k_t as f64;
    let integrand = |s: f64| -> Complex64 {
        let (p, _) = geometry::pendulum_separatrix(sigma, s);
        let q_rel = separatrix_q_rel(sigma, s);
        let on_sep = term.coeff.eval(eta, p)
            * Complex64::new(0.0, term.k_q as f64 * q_rel).exp();
        let at_saddle = term.coeff.eval(eta, 0.0);
        (on_sep - at_saddle) * Complex64::new(0.0, omega * s).exp() * weight(s)
    };
    let (value, err) = quad::integrate_complex(integrand, -TAIL_T, TAIL_T, QUAD_TOL)?;
    Ok((value, err))
}

fn theta_sum(
    eta: f64,
    xi: f64,
    tau: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
    phase_derivative: Option<(f64, f64)>, // (per-k_phi, per-k_t) phase multipliers
    s_weight: fn(f64) -> f64,
) -> Result<ThetaValue, MelnikovError> {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut err = 0.0;
    for term in &model.perturbation.terms {
        let (a, e) = reduced_integral(term, eta, sigma, s_weight)?;
        if a.norm() < 1e-300 && e == 0.0 {
            continue;
        }
        let phase = Complex64::new(
            0.0,
            term.k_phi as f64 * xi - 2.0 * term.k_t as f64 * tau,
        )
        .exp();
        let factor = match phase_derivative {
            None => Complex64::new(1.0, 0.0),
            Some((c_phi, c_t)) => Complex64::new(
                0.0,
                c_phi * term.k_phi as f64 + c_t * term.k_t as f64,
            ),
        };
        acc += a * phase * factor;
        err += e;
    }
    if acc.im.abs() > REALITY_TOL * (1.0 + acc.re.abs()) {
        return Err(MelnikovError::NonRealValue(acc.im));
    }
    Ok(ThetaValue {
        value: acc.re,
        error: err,
    })
}

fn unit_weight(_s: f64) -> f64 {
    1.0
}

fn s_weight(s: f64) -> f64 {
    s
}

/// Splitting potential `Theta_sigma(eta, xi, tau)` with quadrature error
/// estimate. The `vartheta` boundary terms cancel exactly when `mu = 0`
/// (which holds for this model family); otherwise they are included.
pub fn theta_splitting(
    eta: f64,
    xi: f64,
    tau: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<ThetaValue, MelnikovError> {
    let mut out = theta_sum(eta, xi, tau, sigma, model, None, unit_weight)?;
    let mu = geometry::mu(eta, sigma);
    if mu.abs() > 1e-13 {
        let a = vartheta(eta, xi, -tau, sigma, model)?;
        let b = vartheta(eta, xi + mu, -tau, sigma, model)?;
        out.value += a - b;
    }
    Ok(out)
}

/// Aggregated harmonics of the splitting potential: the coefficients `A_k`
/// in `Theta(eta, xi, tau) = sum_k A_k e^{i (k_phi xi - 2 k_t tau)}`,
/// grouped by `(k_phi, k_t)` (conjugate modes appear separately, so the sum
/// is real term by term pairing).
pub fn theta_harmonics(
    eta: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<BTreeMap<(i32, i32), Complex64>, MelnikovError> {
    let mut out: BTreeMap<(i32, i32), Complex64> = BTreeMap::new();
    for term in &model.perturbation.terms {
        let (a, _) = reduced_integral(term, eta, sigma, unit_weight)?;
        *out.entry((term.k_phi, term.k_t))
            .or_insert(Complex64::new(0.0, 0.0)) += a;
    }
    out.retain(|_, a| a.norm() > 1e-300);
    Ok(out)
}


/// First-order oscillatory corrector for the conserved quantities at a
/// section crossing with rotor phase `phi_c` and clock time `t_c`. Returns
/// `(delta_i, delta_h)`: the increments of `I` and of the full energy
/// `H0 + eps H1` accumulated over the incoming half-loop `s in (-inf, 0]`,
/// with the non-decaying saddle tails Abel-regularized
/// (`int_{-inf}^0 e^{i omega s} ds -> 1 / (i omega)`).
///
/// The Abel tail of each mode is weighted by the complement of the resonance
/// bump `1 - psi(omega / beta)`: modes with a small divisor are (partially)
/// resonant, their secular saddle drift belongs to the averaged terms
/// `H1bar` / `B`, and keeping their `1 / (i omega)` tail here would blow up
/// the coordinate change precisely where it must stay O(eps).
///
/// Subtracting these from the raw section values yields coordinates whose
/// one-step increments are the full per-loop splitting integrals, instead
/// of a mix of half-loop contributions from two consecutive crossings.
pub fn half_loop_corrector(
    eta: f64,
    phi_c: f64,
    t_c: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<(f64, f64), MelnikovError> {
    let mut acc_i = Complex64::new(0.0, 0.0);
    let mut acc_h = Complex64::new(0.0, 0.0);
    for term in &model.perturbation.terms {
        let omega = term.k_phi as f64 * eta + term.k_t as f64;
        let integrand = |s: f64| -> Complex64 {
            let (p, _) = geometry::pendulum_separatrix(sigma, s);
            let q_rel = separatrix_q_rel(sigma, s);
            (term.coeff.eval(eta, p) * Complex64::new(0.0, term.k_q as f64 * q_rel).exp()
                - term.coeff.eval(eta, 0.0))
                * Complex64::new(0.0, omega * s).exp()
        };
        let (mut half, _) = quad::integrate_complex(integrand, -TAIL_T, 0.0, QUAD_TOL)?;
        let saddle = term.coeff.eval(eta, 0.0);
        let tail_weight = 1.0 - bump_psi(omega / model.beta);
        if saddle.norm() > 0.0 && tail_weight > 0.0 {
            half += saddle * tail_weight / Complex64::new(0.0, omega);
        }
        let phase =
            Complex64::new(0.0, term.k_phi as f64 * phi_c + term.k_t as f64 * t_c).exp();
        acc_i += Complex64::new(0.0, term.k_phi as f64) * half * phase;
        acc_h += Complex64::new(0.0, term.k_t as f64) * half * phase;
    }
    let eps = model.epsilon;
    Ok((-eps * acc_i.re, eps * acc_h.re))
}

/// Partial derivatives `(d_xi, d_tau, d_eta)` of the splitting potential,
/// differentiated under the integral sign.
pub fn theta_partials(
    eta: f64,
    xi: f64,
    tau: f64,
    sigma: SeparatrixBranch,
    model: &ModelSpec,
) -> Result<(f64, f64, f64), MelnikovError> {
    // d_xi: each term picks up i k_phi; d_tau: -2 i k_t.
    let d_xi = theta_sum(eta, xi, tau, sigma, model, Some((1.0, 0.0)), unit_weight)?;
    let d_tau = theta_sum(eta, xi, tau, sigma, model, Some((0.0, -2.0)), unit_weight)?;
    // d_eta: differentiate the coefficient polynomials and the s-phase.
    let mut acc = Complex64::new(0.0, 0.0);
    for term in &model.perturbation.terms {
        let omega = term.k_phi as f64 * eta + term.k_t as f64;
        let integrand = |s: f64| -> Complex64 {
            let (p, _) = geometry::pendulum_separatrix(sigma, s);
            let q_rel = separatrix_q_rel(sigma, s);
            let rot = Complex64::new(0.0, term.k_q as f64 * q_rel).exp();
            let bracket = term.coeff.eval(eta, p) * rot - term.coeff.eval(eta, 0.0);
            let d_bracket = term.coeff.d_action(eta, p) * rot - term.coeff.d_action(eta, 0.0);
            (d_bracket
                + bracket * Complex64::new(0.0, term.k_phi as f64 * s))
                * Complex64::new(0.0, omega * s).exp()
        };
        let (value, _) = quad::integrate_complex(integrand, -TAIL_T, TAIL_T, QUAD_TOL)?;
        let phase =
            Complex64::new(0.0, term.k_phi as f64 * xi - 2.0 * term.k_t as f64 * tau).exp();
        acc += value * phase;
    }
    if acc.im.abs() > REALITY_TOL * (1.0 + acc.re.abs()) {
        return Err(MelnikovError::NonRealValue(acc.im));
    }
    let _ = s_weight; // retained for symmetry with future weights
    Ok((d_xi.value, d_tau.value, acc.re))
}

/// Tabulated splitting potential over a `(xi, tau)` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplittingPotentialGrid {
    pub eta: f64,
    pub sigma: SeparatrixBranch,
    pub n_xi: usize,
    pub n_tau: usize,
    pub xi_range: (f64, f64),
    pub tau_range: (f64, f64),
    /// Row-major `[i_xi * n_tau + i_tau]`.
    pub values: Vec<f64>,
    pub error: f64,
}

impl SplittingPotentialGrid {
    pub fn compute(
        eta: f64,
        sigma: SeparatrixBranch,
        n_xi: usize,
        n_tau: usize,
        model: &ModelSpec,
    ) -> Result<Self, MelnikovError> {
        let xi_range = (0.0, 2.0 * PI);
        let tau_range = (-1.0, 1.0);
        let cells: Vec<(usize, usize)> = (0..n_xi)
            .flat_map(|i| (0..n_tau).map(move |j| (i, j)))
            .collect();
        // Parallel evaluation; collect preserves index order so the output
        // is bit-stable regardless of thread count.
        let results: Vec<Result<ThetaValue, MelnikovError>> = cells
            .par_iter()
            .map(|&(i, j)| {
                let xi = xi_range.0
                    + (xi_range.1 - xi_range.0) * i as f64 / n_xi.max(1) as f64;
                let tau = tau_range.0
                    + (tau_range.1 - tau_range.0) * j as f64 / (n_tau.max(2) - 1) as f64;
                theta_splitting(eta, xi, tau, sigma, model)
            })
            .collect();
        let mut values = Vec::with_capacity(results.len());
        let mut error: f64 = 0.0;
        for r in results {
            let v = r?;
            values.push(v.value);
            error = error.max(v.error);
        }
        Ok(Self {
            eta,
            sigma,
            n_xi,
            n_tau,
            xi_range,
            tau_range,
            values,
            error,
        })
    }
}
