//! Random-walk model of the action dynamics and its Monte Carlo validation.
//!
//! The walk `eta_{n+1} = eta_n + sigma(eta_n) delta omega_n + b(eta_n) delta^2`
//! with Rademacher noise `omega_n = +-1` is the stochastic model of the
//! separatrix-map action component; after `n_delta = floor(s delta^{-2})`
//! steps its law converges weakly (in `delta`) to the Ito diffusion with
//! drift `b` and volatility `sigma`. This module provides the walk itself,
//! deterministic parallel ensembles, the Kolmogorov-Smirnov check against
//! the constant-coefficient Gaussian reference, and the empirical drift /
//! variance estimators used to close the loop against the Melnikov variance.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hamiltonian::ModelSpec;
use crate::map::SepMapState;
use crate::melnikov::{self, MelnikovError, ZoneKind};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("eta = {eta:.6} is not in a non-resonant zone")]
    WrongZone { eta: f64 },
    #[error("walk spec invalid: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
}

/// State-dependent walk coefficient.
pub type CoeffFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Specification of one random walk: coefficients, step scale `delta`,
/// initial action, and diffusion-time horizon `s`.
#[derive(Clone)]
pub struct WalkSpec {
    pub sigma: CoeffFn,
    pub b: CoeffFn,
    pub delta: f64,
    pub eta0: f64,
    pub s: f64,
}

impl WalkSpec {
    pub fn new(sigma: CoeffFn, b: CoeffFn, delta: f64, eta0: f64, s: f64) -> Result<Self, DiffusionError> {
        let spec = Self {
            sigma,
            b,
            delta,
            eta0,
            s,
        };
        if !(delta > 0.0) {
            return Err(DiffusionError::InvalidSpec(format!("delta = {delta}")));
        }
        if !(s > 0.0) {
            return Err(DiffusionError::InvalidSpec(format!("s = {s}")));
        }
        if spec.n_steps() < 1 {
            return Err(DiffusionError::InvalidSpec(
                "fewer than one step: s delta^-2 < 1".into(),
            ));
        }
        Ok(spec)
    }

    /// Walk with constant coefficients.
    pub fn constant(sigma: f64, b: f64, delta: f64, eta0: f64, s: f64) -> Result<Self, DiffusionError> {
        Self::new(
            Arc::new(move |_| sigma),
            Arc::new(move |_| b),
            delta,
            eta0,
            s,
        )
    }

    /// Number of walk steps `n_delta = floor(s delta^{-2})`.
    pub fn n_steps(&self) -> u64 {
        (self.s / (self.delta * self.delta)).floor() as u64
    }
}

// ---------------------------------------------------------------------------
// Counter-based RNG: a splitmix64 chain keyed on (seed, sample, step). Every
// draw is a pure function of its coordinates, so parallel ensembles are
// trivially reproducible.
// ---------------------------------------------------------------------------

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Rademacher variable `+-1` for the given (seed, sample, step) counter.
pub fn rademacher(seed: u64, sample: u64, step: u64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ sample) ^ step);
    if h >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// One step of the walk recursion.
pub fn walk_step(eta: f64, spec: &WalkSpec, omega: f64) -> f64 {
    debug_assert!(omega == 1.0 || omega == -1.0);
    eta + (spec.sigma)(eta) * spec.delta * omega + (spec.b)(eta) * spec.delta * spec.delta
}

/// Runs one full walk of `n_steps` and returns the final action.
pub fn run_walk(spec: &WalkSpec, seed: u64, sample: u64) -> f64 {
    let mut eta = spec.eta0;
    for step in 0..spec.n_steps() {
        eta = walk_step(eta, spec, rademacher(seed, sample, step));
    }
    eta
}

/// Fixed-width histogram of ensemble endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

/// Monte Carlo summary of one ensemble of walks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_samples: usize,
    pub histogram: Histogram,
    pub mean: f64,
    pub variance: f64,
    /// Kolmogorov-Smirnov distance to the constant-coefficient Gaussian
    /// reference `N(eta0 + b s, sigma^2 s)` (coefficients frozen at `eta0`).
    pub ks_distance: f64,
    /// `(mean, variance)` of the reference normal.
    pub target: (f64, f64),
}

const HISTOGRAM_BINS: usize = 64;

/// Runs `n_samples` independent walks in parallel (sample-indexed RNG, fixed
/// reduction order) and summarizes the endpoint distribution.
pub fn simulate_ensemble(spec: &WalkSpec, n_samples: usize, seed: u64) -> EnsembleSummary {
    let endpoints: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|sample| run_walk(spec, seed, sample))
        .collect();

    let n = n_samples as f64;
    let mean = endpoints.iter().sum::<f64>() / n;
    let variance = endpoints.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);

    let target_mean = spec.eta0 + (spec.b)(spec.eta0) * spec.s;
    let target_var = (spec.sigma)(spec.eta0).powi(2) * spec.s;

    // Histogram over the reference five-sigma window.
    let sd = target_var.sqrt().max(f64::MIN_POSITIVE);
    let (lo, hi) = (target_mean - 5.0 * sd, target_mean + 5.0 * sd);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &x in &endpoints {
        let r = (x - lo) / (hi - lo);
        let bin = ((r * HISTOGRAM_BINS as f64).floor() as i64).clamp(0, HISTOGRAM_BINS as i64 - 1);
        counts[bin as usize] += 1;
    }

    // KS distance against the reference normal.
    let mut sorted = endpoints;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite endpoints"));
    let reference = Normal::new(target_mean, sd).expect("valid normal");
    let mut ks = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = reference.cdf(x);
        ks = ks.max((cdf - i as f64 / n).abs());
        ks = ks.max(((i + 1) as f64 / n - cdf).abs());
    }

    EnsembleSummary {
        n_samples,
        histogram: Histogram { lo, hi, counts },
        mean,
        variance,
        ks_distance: ks,
        target: (target_mean, target_var),
    }
}

// ---------------------------------------------------------------------------
// Empirical drift / variance estimation from map orbits.
// ---------------------------------------------------------------------------

/// Uniform binning of the action axis for the increment estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

/// Per-bin drift and volatility estimates. The scalings follow the
/// increment structure `Delta eta = eps d_xi Theta + O(eps^2)`: the
/// first-order term has zero mean over equidistributed phases, so the drift
/// surfaces at second order (`b_hat = mean / eps^2`) while the volatility is
/// first order (`sigma_hat = stdev / eps`). Empty bins are flagged with
/// `count = 0` and `None` estimates rather than failing the whole table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinEstimate {
    pub eta_mid: f64,
    pub count: usize,
    pub b_hat: Option<f64>,
    pub sigma_hat: Option<f64>,
    /// Standard error of `b_hat` (delta-method on the bin mean).
    pub b_se: Option<f64>,
    /// Standard error of `sigma_hat` (`sd / sqrt(2 count)`).
    pub sigma_se: Option<f64>,
}

/// Bins the orbit's action increments by the pre-step action and estimates
/// per-bin drift and volatility in the theorem's scalings.
pub fn empirical_drift_variance(
    orbit: &[SepMapState],
    epsilon: f64,
    bins: BinSpec,
) -> Vec<BinEstimate> {
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); bins.n_bins];
    let width = (bins.hi - bins.lo) / bins.n_bins as f64;
    for pair in orbit.windows(2) {
        let eta = pair[0].eta;
        let d_eta = pair[1].eta - pair[0].eta;
        if eta < bins.lo || eta >= bins.hi {
            continue;
        }
        let idx = (((eta - bins.lo) / width).floor() as usize).min(bins.n_bins - 1);
        buckets[idx].push(d_eta);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, inc)| {
            let eta_mid = bins.lo + (i as f64 + 0.5) * width;
            let count = inc.len();
            if count == 0 {
                return BinEstimate {
                    eta_mid,
                    count,
                    b_hat: None,
                    sigma_hat: None,
                    b_se: None,
                    sigma_se: None,
                };
            }
            let n = count as f64;
            let mean = inc.iter().sum::<f64>() / n;
            let var = if count > 1 {
                inc.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let sd = var.sqrt();
            BinEstimate {
                eta_mid,
                count,
                b_hat: Some(mean / (epsilon * epsilon)),
                sigma_hat: Some(sd / epsilon),
                b_se: Some(sd / n.sqrt() / (epsilon * epsilon)),
                sigma_se: Some(sd / (2.0 * n).sqrt() / epsilon),
            }
        })
        .collect()
}

/// Theoretical per-step variance: the `(xi, tau)`-quadratic mean of
/// `d_xi Theta` over the torus, evaluated by grid quadrature. Defined only
/// in non-resonant zones.
pub fn melnikov_variance(eta: f64, model: &ModelSpec) -> Result<f64, DiffusionError> {
    let zone = melnikov::classify_zone(eta, model)?;
    if !matches!(zone.kind, ZoneKind::NonResonant) {
        return Err(DiffusionError::WrongZone { eta });
    }
    // d_xi Theta is the real trig polynomial
    // sum_k (i k_phi) A_k e^{i (k_phi xi - 2 k_t tau)}, so its quadratic mean
    // over the torus is sum_k k_phi^2 |A_k|^2 by Parseval.
    let harmonics =
        melnikov::theta_harmonics(eta, crate::geometry::SeparatrixBranch::Plus, model)?;
    let mut acc = 0.0;
    for (&(k_phi, _), a) in &harmonics {
        acc += (k_phi as f64).powi(2) * a.norm_sqr();
    }
    Ok(acc)
}
