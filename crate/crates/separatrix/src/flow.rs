//! Ground-truth integration of the full perturbed flow.
//!
//! This module is the reference path against which the separatrix map is
//! validated. It provides
//!
//! * an eighth-order adaptive Runge-Kutta integrator (Dormand-Prince 8(5,3)
//!   pair) for the four-dimensional non-autonomous system,
//! * event detection for the return map to the transversal sections
//!   `q = pi (mod 2 pi)` inside the pendulum-energy collar,
//! * extraction of separatrix-map coordinates at section crossings, and
//! * the first-order averaged inner flow `(F1, G1)` used to validate the
//!   resonant regime.
//!
//! The stepper is written against closures of type
//! `Fn(t, &[f64; 4]) -> Result<[f64; 4], FlowError>` so the same core drives
//! both the full system and the truncated resonant system in slow-fast
//! variables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SeparatrixBranch;
use crate::hamiltonian::{
    self, eval_h0, eval_h1, frequency_nu, pendulum_energy, wrap_angle, ModelError, ModelSpec,
    PhasePoint,
};
use crate::map::SepMapState;
use crate::melnikov::{self, MelnikovError, ResonanceVector};
use crate::quad;

/// Phase-space dimension of the full system `(I, phi, p, q)`.
pub const DIM: usize = 4;

type State = [f64; DIM];

/// Half-width of the pendulum-energy collar that defines the sections
/// `Lambda_pm = {q = pi (mod 2 pi), |p^2/2 + cos q - 1| < COLLAR_C}`.
pub const COLLAR_C: f64 = 0.5;

/// Tolerance used internally by [`numeric_return_map`].
pub const RETURN_TOL: f64 = 1e-11;

/// Crossings earlier than this after the start are ignored, so a start that
/// sits exactly on the section is not reported as its own return. Transit
/// times near the separatrix are bounded below by the loop period, which is
/// much larger.
const MIN_RETURN_TIME: f64 = 0.5;

/// Time-of-crossing bisection tolerance (the section residual is then
/// `|p| * EVENT_TIME_TOL`, well below the 1e-10 event tolerance).
const EVENT_TIME_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step size underflow at t = {t:.6e}")]
    StepFailure { t: f64 },
    #[error("integration tolerance {0:.3e} outside [1e-13, 1e-6]")]
    InvalidTolerance(f64),
    #[error("no return to a fundamental domain within t_max = {t_max:.3e}")]
    NotDefined { t_max: f64 },
    #[error("point with pendulum energy {w:.3e} outside the collar (limit {limit:.3e})")]
    OutOfCollar { w: f64, limit: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Map(#[from] crate::map::MapError),
    #[error(transparent)]
    Quadrature(#[from] quad::QuadError),
}

// ---------------------------------------------------------------------------
// Dormand-Prince 8(5,3) tableau.
//
// Twelve-stage eighth-order core with the embedded fifth- and third-order
// error estimators. The node of the final stage is c12 = 1 (the row sum of
// its A row), which matters for non-autonomous right-hand sides.
// ---------------------------------------------------------------------------
mod tableau {
    pub const C: [f64; 12] = [
        0.0,
        5.26001519587677318785587544488E-2,
        7.89002279381515978178381316732E-2,
        1.18350341907227396726757197510E-1,
        2.81649658092772603273242802490E-1,
        3.33333333333333333333333333333E-1,
        0.25,
        3.07692307692307692307692307692E-1,
        6.51282051282051282051282051282E-1,
        0.6,
        8.57142857142857142857142857142E-1,
        1.0,
    ];

    pub const A2: [f64; 1] = [5.26001519587677318785587544488E-2];
    pub const A3: [f64; 2] = [
        1.97250569845378994544595329183E-2,
        5.91751709536136983633785987549E-2,
    ];
    pub const A4: [f64; 3] = [
        2.95875854768068491816892993775E-2,
        0.0,
        8.87627564304205475450678981324E-2,
    ];
    pub const A5: [f64; 4] = [
        2.41365134159266685502369798665E-1,
        0.0,
        -8.84549479328286085344864962717E-1,
        9.24834003261792003115737966543E-1,
    ];
    pub const A6: [f64; 5] = [
        3.7037037037037037037037037037E-2,
        0.0,
        0.0,
        1.70828608729473871279604482173E-1,
        1.25467687566822425016691814123E-1,
    ];
    pub const A7: [f64; 6] = [
        3.7109375E-2,
        0.0,
        0.0,
        1.70252211019544039314978060272E-1,
        6.02165389804559606850219397283E-2,
        -1.7578125E-2,
    ];
    pub const A8: [f64; 7] = [
        3.70920001185047927108779319836E-2,
        0.0,
        0.0,
        1.70383925712239993810214054705E-1,
        1.07262030446373284651809199168E-1,
        -1.53194377486244017527936158236E-2,
        8.27378916381402288758473766002E-3,
    ];
    pub const A9: [f64; 8] = [
        6.24110958716075717114429577812E-1,
        0.0,
        0.0,
        -3.36089262944694129406857109825E0,
        -8.68219346841726006818189891453E-1,
        2.75920996994467083049415600797E1,
        2.01540675504778934086186788979E1,
        -4.34898841810699588477366255144E1,
    ];
    pub const A10: [f64; 9] = [
        4.77662536438264365890433908527E-1,
        0.0,
        0.0,
        -2.48811461997166764192642586468E0,
        -5.90290826836842996371446475743E-1,
        2.12300514481811942347288949897E1,
        1.52792336328824235832596922938E1,
        -3.32882109689848629194453265587E1,
        -2.03312017085086261358222928593E-2,
    ];
    pub const A11: [f64; 10] = [
        -9.3714243008598732571704021658E-1,
        0.0,
        0.0,
        5.18637242884406370830023853209E0,
        1.09143734899672957818500254654E0,
        -8.14978701074692612513997267357E0,
        -1.85200656599969598641566180701E1,
        2.27394870993505042818970056734E1,
        2.49360555267965238987089396762E0,
        -3.0467644718982195003823669022E0,
    ];
    pub const A12: [f64; 11] = [
        2.27331014751653820792359768449E0,
        0.0,
        0.0,
        -1.05344954667372501984066689879E1,
        -2.00087205822486249909675718444E0,
        -1.79589318631187989172765950534E1,
        2.79488845294199600508499808837E1,
        -2.85899827713502369474065508674E0,
        -8.87285693353062954433549289258E0,
        1.23605671757943030647266201528E1,
        6.43392746015763530355970484046E-1,
    ];

    pub fn a_row(stage: usize) -> &'static [f64] {
        match stage {
            1 => &A2,
            2 => &A3,
            3 => &A4,
            4 => &A5,
            5 => &A6,
            6 => &A7,
            7 => &A8,
            8 => &A9,
            9 => &A10,
            10 => &A11,
            11 => &A12,
            _ => panic!("no A row for stage {stage}"),
        }
    }

    pub const B: [f64; 12] = [
        5.42937341165687622380535766363E-2,
        0.0,
        0.0,
        0.0,
        0.0,
        4.45031289275240888144113950566E0,
        1.89151789931450038304281599044E0,
        -5.8012039600105847814672114227E0,
        3.1116436695781989440891606237E-1,
        -1.52160949662516078556178806805E-1,
        2.01365400804030348374776537501E-1,
        4.47106157277725905176885569043E-2,
    ];

    pub const BHH: [f64; 3] = [
        0.244094488188976377952755905512E0,
        0.733846688281611857341361741547E0,
        0.220588235294117647058823529412E-1,
    ];

    pub const E: [f64; 12] = [
        0.1312004499419488073250102996E-1,
        0.0,
        0.0,
        0.0,
        0.0,
        -0.1225156446376204440720569753E1,
        -0.4957589496572501915214079952E0,
        0.1664377182454986536961530415E1,
        -0.3503288487499736816886487290E0,
        0.3341791187130174790297318841E0,
        0.8192320648511571246570742613E-1,
        -0.2235530786388629525884427845E-1,
    ];
}

// ---------------------------------------------------------------------------
// Core stepper.
// ---------------------------------------------------------------------------

fn axpy(y: &State, h: f64, k: &State) -> State {
    let mut out = *y;
    for i in 0..DIM {
        out[i] += h * k[i];
    }
    out
}

/// One twelve-stage evaluation: returns the eighth-order candidate together
/// with the mixed 5th/3rd-order error measure of the 8(5,3) pair.
fn rk_attempt<F>(f: &F, t: f64, y: &State, h: f64, tol: f64) -> Result<(State, f64), FlowError>
where
    F: Fn(f64, &State) -> Result<State, FlowError>,
{
    let mut k = [[0.0; DIM]; 12];
    k[0] = f(t, y)?;
    for s in 1..12 {
        let row = tableau::a_row(s);
        let mut ys = *y;
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                for i in 0..DIM {
                    ys[i] += h * a * k[j][i];
                }
            }
        }
        k[s] = f(t + tableau::C[s] * h, &ys)?;
    }

    let mut ksum = [0.0; DIM];
    for (s, &b) in tableau::B.iter().enumerate() {
        if b != 0.0 {
            for i in 0..DIM {
                ksum[i] += b * k[s][i];
            }
        }
    }
    let y_new = axpy(y, h, &ksum);

    let mut err5 = [0.0; DIM];
    for (s, &e) in tableau::E.iter().enumerate() {
        if e != 0.0 {
            for i in 0..DIM {
                err5[i] += e * k[s][i];
            }
        }
    }
    let mut err3 = [0.0; DIM];
    for i in 0..DIM {
        err3[i] = ksum[i]
            - tableau::BHH[0] * k[0][i]
            - tableau::BHH[1] * k[8][i]
            - tableau::BHH[2] * k[11][i];
    }

    let mut e5 = 0.0;
    let mut e3 = 0.0;
    for i in 0..DIM {
        let sc = tol + tol * y[i].abs().max(y_new[i].abs());
        e5 += (err5[i] / sc) * (err5[i] / sc);
        e3 += (err3[i] / sc) * (err3[i] / sc);
    }
    let mut deno = e5 + 0.01 * e3;
    if deno <= 0.0 {
        deno = 1.0;
    }
    let err = h.abs() * e5 * (1.0 / (deno * DIM as f64)).sqrt();
    Ok((y_new, err))
}

/// A single fixed step of the eighth-order scheme (error estimate ignored).
fn fixed_step<F>(f: &F, t: f64, y: &State, h: f64) -> Result<State, FlowError>
where
    F: Fn(f64, &State) -> Result<State, FlowError>,
{
    let (y_new, _) = rk_attempt(f, t, y, h, 1e-8)?;
    Ok(y_new)
}

/// Hairer-style starting step size for an order-8 method.
fn initial_step<F>(f: &F, t0: f64, y0: &State, tol: f64, posneg: f64) -> Result<f64, FlowError>
where
    F: Fn(f64, &State) -> Result<State, FlowError>,
{
    let f0 = f(t0, y0)?;
    let sc: Vec<f64> = y0.iter().map(|&v| tol + tol * v.abs()).collect();
    let rms = |v: &State| -> f64 {
        let mut s = 0.0;
        for i in 0..DIM {
            s += (v[i] / sc[i]) * (v[i] / sc[i]);
        }
        (s / DIM as f64).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(&f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * (d0 / d1)
    };
    let y1 = axpy(y0, posneg * h0, &f0);
    let f1 = f(t0 + posneg * h0, &y1)?;
    let mut diff = [0.0; DIM];
    for i in 0..DIM {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 8.0)
    };
    Ok(posneg * h1.min(100.0 * h0).min(1.0))
}

/// Adaptive stepper state for one integration run.
struct Stepper<'a, F>
where
    F: Fn(f64, &State) -> Result<State, FlowError>,
{
    f: &'a F,
    tol: f64,
    t: f64,
    y: State,
    h: f64,
    posneg: f64,
    fac_old: f64,
    rejecting: bool,
    accepted: usize,
    rejected: usize,
}

impl<'a, F> Stepper<'a, F>
where
    F: Fn(f64, &State) -> Result<State, FlowError>,
{
    fn new(f: &'a F, t0: f64, y0: State, tol: f64, posneg: f64) -> Result<Self, FlowError> {
        let h = initial_step(f, t0, &y0, tol, posneg)?;
        Ok(Self {
            f,
            tol,
            t: t0,
            y: y0,
            h,
            posneg,
            fac_old: 1e-4,
            rejecting: false,
            accepted: 0,
            rejected: 0,
        })
    }

    /// Performs one accepted step, clamped so it does not pass `t_limit`.
    /// Returns the step's starting time and state along with the new ones.
    fn advance(&mut self, t_limit: f64) -> Result<(), FlowError> {
        // PI controller constants of the classical implementation.
        const SAFETY: f64 = 0.9;
        const ALPHA: f64 = 1.0 / 8.0;
        const FACC1: f64 = 1.0 / 0.333; // 1 / fac_min
        const FACC2: f64 = 1.0 / 6.0; // 1 / fac_max
        loop {
            if self.h.abs() < 1e-13 * self.t.abs().max(1.0) {
                return Err(FlowError::StepFailure { t: self.t });
            }
            if (self.t + 1.01 * self.h - t_limit) * self.posneg > 0.0 {
                self.h = t_limit - self.t;
            }
            let (y_new, err) = rk_attempt(self.f, self.t, &self.y, self.h, self.tol)?;
            let fac11 = err.powf(ALPHA);
            if err <= 1.0 {
                self.fac_old = err.max(1e-4);
                let fac = FACC2.max(FACC1.min(fac11 / SAFETY));
                let mut h_new = self.h / fac;
                if self.rejecting {
                    h_new = self.posneg * h_new.abs().min(self.h.abs());
                }
                self.rejecting = false;
                self.t += self.h;
                self.y = y_new;
                self.h = h_new;
                self.accepted += 1;
                return Ok(());
            }
            self.h /= FACC1.min(fac11 / SAFETY);
            self.rejecting = true;
            self.rejected += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Public integration API.
// ---------------------------------------------------------------------------

/// A time-ordered record of one integration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    /// Samples at every accepted step, starting with the initial point.
    pub samples: Vec<PhasePoint>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Max drift of `H0` along the run. An exact invariant only at
    /// `epsilon = 0`; for `epsilon > 0` it drifts at `O(epsilon)` and serves
    /// as a coarse sanity proxy.
    pub max_energy_defect: f64,
}

fn state_of(point: &PhasePoint) -> State {
    [point.action, point.phi, point.p, point.q]
}

fn point_of(y: &State, t: f64) -> PhasePoint {
    PhasePoint {
        action: y[0],
        phi: y[1],
        p: y[2],
        q: y[3],
        t,
    }
}

fn model_rhs<'a>(model: &'a ModelSpec) -> impl Fn(f64, &State) -> Result<State, FlowError> + 'a {
    move |t, y| {
        let point = point_of(y, t);
        Ok(hamiltonian::vector_field(model, &point)?)
    }
}

fn check_tol(tol: f64) -> Result<(), FlowError> {
    if !(1e-13..=1e-6).contains(&tol) {
        return Err(FlowError::InvalidTolerance(tol));
    }
    Ok(())
}

/// Integrates the full system for a duration `t_end` starting at `start.t`,
/// recording every accepted step.
pub fn integrate(
    model: &ModelSpec,
    start: &PhasePoint,
    t_end: f64,
    tol: f64,
) -> Result<Trajectory, FlowError> {
    check_tol(tol)?;
    let f = model_rhs(model);
    let t0 = start.t;
    let t1 = t0 + t_end;
    let mut samples = vec![*start];
    if t_end == 0.0 {
        return Ok(Trajectory {
            samples,
            accepted_steps: 0,
            rejected_steps: 0,
            max_energy_defect: 0.0,
        });
    }
    let posneg = t_end.signum();
    let mut stepper = Stepper::new(&f, t0, state_of(start), tol, posneg)?;
    let h0_start = eval_h0(start);
    let mut defect = 0.0f64;
    while (stepper.t - t1) * posneg < -1e-14 * t1.abs().max(1.0) {
        stepper.advance(t1)?;
        let point = point_of(&stepper.y, stepper.t);
        defect = defect.max((eval_h0(&point) - h0_start).abs());
        samples.push(point);
    }
    Ok(Trajectory {
        samples,
        accepted_steps: stepper.accepted,
        rejected_steps: stepper.rejected,
        max_energy_defect: defect,
    })
}

/// Integrates with `n_steps` fixed steps of the eighth-order scheme; used by
/// the self-convergence order check.
pub fn integrate_fixed(
    model: &ModelSpec,
    start: &PhasePoint,
    t_end: f64,
    n_steps: usize,
) -> Result<PhasePoint, FlowError> {
    let f = model_rhs(model);
    let h = t_end / n_steps as f64;
    let mut t = start.t;
    let mut y = state_of(start);
    for _ in 0..n_steps {
        y = fixed_step(&f, t, &y, h)?;
        t += h;
    }
    Ok(point_of(&y, t))
}

/// Flows a point for exactly `Delta t = 1`.
pub fn time_one_map(model: &ModelSpec, point: &PhasePoint) -> Result<PhasePoint, FlowError> {
    let traj = integrate(model, point, 1.0, 1e-12)?;
    Ok(*traj.samples.last().expect("non-empty trajectory"))
}

// ---------------------------------------------------------------------------
// Return map and coordinate extraction.
// ---------------------------------------------------------------------------

/// Which way the orbit pierces the section (sign of `d/dt cos(q/2)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossingKind {
    Enter,
    Exit,
}

/// A detected crossing of one of the sections `Lambda_pm`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionEvent {
    pub point: PhasePoint,
    pub crossing_kind: CrossingKind,
    /// `Plus` for the upper loop (`p > 0`), `Minus` for the lower.
    pub section_id: SeparatrixBranch,
    pub time: f64,
}

/// Section residual: vanishes exactly on `q = pi (mod 2 pi)` and changes
/// sign transversally there (`d/dq cos(q/2) != 0` at the zeros).
fn section_residual(q: f64) -> f64 {
    (q / 2.0).cos()
}

fn t_max_for(model: &ModelSpec) -> f64 {
    if model.epsilon < 1e-12 {
        // At eps = 0 legitimate returns inside the collar take at most
        // log(32 / w) time units, and below w ~ 1e-10 a "return" is pure
        // integration roundoff (the orbit tunnels through the saddle), so a
        // fixed cap is both safe and honest.
        25.0
    } else {
        10.0 * (1.0 / model.epsilon).ln()
    }
}

/// Integrates from `start` until the orbit next crosses a section inside the
/// collar; refines the crossing time by bisection and returns the event, the
/// extracted separatrix-map coordinates, and the number of accepted steps up
/// to the event.
///
/// `NotDefined` is a legitimate outcome: orbits captured by the stable
/// manifold never return within `t_max = 10 log(1/eps)`.
pub fn numeric_return_map(
    model: &ModelSpec,
    start: &PhasePoint,
) -> Result<(SectionEvent, SepMapState, usize), FlowError> {
    let w0 = pendulum_energy(start.p, start.q);
    if w0.abs() >= COLLAR_C {
        return Err(FlowError::OutOfCollar {
            w: w0,
            limit: COLLAR_C,
        });
    }
    let f = model_rhs(model);
    let t_max = t_max_for(model);
    let t_limit = start.t + t_max;
    let mut stepper = Stepper::new(&f, start.t, state_of(start), RETURN_TOL, 1.0)?;
    let mut g_prev = section_residual(start.q);
    let mut t_prev = start.t;
    let mut y_prev = state_of(start);
    while stepper.t < t_limit - 1e-12 {
        stepper.advance(t_limit)?;
        let g_now = section_residual(stepper.y[3]);
        let crossed = g_prev != 0.0 && g_now != 0.0 && g_prev.signum() != g_now.signum();
        if crossed && stepper.t - start.t > MIN_RETURN_TIME {
            // Bisect the crossing time within [t_prev, t].
            let mut lo = 0.0f64;
            let mut hi = stepper.t - t_prev;
            let mut y_mid = stepper.y;
            while hi - lo > EVENT_TIME_TOL {
                let mid = 0.5 * (lo + hi);
                y_mid = fixed_step(&f, t_prev, &y_prev, mid)?;
                if section_residual(y_mid[3]).signum() == g_prev.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let t_event = t_prev + 0.5 * (lo + hi);
            let point = point_of(&y_mid, t_event);
            let w = pendulum_energy(point.p, point.q);
            if w.abs() < COLLAR_C {
                let kind = if point.p * (point.q / 2.0).sin() > 0.0 {
                    // residual decreasing through zero
                    CrossingKind::Enter
                } else {
                    CrossingKind::Exit
                };
                let event = SectionEvent {
                    point,
                    crossing_kind: kind,
                    section_id: if point.p >= 0.0 {
                        SeparatrixBranch::Plus
                    } else {
                        SeparatrixBranch::Minus
                    },
                    time: t_event,
                };
                let state = extract_coords(model, &event)?;
                return Ok((event, state, stepper.accepted));
            }
        }
        g_prev = g_now;
        t_prev = stepper.t;
        y_prev = stepper.y;
    }
    Err(FlowError::NotDefined { t_max })
}

/// Extracts separatrix-map coordinates from a section event:
/// `eta = I`, `h = H0`, `sigma` from the loop side, `tau` the pendulum-time
/// chart along the loop (`tau = sigma log tan(q/4)`, zero on the section),
/// and `xi = phi - nu(eta) tau`. The identification carries a documented
/// `O(eps) + O(w)` coordinate error.
pub fn extract_coords(model: &ModelSpec, event: &SectionEvent) -> Result<SepMapState, FlowError> {
    let point = &event.point;
    let w = pendulum_energy(point.p, point.q);
    let limit = model.constants.kappa_star;
    if w.abs() >= limit {
        return Err(FlowError::OutOfCollar { w, limit });
    }
    let sigma = if point.p >= 0.0 {
        SeparatrixBranch::Plus
    } else {
        SeparatrixBranch::Minus
    };
    let qw = point.q.rem_euclid(2.0 * std::f64::consts::PI);
    if qw <= 0.0 || qw >= 2.0 * std::f64::consts::PI {
        return Err(FlowError::OutOfCollar { w, limit });
    }
    let tau = sigma.sign() * (qw / 4.0).tan().ln();
    // The map coordinates are the raw section values minus the first-order
    // oscillatory corrector: the energy is the full Hamiltonian value (not
    // the bare H0), and both `I` and the energy drop the half-loop part of
    // their Melnikov increments. Without this, one section-to-section step
    // mixes half-loop contributions from two different crossings and the
    // splitting-potential prediction is off at O(eps). At eps = 0 the chart
    // is exactly `(I, phi - nu tau, H0, tau)`.
    let (delta_i, delta_h) = if model.epsilon == 0.0 {
        (0.0, 0.0)
    } else {
        melnikov::half_loop_corrector(point.action, point.phi, point.t, sigma, model)?
    };
    let eta = point.action - delta_i;
    Ok(SepMapState {
        eta,
        xi: wrap_angle(point.phi - frequency_nu(eta) * tau),
        h: eval_h0(point) + model.epsilon * eval_h1(model, point)? - delta_h,
        tau,
        sigma,
    })
}

// ---------------------------------------------------------------------------
// Averaged inner flow in slow-fast variables.
// ---------------------------------------------------------------------------

/// Slow frequency `d theta / dt = k_phi nu(I) + k_t` expressed in the slow
/// action `J = I / k_phi`.
pub fn slow_frequency(j: f64, k: ResonanceVector) -> f64 {
    let k0 = k.k_phi as f64;
    k0 * frequency_nu(k0 * j) + k.k_t as f64
}

/// The resonant average as a function of the slow variables: all retained
/// harmonics are multiples of `k`, so `H1bar` depends on `(phi, t)` only
/// through `theta = k_phi phi + k_t t`.
pub fn h1bar_slow(
    j: f64,
    theta: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<f64, FlowError> {
    let k0 = k.k_phi as f64;
    Ok(melnikov::boldface_h1_frozen(k0 * j, theta / k0, model)?)
}

fn d_theta_h1bar(
    j: f64,
    theta: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<f64, FlowError> {
    let h = 1e-5;
    Ok((h1bar_slow(j, theta + h, model, k)? - h1bar_slow(j, theta - h, model, k)?) / (2.0 * h))
}

fn d_j_h1bar(
    j: f64,
    theta: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<f64, FlowError> {
    let h = 1e-5;
    Ok((h1bar_slow(j + h, theta, model, k)? - h1bar_slow(j - h, theta, model, k)?) / (2.0 * h))
}

/// First-order action response
/// `G1(J, theta, t) = nu(J)^{-1} (H1bar(J, theta) - H1bar(J, theta + nu(J) t))`
/// with the removable `nu -> 0` limit `-t d_theta H1bar` evaluated
/// analytically.
pub fn g1(
    j: f64,
    theta: f64,
    bar_t: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<f64, FlowError> {
    let nu = slow_frequency(j, k);
    if nu.abs() < 1e-7 {
        return Ok(-bar_t * d_theta_h1bar(j, theta, model, k)?);
    }
    Ok((h1bar_slow(j, theta, model, k)? - h1bar_slow(j, theta + nu * bar_t, model, k)?) / nu)
}

/// First-order angle response: the time integral of the frequency and
/// Hamiltonian perturbations along the unperturbed slow rotation,
/// `F1 = nu'(J) Int_0^t G1(J, theta, s) ds + Int_0^t d_J H1bar(J, theta + nu s) ds`.
pub fn f1(
    j: f64,
    theta: f64,
    bar_t: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<f64, FlowError> {
    if bar_t == 0.0 {
        return Ok(0.0);
    }
    let nu = slow_frequency(j, k);
    let nu_prime = (k.k_phi as f64).powi(2);
    let shear = quad::integrate(
        |s| g1(j, theta, s, model, k).unwrap_or(f64::NAN),
        0.0,
        bar_t,
        1e-10,
    )?;
    let drift = quad::integrate(
        |s| d_j_h1bar(j, theta + nu * s, model, k).unwrap_or(f64::NAN),
        0.0,
        bar_t,
        1e-10,
    )?;
    Ok(nu_prime * shear.value + drift.value)
}

/// First-order averaged prediction for the truncated resonant system:
/// returns `(theta(bar_t), J(bar_t))` to `O(eps^{11/6})` accuracy over times
/// `bar_t ~ log(1/eps)`. `rho` documents the zone half-width in the slow
/// action; callers are expected to stay within it.
pub fn averaged_inner_flow(
    j0: f64,
    theta0: f64,
    bar_t: f64,
    rho: f64,
    model: &ModelSpec,
    k: ResonanceVector,
) -> Result<(f64, f64), FlowError> {
    debug_assert!(slow_frequency(j0, k).abs() <= (k.k_phi as f64).powi(2) * rho.max(1.0));
    let eps = model.epsilon;
    let nu = slow_frequency(j0, k);
    let theta = theta0 + nu * bar_t + eps * f1(j0, theta0, bar_t, model, k)?;
    let j = j0 + eps * g1(j0, theta0, bar_t, model, k)?;
    Ok((theta, j))
}

/// Direct integration of the truncated resonant system
/// `theta' = nu(J) + eps d_J H1bar`, `J' = -eps d_theta H1bar`; the oracle
/// against which [`averaged_inner_flow`] is validated.
pub fn truncated_resonant_flow(
    j0: f64,
    theta0: f64,
    bar_t: f64,
    model: &ModelSpec,
    k: ResonanceVector,
    tol: f64,
) -> Result<(f64, f64), FlowError> {
    check_tol(tol)?;
    let eps = model.epsilon;
    let f = |_t: f64, y: &State| -> Result<State, FlowError> {
        let (j, theta) = (y[0], y[1]);
        Ok([
            -eps * d_theta_h1bar(j, theta, model, k)?,
            slow_frequency(j, k) + eps * d_j_h1bar(j, theta, model, k)?,
            0.0,
            0.0,
        ])
    };
    if bar_t == 0.0 {
        return Ok((theta0, j0));
    }
    let posneg = bar_t.signum();
    let mut stepper = Stepper::new(&f, 0.0, [j0, theta0, 0.0, 0.0], tol, posneg)?;
    while (stepper.t - bar_t) * posneg < -1e-14 * bar_t.abs().max(1.0) {
        stepper.advance(bar_t)?;
    }
    Ok((stepper.y[1], stepper.y[0]))
}

// ---------------------------------------------------------------------------
// Scaling experiment: numeric return map vs. splitting-potential prediction.
// ---------------------------------------------------------------------------

/// Which first-order prediction the experiment subtracts from the numeric
/// one-step increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingForm {
    /// `Delta eta ~ -eps d_xi Theta`, `Delta h ~ -(eps/2) d_tau Theta`.
    NonResonant,
    /// Adds the slow drift `eps B^eta` accumulated near the saddle.
    Resonant,
}

/// Scale factor between `d_tau Theta` and the per-loop energy increment:
/// the phase convention puts `tau = -t_c / 2`, so one time-derivative of the
/// splitting integral equals `-(1/2) d_tau Theta`.
pub const H_DRIFT_SCALE: f64 = -0.5;

/// Mean absolute one-step prediction error at a single `eps`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub epsilon: f64,
    pub mean_abs_err_eta: f64,
    pub mean_abs_err_h: f64,
}

/// Result of [`scaling_experiment`]: per-rung errors and fitted log-log
/// slopes. First-order accuracy of the map corresponds to slopes well above
/// 1; the theorem remainders predict about 5/3.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub form: ScalingForm,
    pub eta0: f64,
    pub samples: usize,
    pub points: Vec<ScalingPoint>,
    pub slope_eta: f64,
    pub slope_h: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx
}

fn unit_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let h = crate::diffusion::splitmix64(
        crate::diffusion::splitmix64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(index),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// One-step prediction errors `(|err_eta|, |err_h|)` for a single start on
/// the section `q = pi`, `t = 0`, rotor phase `xi`, pendulum energy `w`.
fn one_step_error(
    model: &ModelSpec,
    form: ScalingForm,
    eta0: f64,
    xi: f64,
    w: f64,
) -> Result<(f64, f64), FlowError> {
    let eps = model.epsilon;
    let start = PhasePoint::new(eta0, xi, (2.0 * w + 4.0).sqrt(), std::f64::consts::PI, 0.0);
    let ev0 = SectionEvent {
        point: start,
        crossing_kind: CrossingKind::Exit,
        section_id: SeparatrixBranch::Plus,
        time: 0.0,
    };
    let s0 = extract_coords(model, &ev0)?;
    let (_, s1, _) = numeric_return_map(model, &start)?;
    let (d_xi, d_tau, _) =
        melnikov::theta_partials(s0.eta, xi, 0.0, SeparatrixBranch::Plus, model)?;
    let mut pred_eta = -eps * d_xi;
    if form == ScalingForm::Resonant {
        // The map's own normal-form pendulum energy: the corrected h (which
        // carries eps H1 at the section) minus E(eta) and the surviving
        // resonant average. Using the raw section value of p^2/2 + cos q - 1
        // here would misestimate the dwell energy, hence the transit time,
        // by O(eps).
        let w0 = s0.h
            - hamiltonian::energy_e(s0.eta)
            - eps * melnikov::boldface_h1_frozen(s0.eta, s0.xi, model)?;
        pred_eta += eps * crate::map::b_eta(&s0, w0, model)?;
    }
    let pred_h = H_DRIFT_SCALE * eps * d_tau;
    Ok((
        (s1.eta - s0.eta - pred_eta).abs(),
        (s1.h - s0.h - pred_h).abs(),
    ))
}

/// Numeric-vs-predicted one-step scaling over an `eps` ladder.
///
/// For each `eps`, `samples` starts are placed on the section `q = pi` at
/// `t = 0` with hashed uniform rotor phases and pendulum energy `w` inside
/// the regime window (`0.1 eps` non-resonant, `eps` resonant). The numeric
/// return map supplies the true increments of `(eta, h)`; the splitting
/// potential (plus `B^eta` in the resonant form) supplies the prediction.
pub fn scaling_experiment(
    model0: &ModelSpec,
    form: ScalingForm,
    eta0: f64,
    eps_list: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ScalingReport, FlowError> {
    use rayon::prelude::*;
    let mut points = Vec::with_capacity(eps_list.len());
    for (rung, &eps) in eps_list.iter().enumerate() {
        let model = model0.clone().with_epsilon(eps);
        let w = match form {
            ScalingForm::NonResonant => 0.1 * eps,
            ScalingForm::Resonant => eps,
        };
        let errs = (0..samples)
            .into_par_iter()
            .map(|i| {
                let xi =
                    2.0 * std::f64::consts::PI * unit_uniform(seed, rung as u64, i as u64);
                one_step_error(&model, form, eta0, xi, w)
            })
            .collect::<Result<Vec<_>, FlowError>>()?;
        let n = errs.len() as f64;
        points.push(ScalingPoint {
            epsilon: eps,
            mean_abs_err_eta: errs.iter().map(|e| e.0).sum::<f64>() / n,
            mean_abs_err_h: errs.iter().map(|e| e.1).sum::<f64>() / n,
        });
    }
    let eps_v: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
    let eta_v: Vec<f64> = points.iter().map(|p| p.mean_abs_err_eta).collect();
    let h_v: Vec<f64> = points.iter().map(|p| p.mean_abs_err_h).collect();
    Ok(ScalingReport {
        form,
        eta0,
        samples,
        slope_eta: log_log_slope(&eps_v, &eta_v),
        slope_h: log_log_slope(&eps_v, &h_v),
        points,
    })
}
