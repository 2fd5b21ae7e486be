//! The model family: rotor-pendulum Hamiltonians `H0 + eps * H1` with
//! `H0 = I^2/2 + p^2/2 + cos q - 1` and `H1` a real trigonometric polynomial
//! in the angles `(q, phi, t)` whose coefficients are polynomials in `(I, p)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Tolerance on the imaginary part of trigonometric sums; anything larger
/// signals a broken conjugate-pair invariant.
pub const REALITY_TOL: f64 = 1e-12;

/// Default upper bound on the perturbation strength.
pub const DEFAULT_EPSILON_MAX: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("trig sum is not real (imaginary part {0:.3e}); conjugate-pair invariant broken")]
    NonRealValue(f64),
    #[error("conjugate term missing for harmonic ({0}, {1}, {2})")]
    MissingConjugate(i32, i32, i32),
    #[error("harmonic order {got} exceeds declared degree {degree}")]
    DegreeExceeded { got: i32, degree: u32 },
    #[error("action window is empty: [{0}, {1}]")]
    EmptyActionWindow(f64, f64),
    #[error("epsilon {0} exceeds the configured maximum {1}")]
    EpsilonTooLarge(f64, f64),
    #[error("saddle linearization requires real eigenvalues of opposite sign (det = {0})")]
    NotHyperbolic(f64),
    #[error("model file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{what} did not converge (residual {residual:.3e})")]
    NonConvergent { what: String, residual: f64 },
}

/// One monomial `c * I^i * p^j` of a complex coefficient polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: (f64, f64),
    pub i_pow: u32,
    pub p_pow: u32,
}

impl Monomial {
    fn c(&self) -> Complex64 {
        Complex64::new(self.coeff.0, self.coeff.1)
    }
}

/// Complex polynomial in `(I, p)`, stored as a monomial table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoeffPoly {
    pub monomials: Vec<Monomial>,
}

impl CoeffPoly {
    pub fn constant(re: f64, im: f64) -> Self {
        Self {
            monomials: vec![Monomial {
                coeff: (re, im),
                i_pow: 0,
                p_pow: 0,
            }],
        }
    }

    pub fn eval(&self, action: f64, p: f64) -> Complex64 {
        self.monomials
            .iter()
            .map(|m| m.c() * action.powi(m.i_pow as i32) * p.powi(m.p_pow as i32))
            .sum()
    }

    pub fn d_action(&self, action: f64, p: f64) -> Complex64 {
        self.monomials
            .iter()
            .filter(|m| m.i_pow > 0)
            .map(|m| {
                m.c() * (m.i_pow as f64)
                    * action.powi(m.i_pow as i32 - 1)
                    * p.powi(m.p_pow as i32)
            })
            .sum()
    }

    pub fn d_p(&self, action: f64, p: f64) -> Complex64 {
        self.monomials
            .iter()
            .filter(|m| m.p_pow > 0)
            .map(|m| {
                m.c() * (m.p_pow as f64)
                    * action.powi(m.i_pow as i32)
                    * p.powi(m.p_pow as i32 - 1)
            })
            .sum()
    }

    /// Second derivative in `p`.
    pub fn d2_p(&self, action: f64, p: f64) -> Complex64 {
        self.monomials
            .iter()
            .filter(|m| m.p_pow > 1)
            .map(|m| {
                m.c() * (m.p_pow as f64) * (m.p_pow as f64 - 1.0)
                    * action.powi(m.i_pow as i32)
                    * p.powi(m.p_pow as i32 - 2)
            })
            .sum()
    }

    pub fn conj(&self) -> Self {
        Self {
            monomials: self
                .monomials
                .iter()
                .map(|m| Monomial {
                    coeff: (m.coeff.0, -m.coeff.1),
                    ..*m
                })
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.monomials
            .iter()
            .all(|m| m.coeff.0 == 0.0 && m.coeff.1 == 0.0)
    }
}

/// One exponential term `c(I, p) * exp(i (k_q q + k_phi phi + k_t t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub k_q: i32,
    pub k_phi: i32,
    pub k_t: i32,
    pub coeff: CoeffPoly,
}

/// Finite Fourier representation of the perturbation
/// `H1 = P(I, p, e^{iq}, e^{i phi}, e^{it})`.
///
/// The term list must be closed under conjugation (the term
/// `(-k_q, -k_phi, -k_t, conj c)` accompanies every `(k_q, k_phi, k_t, c)`)
/// so that evaluation is real for real inputs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrigPerturbation {
    pub terms: Vec<TrigTerm>,
    /// Declared trigonometric degree `N`: `|k_phi| <= N`, `|k_t| <= N`.
    pub degree: u32,
}

impl TrigPerturbation {
    pub fn new(degree: u32) -> Self {
        Self {
            terms: Vec::new(),
            degree,
        }
    }

    /// Adds `amp * cos(k_q q + k_phi phi + k_t t)` as a conjugate pair.
    pub fn add_cos(&mut self, k_q: i32, k_phi: i32, k_t: i32, amp: f64) -> &mut Self {
        self.add_pair(k_q, k_phi, k_t, CoeffPoly::constant(amp / 2.0, 0.0))
    }

    /// Adds `amp * sin(k_q q + k_phi phi + k_t t)` as a conjugate pair.
    pub fn add_sin(&mut self, k_q: i32, k_phi: i32, k_t: i32, amp: f64) -> &mut Self {
        self.add_pair(k_q, k_phi, k_t, CoeffPoly::constant(0.0, -amp / 2.0))
    }

    /// Adds the term `c(I,p) e^{i(k_q q + k_phi phi + k_t t)}` together with
    /// its complex conjugate.
    pub fn add_pair(&mut self, k_q: i32, k_phi: i32, k_t: i32, coeff: CoeffPoly) -> &mut Self {
        self.push_term(k_q, k_phi, k_t, coeff.clone());
        self.push_term(-k_q, -k_phi, -k_t, coeff.conj());
        self
    }

    fn push_term(&mut self, k_q: i32, k_phi: i32, k_t: i32, coeff: CoeffPoly) {
        if let Some(t) = self
            .terms
            .iter_mut()
            .find(|t| t.k_q == k_q && t.k_phi == k_phi && t.k_t == k_t)
        {
            t.coeff.monomials.extend(coeff.monomials);
        } else {
            self.terms.push(TrigTerm {
                k_q,
                k_phi,
                k_t,
                coeff,
            });
        }
    }

    /// Verifies the conjugate-pair and degree invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        for t in &self.terms {
            if t.k_phi.unsigned_abs() > self.degree {
                return Err(ModelError::DegreeExceeded {
                    got: t.k_phi,
                    degree: self.degree,
                });
            }
            if t.k_t.unsigned_abs() > self.degree {
                return Err(ModelError::DegreeExceeded {
                    got: t.k_t,
                    degree: self.degree,
                });
            }
            let mate = self
                .terms
                .iter()
                .find(|s| s.k_q == -t.k_q && s.k_phi == -t.k_phi && s.k_t == -t.k_t);
            let ok = match mate {
                Some(s) => {
                    // Compare monomial tables after conjugation.
                    let mut a = s.coeff.conj().monomials;
                    let mut b = t.coeff.monomials.clone();
                    let key = |m: &Monomial| (m.i_pow, m.p_pow);
                    a.sort_by_key(key);
                    b.sort_by_key(key);
                    a.len() == b.len()
                        && a.iter().zip(&b).all(|(x, y)| {
                            (x.coeff.0 - y.coeff.0).abs() < 1e-15
                                && (x.coeff.1 - y.coeff.1).abs() < 1e-15
                                && key(x) == key(y)
                        })
                }
                None => t.coeff.is_zero(),
            };
            if !ok {
                return Err(ModelError::MissingConjugate(t.k_q, t.k_phi, t.k_t));
            }
        }
        Ok(())
    }

    /// The classical Arnold perturbation `P = (1 - cos q)(cos phi + cos t)`.
    pub fn classical_arnold() -> Self {
        let mut p = Self::new(1);
        p.add_cos(0, 1, 0, 1.0)
            .add_cos(0, 0, 1, 1.0)
            .add_cos(1, 1, 0, -0.5)
            .add_cos(1, -1, 0, -0.5)
            .add_cos(1, 0, 1, -0.5)
            .add_cos(1, 0, -1, -0.5);
        p
    }

    /// `(1 - cos q) cos(k_phi phi + k_t t)`, the single-harmonic splitting
    /// test model.
    pub fn pendulum_times_cos(k_phi: i32, k_t: i32, amp: f64) -> Self {
        let degree = k_phi.unsigned_abs().max(k_t.unsigned_abs());
        let mut p = Self::new(degree);
        p.add_cos(0, k_phi, k_t, amp)
            .add_cos(1, k_phi, k_t, -amp / 2.0)
            .add_cos(-1, k_phi, k_t, -amp / 2.0);
        p
    }
}

/// Phase-space state `(I, phi, p, q, t)`; angles live in `[0, 2 pi)` after
/// [`PhasePoint::wrapped`], time is tracked unreduced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub action: f64,
    pub phi: f64,
    pub p: f64,
    pub q: f64,
    pub t: f64,
}

impl PhasePoint {
    pub fn new(action: f64, phi: f64, p: f64, q: f64, t: f64) -> Self {
        Self {
            action,
            phi,
            p,
            q,
            t,
        }
    }

    /// Wraps both angles to `[0, 2 pi)`. Idempotent.
    pub fn wrapped(mut self) -> Self {
        self.phi = wrap_angle(self.phi);
        self.q = wrap_angle(self.q);
        self
    }
}

/// Reduces an angle to `[0, 2 pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r == TAU {
        0.0
    } else {
        r
    }
}

/// Reduces an angle to `(-pi, pi]`.
pub fn wrap_angle_pm(x: f64) -> f64 {
    let r = wrap_angle(x);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Constants controlling the asymptotic regime windows of the separatrix map
/// and the normal-form collar; all are epsilon-independent by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeConstants {
    /// The constant `c` of the window conditions `c < |w| e^{lambda tbar} < 1/c`
    /// and the collar `|H0 - E(I)| < c`; must lie in `(0, 1)`.
    pub c: f64,
    /// Exponent of the lower window bound `c^{-1} eps^{1+a} < |w|`.
    pub a: f64,
    /// Half-width of the normal-form neighborhood `|h - E(eta)|` accepted by
    /// the `w` functions.
    pub kappa_star: f64,
}

impl Default for RegimeConstants {
    fn default() -> Self {
        Self {
            c: 0.2,
            a: 1.0,
            kappa_star: 0.45,
        }
    }
}

/// Full model description: perturbation, strength, action window and the
/// resonance-zone half width `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub perturbation: TrigPerturbation,
    pub epsilon: f64,
    pub action_window: (f64, f64),
    pub beta: f64,
    #[serde(default)]
    pub constants: RegimeConstants,
    #[serde(default = "default_epsilon_max")]
    pub epsilon_max: f64,
}

fn default_epsilon_max() -> f64 {
    DEFAULT_EPSILON_MAX
}

impl ModelSpec {
    pub fn new(
        perturbation: TrigPerturbation,
        epsilon: f64,
        action_window: (f64, f64),
        beta: f64,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            perturbation,
            epsilon,
            action_window,
            beta,
            constants: RegimeConstants::default(),
            epsilon_max: DEFAULT_EPSILON_MAX,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.action_window.0 >= self.action_window.1 {
            return Err(ModelError::EmptyActionWindow(
                self.action_window.0,
                self.action_window.1,
            ));
        }
        if self.epsilon >= self.epsilon_max {
            return Err(ModelError::EpsilonTooLarge(self.epsilon, self.epsilon_max));
        }
        self.perturbation.validate()
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Serializes to the model-file text format: `key = value` lines plus
    /// one `term` row per Fourier harmonic,
    ///
    /// ```text
    /// term <k_q> <k_phi> <k_t> <re>,<im>:<i_pow>,<p_pow>[+<monomial>...]
    /// ```
    ///
    /// Floats use Rust's shortest round-trip formatting, so
    /// parse -> serialize -> parse is a bit-exact identity.
    pub fn to_model_file(&self) -> String {
        let mut out = String::new();
        out.push_str("# separatrix model file\n");
        out.push_str(&format!("epsilon = {}\n", self.epsilon));
        out.push_str(&format!("epsilon_max = {}\n", self.epsilon_max));
        out.push_str(&format!("beta = {}\n", self.beta));
        out.push_str(&format!(
            "action_window = {} {}\n",
            self.action_window.0, self.action_window.1
        ));
        out.push_str(&format!("degree = {}\n", self.perturbation.degree));
        out.push_str(&format!("regime_c = {}\n", self.constants.c));
        out.push_str(&format!("regime_a = {}\n", self.constants.a));
        out.push_str(&format!("kappa_star = {}\n", self.constants.kappa_star));
        for t in &self.perturbation.terms {
            let monos: Vec<String> = t
                .coeff
                .monomials
                .iter()
                .map(|m| format!("{},{}:{},{}", m.coeff.0, m.coeff.1, m.i_pow, m.p_pow))
                .collect();
            out.push_str(&format!(
                "term {} {} {} {}\n",
                t.k_q,
                t.k_phi,
                t.k_t,
                monos.join("+")
            ));
        }
        out
    }

    /// Parses the model-file text format produced by [`Self::to_model_file`].
    pub fn from_model_file(text: &str) -> Result<Self, ModelError> {
        fn err(line: usize, msg: impl Into<String>) -> ModelError {
            ModelError::Parse {
                line,
                msg: msg.into(),
            }
        }
        fn parse_f64(s: &str, line: usize) -> Result<f64, ModelError> {
            s.parse()
                .map_err(|_| err(line, format!("bad float {s:?}")))
        }
        fn parse_int<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, ModelError> {
            s.parse()
                .map_err(|_| err(line, format!("bad integer {s:?}")))
        }

        let mut epsilon = None;
        let mut epsilon_max = DEFAULT_EPSILON_MAX;
        let mut beta = None;
        let mut window = None;
        let mut degree = None;
        let mut constants = RegimeConstants::default();
        let mut terms: Vec<TrigTerm> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("term ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() != 4 {
                    return Err(err(line_no, "term needs: k_q k_phi k_t monomials"));
                }
                let mut monomials = Vec::new();
                for mono in fields[3].split('+') {
                    let (coeff_part, pow_part) = mono
                        .split_once(':')
                        .ok_or_else(|| err(line_no, format!("bad monomial {mono:?}")))?;
                    let (re, im) = coeff_part
                        .split_once(',')
                        .ok_or_else(|| err(line_no, format!("bad coefficient {coeff_part:?}")))?;
                    let (i_pow, p_pow) = pow_part
                        .split_once(',')
                        .ok_or_else(|| err(line_no, format!("bad powers {pow_part:?}")))?;
                    monomials.push(Monomial {
                        coeff: (parse_f64(re, line_no)?, parse_f64(im, line_no)?),
                        i_pow: parse_int(i_pow, line_no)?,
                        p_pow: parse_int(p_pow, line_no)?,
                    });
                }
                terms.push(TrigTerm {
                    k_q: parse_int(fields[0], line_no)?,
                    k_phi: parse_int(fields[1], line_no)?,
                    k_t: parse_int(fields[2], line_no)?,
                    coeff: CoeffPoly { monomials },
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, "expected `key = value` or `term ...`"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "epsilon" => epsilon = Some(parse_f64(value, line_no)?),
                "epsilon_max" => epsilon_max = parse_f64(value, line_no)?,
                "beta" => beta = Some(parse_f64(value, line_no)?),
                "action_window" => {
                    let (lo, hi) = value
                        .split_once(' ')
                        .ok_or_else(|| err(line_no, "action_window needs two values"))?;
                    window = Some((parse_f64(lo.trim(), line_no)?, parse_f64(hi.trim(), line_no)?));
                }
                "degree" => degree = Some(parse_int(value, line_no)?),
                "regime_c" => constants.c = parse_f64(value, line_no)?,
                "regime_a" => constants.a = parse_f64(value, line_no)?,
                "kappa_star" => constants.kappa_star = parse_f64(value, line_no)?,
                other => return Err(err(line_no, format!("unknown key {other:?}"))),
            }
        }

        let missing = |what: &str| err(0, format!("missing required key {what:?}"));
        let spec = Self {
            perturbation: TrigPerturbation {
                terms,
                degree: degree.ok_or_else(|| missing("degree"))?,
            },
            epsilon: epsilon.ok_or_else(|| missing("epsilon"))?,
            action_window: window.ok_or_else(|| missing("action_window"))?,
            beta: beta.ok_or_else(|| missing("beta"))?,
            constants,
            epsilon_max,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `E(I) = H0(I, 0, 0) = I^2 / 2`.
pub fn energy_e(action: f64) -> f64 {
    action * action / 2.0
}

/// `nu(I) = dE/dI = I` for the Arnold family.
pub fn frequency_nu(action: f64) -> f64 {
    action
}

/// Pendulum energy `p^2/2 + cos q - 1`.
pub fn pendulum_energy(p: f64, q: f64) -> f64 {
    p * p / 2.0 + q.cos() - 1.0
}

/// `H0(I, p, q) = I^2/2 + p^2/2 + cos q - 1`.
pub fn eval_h0(point: &PhasePoint) -> f64 {
    energy_e(point.action) + pendulum_energy(point.p, point.q)
}

fn trig_sum<F>(pert: &TrigPerturbation, point: &PhasePoint, f: F) -> Result<f64, ModelError>
where
    F: Fn(&TrigTerm) -> Complex64,
{
    let mut acc = Complex64::new(0.0, 0.0);
    let mut scale: f64 = 0.0;
    for term in &pert.terms {
        let phase = term.k_q as f64 * point.q
            + term.k_phi as f64 * point.phi
            + term.k_t as f64 * point.t;
        let v = f(term) * Complex64::from_polar(1.0, phase);
        scale = scale.max(v.norm());
        acc += v;
    }
    if acc.im.abs() > REALITY_TOL * scale.max(1.0) {
        return Err(ModelError::NonRealValue(acc.im));
    }
    Ok(acc.re)
}

/// Evaluates `H1` at a phase point. Errors if the conjugate-pair invariant
/// is broken (non-real result).
pub fn eval_h1(model: &ModelSpec, point: &PhasePoint) -> Result<f64, ModelError> {
    trig_sum(&model.perturbation, point, |t| {
        t.coeff.eval(point.action, point.p)
    })
}

/// Analytic partial derivatives of `H1` in `(I, phi, p, q, t)`.
pub fn grad_h1(model: &ModelSpec, point: &PhasePoint) -> Result<[f64; 5], ModelError> {
    let p = &model.perturbation;
    let d_i = trig_sum(p, point, |t| t.coeff.d_action(point.action, point.p))?;
    let d_phi = trig_sum(p, point, |t| {
        t.coeff.eval(point.action, point.p) * Complex64::new(0.0, t.k_phi as f64)
    })?;
    let d_p = trig_sum(p, point, |t| t.coeff.d_p(point.action, point.p))?;
    let d_q = trig_sum(p, point, |t| {
        t.coeff.eval(point.action, point.p) * Complex64::new(0.0, t.k_q as f64)
    })?;
    let d_t = trig_sum(p, point, |t| {
        t.coeff.eval(point.action, point.p) * Complex64::new(0.0, t.k_t as f64)
    })?;
    Ok([d_i, d_phi, d_p, d_q, d_t])
}

/// Canonical vector field `(İ, φ̇, ṗ, q̇)` of `H0 + eps H1`.
pub fn vector_field(model: &ModelSpec, point: &PhasePoint) -> Result<[f64; 4], ModelError> {
    let eps = model.epsilon;
    if eps == 0.0 {
        return Ok([0.0, point.action, point.q.sin(), point.p]);
    }
    let [d_i, d_phi, d_p, d_q, _] = grad_h1(model, point)?;
    Ok([
        -eps * d_phi,
        point.action + eps * d_i,
        point.q.sin() - eps * d_q,
        point.p + eps * d_p,
    ])
}

/// Saddle linearization data: the matrix `Lambda`, its positive eigenvalue
/// `lambda`, and left eigenvectors `a_plus`, `a_minus` normalized so the
/// matrix with them as columns has determinant one and equal norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleData {
    pub matrix: [[f64; 2]; 2],
    pub lambda: f64,
    pub a_plus: [f64; 2],
    pub a_minus: [f64; 2],
}

/// Builds `Lambda(I)` from the second derivatives of `H0` at the saddle
/// `(p, q) = (0, 0)` and solves the left eigenproblem.
pub fn saddle_linearization(_action: f64) -> Result<SaddleData, ModelError> {
    // Second derivatives of the pendulum part at the saddle.
    let h_pp = 1.0;
    let h_qq = -1.0;
    let h_pq = 0.0;
    let m = [[-h_pq, -h_qq], [h_pp, h_pq]];
    // Trace is zero by construction; eigenvalues are +-sqrt(-det).
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det >= 0.0 {
        return Err(ModelError::NotHyperbolic(det));
    }
    let lambda = (-det).sqrt();
    // Left eigenvector for +-lambda: v M = s v  =>  v = (m10, s - m00) up to
    // scale (checked non-degenerate for trace-free hyperbolic M).
    let raw = |s: f64| -> [f64; 2] {
        let v = [m[1][0], s - m[0][0]];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    };
    let mut a_plus = raw(lambda);
    let a_minus = raw(-lambda);
    // det of the column matrix (a_plus | a_minus); rescale the pair
    // symmetrically so it becomes one while keeping equal norms.
    let d = a_plus[0] * a_minus[1] - a_plus[1] * a_minus[0];
    if d.abs() < 1e-14 {
        return Err(ModelError::NotHyperbolic(det));
    }
    let s = 1.0 / d.abs().sqrt();
    let sign = d.signum();
    a_plus = [sign * s * a_plus[0], sign * s * a_plus[1]];
    let a_minus = [s * a_minus[0], s * a_minus[1]];
    Ok(SaddleData {
        matrix: m,
        lambda,
        a_plus,
        a_minus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arnold_model(eps: f64) -> ModelSpec {
        ModelSpec::new(
            TrigPerturbation::classical_arnold(),
            eps,
            (-2.0, 2.0),
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let mut model = arnold_model(1e-3);
        // Exercise non-trivial monomials and awkward floats.
        model
            .perturbation
            .add_pair(1, 1, -1, CoeffPoly {
                monomials: vec![Monomial {
                    coeff: (0.1 + 0.2, -1.0 / 3.0),
                    i_pow: 1,
                    p_pow: 2,
                }],
            });
        let text = model.to_model_file();
        let parsed = ModelSpec::from_model_file(&text).expect("parses");
        assert_eq!(parsed.epsilon.to_bits(), model.epsilon.to_bits());
        assert_eq!(parsed.beta.to_bits(), model.beta.to_bits());
        assert_eq!(parsed.perturbation.terms, model.perturbation.terms);
        // Serialize -> parse -> serialize is the identity on bytes.
        assert_eq!(parsed.to_model_file(), text);
    }

    #[test]
    fn model_file_reports_parse_errors_with_line_numbers() {
        let bad = "epsilon = 1e-3\nbeta = nope\n";
        match ModelSpec::from_model_file(bad) {
            Err(ModelError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }
        match ModelSpec::from_model_file("epsilon = 1e-3\n") {
            Err(ModelError::Parse { .. }) => {}
            other => panic!("expected missing-key error, got {other:?}"),
        }
    }

    #[test]
    fn h0_values() {
        assert_eq!(eval_h0(&PhasePoint::new(0.0, 0.0, 0.0, 0.0, 0.0)), 0.0);
        assert_eq!(eval_h0(&PhasePoint::new(1.0, 0.0, 0.0, 0.0, 0.0)), 0.5);
        assert!((eval_h0(&PhasePoint::new(0.0, 0.0, 0.0, PI, 0.0)) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn h1_classical_arnold() {
        let model = arnold_model(0.0);
        // (1 - cos q) factor vanishes at q = 0.
        for phi in [0.0, 1.3, 4.0] {
            let v = eval_h1(&model, &PhasePoint::new(0.3, phi, 0.1, 0.0, 2.0)).unwrap();
            assert!(v.abs() < 1e-14, "got {v}");
        }
        // (1 - cos pi)(1 + 1) = 4.
        let v = eval_h1(&model, &PhasePoint::new(0.0, 0.0, 0.0, PI, 0.0)).unwrap();
        assert!((v - 4.0).abs() < 1e-13);
        // Single harmonic cos(phi) at phi = pi/2.
        let mut single = TrigPerturbation::new(1);
        single.add_cos(0, 1, 0, 1.0);
        let m = ModelSpec::new(single, 0.0, (-1.0, 1.0), 0.25).unwrap();
        let v = eval_h1(&m, &PhasePoint::new(0.0, PI / 2.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn vector_field_unperturbed() {
        let model = arnold_model(0.0);
        let v = vector_field(&model, &PhasePoint::new(1.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(v, [0.0, 1.0, 0.0, 0.0]);
        let v = vector_field(&model, &PhasePoint::new(0.0, 0.0, 2.0, PI, 0.0)).unwrap();
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!(v[2].abs() < 1e-15);
        assert!((v[3] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn action_rate_vanishes_at_saddle_angle() {
        // Perturbation proportional to (1 - cos q) kills d_phi H1 at q = 0.
        let model = arnold_model(0.01);
        let v = vector_field(&model, &PhasePoint::new(0.7, 1.1, 0.3, 0.0, 0.5)).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = arnold_model(0.01);
        let h = 1e-5;
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let pt = PhasePoint::new(
                2.0 * next() - 1.0,
                TAU * next(),
                2.0 * next() - 1.0,
                TAU * next(),
                10.0 * next(),
            );
            let g = grad_h1(&model, &pt).unwrap();
            let f = |dp: [f64; 5]| {
                eval_h1(
                    &model,
                    &PhasePoint::new(
                        pt.action + dp[0],
                        pt.phi + dp[1],
                        pt.p + dp[2],
                        pt.q + dp[3],
                        pt.t + dp[4],
                    ),
                )
                .unwrap()
            };
            for i in 0..5 {
                let mut dp = [0.0; 5];
                dp[i] = h;
                let plus = f(dp);
                dp[i] = -h;
                let minus = f(dp);
                let fd = (plus - minus) / (2.0 * h);
                let scale = g[i].abs().max(1.0);
                assert!(
                    (fd - g[i]).abs() / scale < 1e-6,
                    "component {i}: fd {fd} vs analytic {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn nu_is_derivative_of_e() {
        // (E(I+h) - E(I-h)) / 2h - nu(I) -> 0 at rate h^2 (here: exactly,
        // E is quadratic).
        for action in [0.0, 1.5, -2.0] {
            assert_eq!(frequency_nu(action), action);
            for h in [1e-2, 1e-3] {
                let fd = (energy_e(action + h) - energy_e(action - h)) / (2.0 * h);
                assert!((fd - frequency_nu(action)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saddle_linearization_arnold() {
        let s = saddle_linearization(0.7).unwrap();
        assert_eq!(s.matrix, [[0.0, 1.0], [1.0, 0.0]]);
        assert!((s.lambda - 1.0).abs() < 1e-15);
        assert!((s.matrix[0][0] + s.matrix[1][1]).abs() < 1e-15);
        // Left-eigenvector residuals.
        for (a, sign) in [(s.a_plus, 1.0), (s.a_minus, -1.0)] {
            let r0 = a[0] * s.matrix[0][0] + a[1] * s.matrix[1][0] - sign * s.lambda * a[0];
            let r1 = a[0] * s.matrix[0][1] + a[1] * s.matrix[1][1] - sign * s.lambda * a[1];
            assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
        }
        // Determinant-one normalization and the symmetric norm split.
        let det = s.a_plus[0] * s.a_minus[1] - s.a_plus[1] * s.a_minus[0];
        assert!((det - 1.0).abs() < 1e-12);
        let np = (s.a_plus[0].powi(2) + s.a_plus[1].powi(2)).sqrt();
        let nm = (s.a_minus[0].powi(2) + s.a_minus[1].powi(2)).sqrt();
        assert!((np - nm).abs() < 1e-12);
    }

    #[test]
    fn wrap_is_idempotent() {
        for x in [-7.3, 0.0, 1.0, TAU, 100.0, -TAU] {
            let w = wrap_angle(x);
            assert!((0.0..TAU).contains(&w));
            assert_eq!(wrap_angle(w), w);
        }
    }

    #[test]
    fn validate_rejects_broken_conjugates() {
        let mut p = TrigPerturbation::new(1);
        p.push_term(0, 1, 0, CoeffPoly::constant(0.5, 0.0));
        assert!(p.validate().is_err());
        let m = ModelSpec {
            perturbation: p,
            epsilon: 0.0,
            action_window: (-1.0, 1.0),
            beta: 0.25,
            constants: RegimeConstants::default(),
            epsilon_max: DEFAULT_EPSILON_MAX,
        };
        assert!(m.validate().is_err());
        // Evaluation of the broken model reports a non-real value.
        let err = eval_h1(&m, &PhasePoint::new(0.0, 0.4, 0.0, 0.0, 0.0));
        assert!(matches!(err, Err(ModelError::NonRealValue(_))));
    }
}
