//! Local stabilizer synthesis, quadratic Lyapunov certificates and the
//! globally stabilizing dynamic feedback.
//!
//! The certificate is the quadratic `V(x) = x^T P x` with `P` solving the
//! closed-loop Lyapunov equation `A_cl^T P + P A_cl = -Q`; its guaranteed
//! decay rate is `c = lambda_min(Q) / lambda_max(P)`, so `Vdot <= -c V` on
//! the certified sublevel set `D(r*) = {V <= r*}`. Every later inequality is
//! the rate-`c` analogue of the unit-rate original: the correction gain
//!
//! ```text
//! alpha(x, xhat) = c * max{V(xhat), 1}
//!                / (2 (1 + |dV/dx(xhat)|) (1 + |grad_d2(x, xhat)|))
//! ```
//!
//! is positive, locally Lipschitz, and gives the correction
//! `k = -alpha * grad_d2` the bound
//! `|k| <= c max{V(xhat), 1} / (2 (1 + |dV/dx(xhat)|))`, which keeps the
//! observer component inside a compact sublevel set while the distance term
//! contracts. Norms in these formulas are Euclidean.

use thiserror::Error;

use crate::expr::{jacobian, EvalError, Expr, Wrt};
use crate::geometry::{grad_d2, GeometryError, MetricField};
use crate::linalg::{
    self, dot, kron, lu_factor, norm2, sym_eigen, unvec_col, vec_col, Mat,
};
use crate::system::{SystemError, SystemSpec};

const LYAP_RESIDUAL_TOL: f64 = 1e-9;
const CERT_DECAY_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StabilizerError {
    #[error("matrix is not Hurwitz (the Lyapunov criterion failed: {0})")]
    NotHurwitz(String),
    #[error("Q must be symmetric positive definite (min eigenvalue {0:.3e})")]
    BadQ(f64),
    #[error("Lyapunov solve left residual {0:.3e}, system is near-singular")]
    SingularLyapunov(f64),
    #[error("Riccati iteration failed: {0}")]
    RiccatiFailed(String),
    #[error("(A, B) pair appears uncontrollable: {0}")]
    Uncontrollable(String),
    #[error("feedback must vanish at the origin, got |lambda(0)| = {0:.3e}")]
    FeedbackNotVanishing(f64),
    #[error("feedback dimension mismatch: expected {expected} outputs, got {got}")]
    FeedbackDim { expected: usize, got: usize },
    #[error(
        "no certifiable decay level found (sampled decay check failed down to \
         level {failing_level:.3e})"
    )]
    NoDecayLevel { failing_level: f64 },
    #[error("weights must be positive, got q = {q}, r = {r}")]
    BadWeights { q: f64, r: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Solve `a^T X + X a = c` by the vectorized dense linear system
/// `(I (x) a^T + a^T (x) I) vec(X) = vec(c)`. No definiteness checks.
fn lyap_raw(a: &Mat, c: &Mat) -> Result<Mat, StabilizerError> {
    let n = a.rows();
    let at = a.transpose();
    let id = Mat::identity(n);
    let system = kron(&id, &at).add(&kron(&at, &id));
    let x = lu_factor(&system)?.solve(&vec_col(c));
    let x = unvec_col(&x, n);
    Ok(x.sym_part())
}

/// Solve the Lyapunov equation `A_cl^T P + P A_cl = -Q` for symmetric
/// positive definite `Q`.
///
/// The Hurwitz precondition is verified by the solution itself: with
/// `Q > 0`, a solve that succeeds with `P > 0` and small residual certifies
/// that `A_cl` is Hurwitz, and conversely. Marginal spectra make the
/// vectorized system singular and are reported as not Hurwitz.
pub fn solve_lyapunov(a_cl: &Mat, q: &Mat) -> Result<Mat, StabilizerError> {
    assert!(a_cl.is_square() && q.is_square());
    assert_eq!(a_cl.rows(), q.rows());
    let q_min = sym_eigen(&q.sym_part()).min();
    if q_min <= 0.0 {
        return Err(StabilizerError::BadQ(q_min));
    }
    let p = match lyap_raw(a_cl, &q.scale(-1.0)) {
        Ok(p) => p,
        Err(StabilizerError::Linalg(linalg::LinalgError::Singular { .. })) => {
            return Err(StabilizerError::NotHurwitz(
                "eigenvalue pair summing to zero (marginal spectrum)".into(),
            ))
        }
        Err(e) => return Err(e),
    };
    let residual = a_cl
        .transpose()
        .mul(&p)
        .add(&p.mul(a_cl))
        .add(q)
        .max_abs();
    let scale = 1.0 + q.max_abs().max(p.max_abs());
    if residual > LYAP_RESIDUAL_TOL * scale {
        return Err(StabilizerError::SingularLyapunov(residual));
    }
    let p_min = sym_eigen(&p).min();
    if p_min <= 1e-10 {
        return Err(StabilizerError::NotHurwitz(format!(
            "Lyapunov solution not positive definite (min eigenvalue {p_min:.3e})"
        )));
    }
    Ok(p)
}

/// Exact Hurwitz test via the Lyapunov criterion.
pub fn is_hurwitz(a: &Mat) -> bool {
    solve_lyapunov(a, &Mat::identity(a.rows())).is_ok()
}

/// LQR gain for `(A, B)` with cost weights `q I` and `r I`, solved by
/// Newton-Kleinman iteration on the algebraic Riccati equation. The seed is
/// `K = 0` when `A` is already Hurwitz, otherwise the Bass pole-shift gain.
/// Returns `K` (m x n) with `A - B K` Hurwitz; the feedback is `u = -K x`.
pub fn local_lqr(a: &Mat, b: &Mat, q: f64, r: f64) -> Result<Mat, StabilizerError> {
    let n = a.rows();
    let m = b.cols();
    if q <= 0.0 || r <= 0.0 {
        return Err(StabilizerError::BadWeights { q, r });
    }
    if m == 0 {
        if !is_hurwitz(a) {
            return Err(StabilizerError::NotHurwitz(
                "no control available and the drift is not Hurwitz".into(),
            ));
        }
        return Ok(Mat::zeros(0, n));
    }
    let qc = Mat::identity(n).scale(q);
    let mut k = if is_hurwitz(a) { Mat::zeros(m, n) } else { bass_gain(a, b)? };
    if !is_hurwitz(&a.sub(&b.mul(&k))) {
        return Err(StabilizerError::RiccatiFailed(
            "stabilizing seed gain could not be constructed".into(),
        ));
    }
    let mut last_p: Option<Mat> = None;
    for _ in 0..60 {
        let a_k = a.sub(&b.mul(&k));
        // A_k^T P + P A_k = -(qI + K^T R K)
        let rhs = qc.add(&k.transpose().mul(&k).scale(r)).scale(-1.0);
        let p = lyap_raw(&a_k, &rhs)?;
        let k_next = b.transpose().mul(&p).scale(1.0 / r);
        let delta = k_next.sub(&k).max_abs();
        k = k_next;
        last_p = Some(p);
        if delta <= 1e-13 * (1.0 + k.max_abs()) {
            break;
        }
    }
    let p = last_p.ok_or_else(|| StabilizerError::RiccatiFailed("no iterations run".into()))?;
    // ARE residual check: A^T P + P A - P B R^-1 B^T P + qI = 0
    let pbrb = p.mul(&b.mul(&b.transpose().mul(&p))).scale(1.0 / r);
    let res = a.transpose().mul(&p).add(&p.mul(a)).sub(&pbrb).add(&qc).max_abs();
    if res > 1e-6 * (1.0 + p.max_abs()) {
        return Err(StabilizerError::RiccatiFailed(format!("ARE residual {res:.3e}")));
    }
    if !is_hurwitz(&a.sub(&b.mul(&k))) {
        return Err(StabilizerError::RiccatiFailed("final gain does not stabilize".into()));
    }
    Ok(k)
}

/// Bass pole-shift seed: with `beta` beyond the spectral abscissa, solve
/// `(A + beta I) Z + Z (A + beta I)^T = 2 B B^T`; then `K = B^T Z^{-1}`
/// stabilizes `A - B K` whenever `(A, B)` is controllable.
fn bass_gain(a: &Mat, b: &Mat) -> Result<Mat, StabilizerError> {
    let n = a.rows();
    let mut norm = 0.0f64;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| a.get(i, j).abs()).sum();
        norm = norm.max(row_sum);
    }
    let beta = norm + 1.0;
    let shifted_t = a.add(&Mat::identity(n).scale(beta)).transpose();
    let bbt = b.mul(&b.transpose()).scale(2.0);
    let z = lyap_raw(&shifted_t, &bbt)?;
    let zinv_b = match lu_factor(&z) {
        Ok(lu) => lu.solve_mat(b),
        Err(_) => {
            return Err(StabilizerError::Uncontrollable(
                "Bass Gramian is singular".into(),
            ))
        }
    };
    Ok(zinv_b.transpose())
}

/// Local static feedback `lambda`.
#[derive(Clone, Debug)]
pub enum Feedback {
    /// Linear feedback `lambda(x) = -K x` with `K` of shape m x n.
    Gain(Mat),
    /// Expression feedback, one expression per control coordinate, over the
    /// state variables.
    Exprs(Vec<Expr>),
}

impl Feedback {
    pub fn control_dim(&self) -> usize {
        match self {
            Feedback::Gain(k) => k.rows(),
            Feedback::Exprs(e) => e.len(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, StabilizerError> {
        match self {
            Feedback::Gain(k) => Ok(k.mul_vec(x).iter().map(|v| -v).collect()),
            Feedback::Exprs(exprs) => {
                Ok(exprs.iter().map(|e| e.eval(x, &[])).collect::<Result<_, _>>()?)
            }
        }
    }

    /// Jacobian `d lambda / d x` at a point.
    pub fn jac(&self, x: &[f64]) -> Result<Mat, StabilizerError> {
        match self {
            Feedback::Gain(k) => Ok(k.scale(-1.0)),
            Feedback::Exprs(exprs) => Ok(jacobian(exprs, x, &[], Wrt::State)?),
        }
    }
}

/// Quadratic Lyapunov certificate for the local closed loop.
#[derive(Clone, Debug)]
pub struct LyapunovCertificate {
    /// Symmetric positive definite quadratic form.
    pub p: Mat,
    /// Certified decay rate: `Vdot <= -c V` on `D(r_star)`.
    pub c: f64,
    /// Certified sublevel (infinite when the closed loop is linear).
    pub r_star: f64,
    /// The gain when the feedback was auto-built by LQR.
    pub gain: Option<Mat>,
    /// Smallest level at which the sampled decay check failed, when finite.
    pub failing_level: Option<f64>,
}

impl LyapunovCertificate {
    pub fn v(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        dot(x, &px)
    }

    /// Euclidean gradient `dV/dx = 2 P x`.
    pub fn grad_v(&self, x: &[f64]) -> Vec<f64> {
        self.p.mul_vec(x).iter().map(|v| 2.0 * v).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.v(x) <= self.r_star
    }
}

/// Build the quadratic certificate for `xdot = f(x, lambda(x))`.
///
/// `P` solves the closed-loop Lyapunov equation at the linearization,
/// `c = lambda_min(Q) / lambda_max(P)`, and `r*` is found by bisection over
/// sampled sublevel sets inside `state_box`: the largest level on which
/// `dV/dx . f(x, lambda(x)) <= -c V(x) + 1e-9` held at every sample. A
/// closed loop detected linear certifies globally (`r* = infinity`).
pub fn build_certificate(
    sys: &SystemSpec,
    feedback: &Feedback,
    q: Option<&Mat>,
    state_box: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<LyapunovCertificate, StabilizerError> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    if feedback.control_dim() != m {
        return Err(StabilizerError::FeedbackDim {
            expected: m,
            got: feedback.control_dim(),
        });
    }
    let zero = vec![0.0; n];
    let lambda0 = feedback.eval(&zero)?;
    if norm2(&lambda0) > 1e-12 {
        return Err(StabilizerError::FeedbackNotVanishing(norm2(&lambda0)));
    }
    let q_default = Mat::identity(n);
    let q = q.unwrap_or(&q_default);
    // closed-loop linearization A_cl = df/dx + df/du . dlambda/dx at 0
    let a = sys.jac_x(&zero, &lambda0)?;
    let b = sys.jac_u(&zero, &lambda0)?;
    let a_cl = a.add(&b.mul(&feedback.jac(&zero)?));
    let p = solve_lyapunov(&a_cl, q)?;
    let c = sym_eigen(&q.sym_part()).min() / sym_eigen(&p).max();
    let gain = match feedback {
        Feedback::Gain(k) => Some(k.clone()),
        Feedback::Exprs(_) => None,
    };

    let closed_field = |x: &[f64]| -> Result<Vec<f64>, StabilizerError> {
        let u = feedback.eval(x)?;
        Ok(sys.eval_field(x, &u)?)
    };

    if closed_loop_is_linear(&a_cl, &closed_field, n, seed)? {
        return Ok(LyapunovCertificate { p, c, r_star: f64::INFINITY, gain, failing_level: None });
    }

    // largest level r with the ellipsoid {V <= r} inside the box
    let p_inv = linalg::inverse(&p)?;
    let mut r_box = f64::INFINITY;
    for (i, &(lo, hi)) in state_box.iter().enumerate() {
        let a_i = lo.abs().min(hi.abs());
        r_box = r_box.min(a_i * a_i / p_inv.get(i, i));
    }
    if !r_box.is_finite() || r_box <= 0.0 {
        return Err(StabilizerError::NoDecayLevel { failing_level: 0.0 });
    }
    // sampling frame: x = P^{-1/2} y maps the unit ball to {V <= 1}
    let eig = sym_eigen(&p);
    let inv_sqrt = {
        let lam_inv_sqrt: Vec<f64> = eig.values.iter().map(|l| 1.0 / l.sqrt()).collect();
        eig.vectors.mul(&Mat::diag(&lam_inv_sqrt)).mul(&eig.vectors.transpose())
    };
    let cert = LyapunovCertificate { p: p.clone(), c, r_star: 0.0, gain, failing_level: None };
    let test_level = |r: f64| -> Result<bool, StabilizerError> {
        for s in 0..samples.max(16) {
            let idx = seed as usize + s + 1;
            // Box-Muller on Halton pairs for a uniform direction
            let mut dir = vec![0.0; n];
            for d in 0..n.div_ceil(2) {
                let u1 = halton_open(idx, crate::contraction::PRIMES[2 * d]);
                let u2 = halton_open(idx, crate::contraction::PRIMES[2 * d + 1]);
                let rad = (-2.0 * u1.ln()).sqrt();
                dir[2 * d] = rad * (std::f64::consts::TAU * u2).cos();
                if 2 * d + 1 < n {
                    dir[2 * d + 1] = rad * (std::f64::consts::TAU * u2).sin();
                }
            }
            let nrm = norm2(&dir).max(1e-300);
            // half the samples on the level-set boundary, half filling the
            // sublevel set
            let shell = if s % 2 == 0 {
                1.0
            } else {
                halton_open(idx, 53).powf(1.0 / n as f64)
            };
            let scale = r.sqrt() * shell / nrm;
            let x: Vec<f64> = inv_sqrt.mul_vec(&dir).iter().map(|v| v * scale).collect();
            let vdot = dot(&cert.grad_v(&x), &closed_field(&x)?);
            if vdot > -c * cert.v(&x) + CERT_DECAY_SLACK {
                return Ok(false);
            }
        }
        Ok(true)
    };

    if test_level(r_box)? {
        return Ok(LyapunovCertificate { p, c, r_star: r_box, gain: cert.gain, failing_level: None });
    }
    let mut lo = 0.0f64;
    let mut hi = r_box;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if test_level(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 1e-12 {
        return Err(StabilizerError::NoDecayLevel { failing_level: hi });
    }
    Ok(LyapunovCertificate {
        p,
        c,
        r_star: lo,
        gain: cert.gain,
        failing_level: Some(hi),
    })
}

fn halton_open(index: usize, base: usize) -> f64 {
    crate::contraction::halton(index, base).max(1e-12)
}

fn closed_loop_is_linear(
    a_cl: &Mat,
    closed_field: &impl Fn(&[f64]) -> Result<Vec<f64>, StabilizerError>,
    n: usize,
    seed: u64,
) -> Result<bool, StabilizerError> {
    for s in 0..24 {
        let idx = seed as usize + s + 1;
        let radius = [0.5, 3.0, 20.0, 120.0][s % 4];
        let x: Vec<f64> = (0..n)
            .map(|d| {
                radius * (2.0 * crate::contraction::halton(idx, crate::contraction::PRIMES[d]) - 1.0)
            })
            .collect();
        let fx = closed_field(&x)?;
        let lin = a_cl.mul_vec(&x);
        let diff = norm2(&linalg::sub_vec(&fx, &lin));
        if diff > 1e-9 * (1.0 + norm2(&lin)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The assembled dynamic closed loop of the augmented `(x, xhat)` system.
pub struct ClosedLoopSystem {
    pub sys: SystemSpec,
    pub metric: MetricField,
    pub feedback: Feedback,
    pub cert: LyapunovCertificate,
    /// Optional lower bound on `alpha`; zero keeps the certified bound on
    /// `|k|` intact.
    pub alpha_floor: f64,
}

impl ClosedLoopSystem {
    pub fn new(
        sys: SystemSpec,
        metric: MetricField,
        feedback: Feedback,
        cert: LyapunovCertificate,
        alpha_floor: f64,
    ) -> Result<Self, StabilizerError> {
        assert!(alpha_floor >= 0.0);
        let n = sys.state_dim();
        assert_eq!(metric.dim(), n, "metric dimension mismatch");
        if feedback.control_dim() != sys.control_dim() {
            return Err(StabilizerError::FeedbackDim {
                expected: sys.control_dim(),
                got: feedback.control_dim(),
            });
        }
        let l0 = feedback.eval(&vec![0.0; n])?;
        if norm2(&l0) > 1e-12 {
            return Err(StabilizerError::FeedbackNotVanishing(norm2(&l0)));
        }
        Ok(ClosedLoopSystem { sys, metric, feedback, cert, alpha_floor })
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    /// Augmented dimension `2n`.
    pub fn augmented_dim(&self) -> usize {
        2 * self.sys.state_dim()
    }

    /// The positive correction gain; strictly positive, locally Lipschitz.
    pub fn alpha(&self, x: &[f64], xhat: &[f64]) -> Result<f64, StabilizerError> {
        let grad = grad_d2(&self.metric, x, xhat)?;
        Ok(self.alpha_with_grad(xhat, &grad))
    }

    fn alpha_with_grad(&self, xhat: &[f64], grad: &[f64]) -> f64 {
        let v = self.cert.v(xhat).max(1.0);
        let dv = norm2(&self.cert.grad_v(xhat));
        let raw = self.cert.c * v / (2.0 * (1.0 + dv) * (1.0 + norm2(grad)));
        raw.max(self.alpha_floor)
    }

    /// Bound `|k| <= c max{V(xhat), 1} / (2 (1 + |dV/dx(xhat)|))`, holding
    /// pointwise whenever the alpha floor is inactive.
    pub fn correction_bound(&self, xhat: &[f64]) -> f64 {
        let v = self.cert.v(xhat).max(1.0);
        let dv = norm2(&self.cert.grad_v(xhat));
        self.cert.c * v / (2.0 * (1.0 + dv))
    }

    /// Correction term `k(x, xhat) = -alpha(x, xhat) grad_d2(x, xhat)`.
    pub fn correction(&self, x: &[f64], xhat: &[f64]) -> Result<Vec<f64>, StabilizerError> {
        let grad = grad_d2(&self.metric, x, xhat)?;
        let alpha = self.alpha_with_grad(xhat, &grad);
        Ok(grad.iter().map(|g| -alpha * g).collect())
    }

    /// Augmented field `(f(x, lambda(xhat)), f(xhat, lambda(xhat)) + k)`.
    pub fn field(&self, x: &[f64], xhat: &[f64], out: &mut [f64]) -> Result<(), StabilizerError> {
        let n = self.sys.state_dim();
        debug_assert_eq!(out.len(), 2 * n);
        let u = self.feedback.eval(xhat)?;
        self.sys.eval_field_into(x, &u, &mut out[..n])?;
        self.sys.eval_field_into(xhat, &u, &mut out[n..])?;
        let k = self.correction(x, xhat)?;
        for (o, ki) in out[n..].iter_mut().zip(&k) {
            *o += ki;
        }
        Ok(())
    }
}

/// Jurdjevic-Quinn damping feedback `u(x) = -gamma (L_b V)(x)^T` for the
/// weak Lyapunov function `V(x) = d_g^2(x, 0)`, clamped into the control
/// box. `b` is the control-affine input matrix `df/du (x, 0)`.
#[derive(Clone, Copy, Debug)]
pub struct JqFeedback {
    pub gamma: f64,
}

impl JqFeedback {
    pub fn control(
        &self,
        sys: &SystemSpec,
        g: &MetricField,
        x: &[f64],
    ) -> Result<Vec<f64>, StabilizerError> {
        let n = sys.state_dim();
        // Euclidean gradient of V: by the Riemannian-gradient duality,
        // dV/dx = G(x) grad_{g(x)} d^2(0, x)
        let riem = grad_d2(g, &vec![0.0; n], x)?;
        let dv = g.eval(x)?.mul_vec(&riem);
        let b = sys.input_matrix(x)?;
        let mut u: Vec<f64> =
            b.transpose().mul_vec(&dv).iter().map(|lbv| -self.gamma * lbv).collect();
        sys.clamp_control(&mut u);
        Ok(u)
    }

    /// The weak Lyapunov value `V(x) = d_g^2(x, 0)`.
    pub fn lyapunov(&self, g: &MetricField, x: &[f64]) -> Result<f64, StabilizerError> {
        let n = x.len();
        let d = crate::geometry::distance(g, x, &vec![0.0; n])?;
        Ok(d * d)
    }
}
