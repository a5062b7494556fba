//! Weak-contraction certification and trajectory-pair non-expansion tests.
//!
//! A system is weakly contractive with respect to `g` when the Lie
//! derivative of the metric along every controlled field is negative
//! semidefinite. The certifier here is a *falsifier*: it evaluates the
//! maximum eigenvalue of the Lie-derivative matrix over a low-discrepancy
//! sample of the requested region (plus the origin and box corners) and
//! reports the worst witness found. A pass means "no violation found in N
//! samples", not a proof.

use thiserror::Error;

use crate::expr::EvalError;
use crate::geometry::{distance, GeometryError, MetricField};
use crate::linalg::{norm2, sym_eigen, Mat};
use crate::system::SystemSpec;

/// Default eigenvalue tolerance for the pass verdict.
pub const CONTRACTION_TOL: f64 = 1e-8;

const BLOWUP_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ContractionError {
    #[error("sampling box must have one non-degenerate interval per dimension")]
    BadBox,
    #[error("control {0:?} outside the admissible control box")]
    ControlOutsideBox(Vec<f64>),
    #[error("trajectory integration blew up at t = {t}")]
    Blowup { t: f64 },
    #[error("piecewise-constant signal needs breakpoints starting at 0, strictly increasing")]
    BadSignal,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Radical-inverse (van der Corput) value of `index` in the given base; the
/// coordinates of a Halton point.
pub fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

pub(crate) const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Lie derivative of the metric along `f(., u)` at `(x, u)`:
/// `M = J^T G + G J + sum_l (dG/dx_l) f_l` with `J = df/dx`. The result is
/// exactly symmetric.
pub fn metric_lie_derivative(
    sys: &SystemSpec,
    g: &MetricField,
    x: &[f64],
    u: &[f64],
) -> Result<Mat, ContractionError> {
    let jac = sys.jac_x(x, u)?;
    let gm = g.eval(x)?;
    let gj = gm.mul(&jac);
    let flow = sys.eval_field(x, u)?;
    let dg_along_f = g.directional_derivative(x, &flow)?;
    Ok(gj.transpose().add(&gj).add(&dg_along_f))
}

/// Outcome of sampling-based weak-contraction certification.
#[derive(Clone, Debug)]
pub struct ContractionReport {
    /// Largest eigenvalue of the Lie-derivative matrix found.
    pub max_eig: f64,
    /// State at which the maximum was attained.
    pub witness_x: Vec<f64>,
    /// Control at which the maximum was attained.
    pub witness_u: Vec<f64>,
    /// Unit eigenvector for the maximal eigenvalue at the witness.
    pub witness_vec: Vec<f64>,
    /// Total points evaluated (origin + corners + Halton samples).
    pub samples_used: usize,
    pub state_box: Vec<(f64, f64)>,
    pub control_box: Vec<(f64, f64)>,
    /// Pass tolerance used for the verdict.
    pub tol: f64,
    /// True when `max_eig <= tol`: no violation found in the sample.
    pub pass: bool,
}

impl ContractionReport {
    /// Re-evaluate the witness; returns `|v^T M v - max_eig|` (the witness
    /// must reproduce its eigenvalue).
    pub fn witness_residual(
        &self,
        sys: &SystemSpec,
        g: &MetricField,
    ) -> Result<f64, ContractionError> {
        let m = metric_lie_derivative(sys, g, &self.witness_x, &self.witness_u)?;
        let v = &self.witness_vec;
        let mut quad = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                quad += v[i] * m.get(i, j) * v[j];
            }
        }
        let nrm = norm2(v);
        Ok((quad / (nrm * nrm) - self.max_eig).abs())
    }
}

/// Evaluate the maximum Lie-derivative eigenvalue over the origin, the box
/// corners and `samples` Halton points of the joint `(x, u)` region. The
/// `seed` offsets the start of the Halton sequence, so a report is exactly
/// reproducible given the same seed. Ties are broken toward the earliest
/// point evaluated.
pub fn certify_weak_contraction(
    sys: &SystemSpec,
    g: &MetricField,
    state_box: &[(f64, f64)],
    control_box: &[(f64, f64)],
    samples: usize,
    seed: u64,
) -> Result<ContractionReport, ContractionError> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    if state_box.len() != n
        || control_box.len() != m
        || state_box.iter().chain(control_box).any(|&(lo, hi)| !(lo < hi))
    {
        return Err(ContractionError::BadBox);
    }
    let dims = n + m;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut samples_used = 0;

    let mut consider = |x: &[f64], u: &[f64]| -> Result<(), ContractionError> {
        let lie = metric_lie_derivative(sys, g, x, u)?;
        let eig = sym_eigen(&lie);
        let max = eig.max();
        samples_used += 1;
        if best.as_ref().is_none_or(|(b, ..)| max > *b) {
            best = Some((max, x.to_vec(), u.to_vec(), eig.max_vector()));
        }
        Ok(())
    };

    // origin
    consider(&vec![0.0; n], &vec![0.0; m])?;
    // box corners (joint dimension is small in scope)
    if dims <= 16 {
        for mask in 0..(1usize << dims) {
            let mut x = Vec::with_capacity(n);
            let mut u = Vec::with_capacity(m);
            for (d, &(lo, hi)) in state_box.iter().chain(control_box.iter()).enumerate() {
                let v = if mask >> d & 1 == 0 { lo } else { hi };
                if d < n {
                    x.push(v);
                } else {
                    u.push(v);
                }
            }
            consider(&x, &u)?;
        }
    }
    // low-discrepancy interior samples
    for s in 0..samples {
        let idx = seed as usize + s + 1;
        let mut x = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(m);
        for (d, &(lo, hi)) in state_box.iter().chain(control_box.iter()).enumerate() {
            let t = halton(idx, PRIMES[d % PRIMES.len()]);
            let v = lo + t * (hi - lo);
            if d < n {
                x.push(v);
            } else {
                u.push(v);
            }
        }
        consider(&x, &u)?;
    }

    let (max_eig, witness_x, witness_u, witness_vec) = best.expect("at least the origin");
    Ok(ContractionReport {
        max_eig,
        witness_x,
        witness_u,
        witness_vec,
        samples_used,
        state_box: state_box.to_vec(),
        control_box: control_box.to_vec(),
        tol: CONTRACTION_TOL,
        pass: max_eig <= CONTRACTION_TOL,
    })
}

/// Piecewise-constant control signal: `value(t)` is the value attached to
/// the last breakpoint at or before `t`.
#[derive(Clone, Debug)]
pub struct PiecewiseConstant {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PiecewiseConstant {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, ContractionError> {
        if breakpoints.is_empty()
            || breakpoints.len() != values.len()
            || breakpoints[0] != 0.0
            || breakpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ContractionError::BadSignal);
        }
        Ok(PiecewiseConstant { breakpoints, values })
    }

    /// Signal identically equal to one value.
    pub fn constant(value: Vec<f64>) -> Self {
        PiecewiseConstant { breakpoints: vec![0.0], values: vec![value] }
    }

    pub fn value(&self, t: f64) -> &[f64] {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        &self.values[idx.saturating_sub(1)]
    }
}

/// Trajectory-pair distance record from [`nonexpansion_test`].
#[derive(Clone, Debug)]
pub struct NonexpansionReport {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    /// Largest signed per-step increment rate `(d(t+h) - d(t)) / h`.
    pub max_increment_rate: f64,
}

/// Integrate two trajectories under the *same* control signal and record the
/// geodesic distance between them over time. For a weakly contractive
/// system the distance must be non-increasing; the report carries the worst
/// per-unit-time increment observed.
pub fn nonexpansion_test(
    sys: &SystemSpec,
    g: &MetricField,
    x1: &[f64],
    x2: &[f64],
    signal: &PiecewiseConstant,
    horizon: f64,
    step: f64,
) -> Result<NonexpansionReport, ContractionError> {
    assert!(horizon > 0.0 && step > 0.0, "horizon and step must be positive");
    let n = sys.state_dim();
    assert_eq!(x1.len(), n);
    assert_eq!(x2.len(), n);
    let steps = (horizon / step).round() as usize;
    let mut a = x1.to_vec();
    let mut b = x2.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut distances = Vec::with_capacity(steps + 1);
    times.push(0.0);
    distances.push(distance(g, &a, &b)?);
    let mut y = [a.clone(), b.clone()].concat();
    for k in 0..steps {
        let t = k as f64 * step;
        // zero-order hold: the control value at the step start applies to
        // the whole step, so switches aligned with the grid never straddle
        // an RK4 stage
        let u = signal.value(t).to_vec();
        let mut deriv = |_t: f64, y: &[f64], out: &mut [f64]| -> Result<(), ContractionError> {
            sys.eval_field_into(&y[..n], &u, &mut out[..n])?;
            sys.eval_field_into(&y[n..], &u, &mut out[n..])?;
            Ok(())
        };
        rk4_step(&mut deriv, t, &mut y, step)?;
        if y.iter().any(|v| v.abs() > BLOWUP_LIMIT) {
            return Err(ContractionError::Blowup { t: t + step });
        }
        a.copy_from_slice(&y[..n]);
        b.copy_from_slice(&y[n..]);
        times.push((k + 1) as f64 * step);
        distances.push(distance(g, &a, &b)?);
    }
    let max_increment_rate = distances
        .windows(2)
        .map(|w| (w[1] - w[0]) / step)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(NonexpansionReport { times, distances, max_increment_rate })
}

fn rk4_step<E>(
    f: &mut impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    t: f64,
    y: &mut [f64],
    h: f64,
) -> Result<(), E> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4)?;
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_expr, Expr, ExprMatrix};
    use approx::assert_abs_diff_eq;

    fn e(src: &str, n: usize, m: usize) -> Expr {
        parse_expr(src, n, m).unwrap()
    }

    fn rotation() -> SystemSpec {
        SystemSpec::new(2, 0, vec![e("x2", 2, 0), e("-x1", 2, 0)], vec![]).unwrap()
    }

    fn rotation_with_input() -> SystemSpec {
        SystemSpec::new(
            2,
            1,
            vec![e("x2", 2, 1), e("-x1 + u1", 2, 1)],
            vec![(-100.0, 100.0)],
        )
        .unwrap()
    }

    /// f = Ax + (b0 + Jx) u with A, J skew: exactly isometry-preserving for
    /// the Euclidean metric, whatever the control.
    fn bilinear() -> SystemSpec {
        SystemSpec::new(
            2,
            1,
            vec![
                e("x2 + 0.2*x2*u1", 2, 1),
                e("-x1 + (1 - 0.2*x1)*u1", 2, 1),
            ],
            vec![(-20.0, 20.0)],
        )
        .unwrap()
    }

    fn pullback_metric() -> MetricField {
        MetricField::new(ExprMatrix::new(
            2,
            2,
            vec![
                e("1 + 4*x1^2", 2, 0),
                e("2*x1", 2, 0),
                e("2*x1", 2, 0),
                Expr::Const(1.0),
            ],
        ))
        .unwrap()
    }

    #[test]
    fn lie_derivative_of_rotation_vanishes() {
        let sys = rotation();
        let g = MetricField::identity(2);
        let m = metric_lie_derivative(&sys, &g, &[0.7, -0.3], &[]).unwrap();
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn lie_derivative_of_expansion() {
        // f = x with G = I gives M = 2I
        let sys = SystemSpec::new(2, 0, vec![e("x1", 2, 0), e("x2", 2, 0)], vec![]).unwrap();
        let g = MetricField::identity(2);
        let m = metric_lie_derivative(&sys, &g, &[0.4, 0.1], &[]).unwrap();
        assert_eq!(m, Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]));
    }

    #[test]
    fn lie_derivative_metric_variation_term() {
        // constant field (1, 0); the only contribution is dG/dx1
        let sys = SystemSpec::new_raw(2, 0, vec![Expr::Const(1.0), Expr::Const(0.0)], vec![])
            .unwrap();
        let g = pullback_metric();
        let m = metric_lie_derivative(&sys, &g, &[0.0, 0.0], &[]).unwrap();
        assert_abs_diff_eq!(m.get(0, 1), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(0, 0), 0.0, epsilon = 1e-12);
        let eig = sym_eigen(&m);
        assert_abs_diff_eq!(eig.max(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig.min(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn lie_derivative_exactly_symmetric_on_samples() {
        let sys = bilinear();
        let g = pullback_metric();
        for s in 0..25 {
            let x = [
                -2.0 + 4.0 * halton(s + 1, 2),
                -2.0 + 4.0 * halton(s + 1, 3),
            ];
            let u = [-1.0 + 2.0 * halton(s + 1, 5)];
            let m = metric_lie_derivative(&sys, &g, &x, &u).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
                }
            }
        }
    }

    #[test]
    fn certify_oscillator_passes() {
        let sys = rotation_with_input();
        let g = MetricField::identity(2);
        let rep = certify_weak_contraction(
            &sys,
            &g,
            &[(-5.0, 5.0), (-5.0, 5.0)],
            &[(-1.0, 1.0)],
            500,
            0,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.max_eig <= 1e-12, "max_eig = {}", rep.max_eig);
    }

    #[test]
    fn certify_expansion_fails_with_witness_two() {
        let sys = SystemSpec::new(1, 0, vec![e("x1", 1, 0)], vec![]).unwrap();
        let g = MetricField::identity(1);
        let rep =
            certify_weak_contraction(&sys, &g, &[(-2.0, 2.0)], &[], 100, 0).unwrap();
        assert!(!rep.pass);
        assert_abs_diff_eq!(rep.max_eig, 2.0, epsilon = 1e-12);
        assert!(rep.witness_residual(&sys, &g).unwrap() <= 1e-10);
    }

    #[test]
    fn certify_bilinear_class_passes_for_every_control() {
        let sys = bilinear();
        let g = MetricField::identity(2);
        let rep = certify_weak_contraction(
            &sys,
            &g,
            &[(-10.0, 10.0), (-10.0, 10.0)],
            &[(-5.0, 5.0)],
            2000,
            7,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.max_eig <= 1e-12, "max_eig = {}", rep.max_eig);
    }

    #[test]
    fn certify_is_reproducible_for_a_seed() {
        let sys = bilinear();
        let g = MetricField::identity(2);
        let run = || {
            certify_weak_contraction(
                &sys,
                &g,
                &[(-3.0, 3.0), (-3.0, 3.0)],
                &[(-1.0, 1.0)],
                200,
                42,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.max_eig.to_bits(), b.max_eig.to_bits());
        assert_eq!(a.witness_x, b.witness_x);
        assert_eq!(a.samples_used, b.samples_used);
    }

    #[test]
    fn witness_self_consistency() {
        let sys = SystemSpec::new(
            2,
            0,
            vec![e("x1 + 0.3*x2", 2, 0), e("0.1*x1 - 0.5*x2", 2, 0)],
            vec![],
        )
        .unwrap();
        let g = MetricField::identity(2);
        let rep =
            certify_weak_contraction(&sys, &g, &[(-1.0, 1.0), (-1.0, 1.0)], &[], 300, 3).unwrap();
        assert!(rep.witness_residual(&sys, &g).unwrap() <= 1e-10);
    }

    #[test]
    fn nonexpansion_isometric_flow_keeps_distance() {
        let sys = rotation_with_input();
        let g = MetricField::identity(2);
        // piecewise-constant control switching every 2 time units
        let signal = PiecewiseConstant::new(
            (0..10).map(|k| 2.0 * k as f64).collect(),
            (0..10).map(|k| vec![if k % 2 == 0 { 0.8 } else { -0.5 }]).collect(),
        )
        .unwrap();
        let rep = nonexpansion_test(
            &sys,
            &g,
            &[1.0, 0.0],
            &[-0.5, 2.0],
            &signal,
            20.0,
            1e-3,
        )
        .unwrap();
        let d0 = rep.distances[0];
        for d in &rep.distances {
            assert!((d - d0).abs() <= 1e-6, "distance drifted: {d} vs {d0}");
        }
    }

    #[test]
    fn nonexpansion_linear_contraction_rate() {
        // A + A^T = -0.2 I gives exact pair decay d(t) = e^{-0.1 t} d(0)
        let sys = SystemSpec::new(
            2,
            0,
            vec![e("-0.1*x1 + x2", 2, 0), e("-x1 - 0.1*x2", 2, 0)],
            vec![],
        )
        .unwrap();
        let g = MetricField::identity(2);
        let signal = PiecewiseConstant::constant(vec![]);
        let rep =
            nonexpansion_test(&sys, &g, &[2.0, 1.0], &[-1.0, 0.5], &signal, 10.0, 1e-3).unwrap();
        let d0 = rep.distances[0];
        for (t, d) in rep.times.iter().zip(&rep.distances) {
            let expected = d0 * (-0.1 * t).exp();
            assert!(
                (d - expected).abs() <= 1e-5 * expected,
                "at t={t}: d={d} expected={expected}"
            );
        }
        assert!(rep.max_increment_rate <= 0.0);
    }

    #[test]
    fn nonexpansion_identical_states_stay_identical() {
        let sys = rotation();
        let g = MetricField::identity(2);
        let signal = PiecewiseConstant::constant(vec![]);
        let rep =
            nonexpansion_test(&sys, &g, &[1.5, -0.5], &[1.5, -0.5], &signal, 5.0, 1e-2).unwrap();
        assert!(rep.distances.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn lie_derivative_matches_trajectory_level_definition() {
        // rho(t) = |v(t)|^2_{g(x(t))} along the variational flow satisfies
        // drho/dt = M(x, u)(v, v)
        let sys = SystemSpec::new_raw(2, 0, vec![Expr::Const(1.0), Expr::Const(0.0)], vec![])
            .unwrap();
        let g = pullback_metric();
        let x0 = vec![0.2, -0.4];
        let v0 = vec![0.7, 0.3];
        // integrate (x, v) jointly: xdot = f(x), vdot = J(x) v
        let mut deriv = |_t: f64, y: &[f64], out: &mut [f64]| -> Result<(), ContractionError> {
            let (x, v) = y.split_at(2);
            sys.eval_field_into(x, &[], &mut out[..2])?;
            let jac = sys.jac_x(x, &[])?;
            let jv = jac.mul_vec(v);
            out[2..].copy_from_slice(&jv);
            Ok(())
        };
        let h = 1e-3;
        let mut y = [x0, v0].concat();
        let rho = |y: &[f64]| {
            let (x, v) = y.split_at(2);
            g.inner(x, v, v).unwrap()
        };
        for k in 0..200 {
            let before = rho(&y);
            let y_before = y.clone();
            rk4_step(&mut deriv, k as f64 * h, &mut y, h).unwrap();
            let after = rho(&y);
            let measured = (after - before) / h;
            // midpoint state for the comparison
            let mid: Vec<f64> =
                y_before.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
            let (xm, vm) = mid.split_at(2);
            let m = metric_lie_derivative(&sys, &g, xm, &[]).unwrap();
            let mut quad = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    quad += vm[i] * m.get(i, j) * vm[j];
                }
            }
            assert!(
                (measured - quad).abs() <= 1e-3 * (1.0 + quad.abs()),
                "step {k}: drho/dt={measured} vs v^T M v={quad}"
            );
        }
    }

    #[test]
    fn certified_box_implies_nonexpansion_inside_it() {
        let sys = bilinear();
        let g = MetricField::identity(2);
        let state_box = [(-4.0, 4.0), (-4.0, 4.0)];
        let control_box = [(-2.0, 2.0)];
        let rep =
            certify_weak_contraction(&sys, &g, &state_box, &control_box, 500, 0).unwrap();
        assert!(rep.pass);
        let signal = PiecewiseConstant::new(
            vec![0.0, 2.0, 4.0],
            vec![vec![1.5], vec![-0.7], vec![0.3]],
        )
        .unwrap();
        let pair = nonexpansion_test(
            &sys,
            &g,
            &[1.0, -0.5],
            &[-1.0, 1.5],
            &signal,
            6.0,
            1e-3,
        )
        .unwrap();
        assert!(
            pair.max_increment_rate <= 1e-6,
            "increment rate {} above integration tolerance",
            pair.max_increment_rate
        );
    }

    #[test]
    fn piecewise_constant_lookup() {
        let s = PiecewiseConstant::new(
            vec![0.0, 1.0, 2.5],
            vec![vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        assert_eq!(s.value(0.0), &[1.0]);
        assert_eq!(s.value(0.99), &[1.0]);
        assert_eq!(s.value(1.0), &[2.0]);
        assert_eq!(s.value(10.0), &[3.0]);
    }

    #[test]
    fn bad_signal_rejected() {
        assert!(PiecewiseConstant::new(vec![0.5], vec![vec![0.0]]).is_err());
        assert!(PiecewiseConstant::new(vec![0.0, 0.0], vec![vec![1.0], vec![2.0]]).is_err());
    }
}
