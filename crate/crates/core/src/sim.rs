//! Deterministic fixed-step RK4 integration with per-sample recording of
//! every monitored quantity, plus post-hoc invariant checking of the
//! closed-loop proof inequalities.

use std::io::Write;

use thiserror::Error;

use crate::contraction::{nonexpansion_test, ContractionError, NonexpansionReport, PiecewiseConstant};
use crate::expr::EvalError;
use crate::geometry::{log_map, GeometryError, MetricField};
use crate::linalg::norm2;
use crate::stabilizer::{ClosedLoopSystem, LyapunovCertificate, StabilizerError};
use crate::system::SystemSpec;

const BLOWUP_LIMIT: f64 = 1e12;

/// Absolute tolerance for the pointwise descent inequality
/// `d/dt d^2 <= -alpha |grad d^2|^2_g + tol` used by the acceptance suite
/// (central differences of the recorded columns carry O(dt^2) truncation
/// error, so traces checked against it should record densely).
pub const DESCENT_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon and step must be positive and T/h must be a whole number of steps")]
    BadGrid,
    #[error("record decimation must divide the step count")]
    BadDecimation,
    #[error("integration blew up at t = {t:.6} (|state| > {BLOWUP_LIMIT:.0e}); partial trace kept")]
    Blowup { t: f64, partial: Box<TrajectoryTrace> },
    #[error("trace has no derived columns; run the closed-loop integrator")]
    NotClosedLoop,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Stabilizer(#[from] StabilizerError),
    #[error(transparent)]
    Contraction(#[from] ContractionError),
}

/// Per-record monitored quantities of a closed-loop trace.
#[derive(Clone, Debug, Default)]
pub struct DerivedColumns {
    /// `V(xhat)` under the certificate.
    pub v: Vec<f64>,
    /// Squared geodesic distance `d_g^2(x, xhat)`.
    pub d2: Vec<f64>,
    /// Correction gain `alpha(x, xhat)`.
    pub alpha: Vec<f64>,
    /// Euclidean norm of the correction `|k(x, xhat)|`.
    pub knorm: Vec<f64>,
    /// `|x|`.
    pub xnorm: Vec<f64>,
    /// `|xhat|`.
    pub xhnorm: Vec<f64>,
}

/// Time-stamped states on a uniform record grid.
#[derive(Clone, Debug)]
pub struct TrajectoryTrace {
    /// Record spacing (integration step times the decimation factor).
    pub dt: f64,
    pub times: Vec<f64>,
    /// One state row per record (length n, or 2n for the augmented loop).
    pub states: Vec<Vec<f64>>,
    /// Monitored columns, present for closed-loop traces.
    pub derived: Option<DerivedColumns>,
}

impl TrajectoryTrace {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trace is never empty")
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().flatten().all(|v| v.is_finite())
            && self.times.iter().all(|t| t.is_finite())
    }
}

fn grid(horizon: f64, step: f64, record_every: usize) -> Result<(usize, usize), SimError> {
    if !(horizon > 0.0) || !(step > 0.0) || record_every == 0 {
        return Err(SimError::BadGrid);
    }
    let steps = (horizon / step).round();
    if steps < 1.0 || (steps * step - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(SimError::BadGrid);
    }
    let steps = steps as usize;
    if steps % record_every != 0 {
        return Err(SimError::BadDecimation);
    }
    Ok((steps, record_every))
}

fn rk4_step<E>(
    f: &mut impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    t: f64,
    y: &mut [f64],
    h: f64,
    scratch: &mut [Vec<f64>; 5],
) -> Result<(), E> {
    let n = y.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    f(t, y, k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, tmp, k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, tmp, k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, tmp, k4)?;
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// Classical RK4 with a fixed step on an arbitrary field. Records every
/// `record_every`-th step (always including `t = 0` and `t = T`). A state
/// exceeding the blow-up limit aborts with the partial trace.
pub fn integrate_fn<E: Into<SimError>>(
    dim: usize,
    mut field: impl FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    y0: &[f64],
    horizon: f64,
    step: f64,
    record_every: usize,
) -> Result<TrajectoryTrace, SimError> {
    assert_eq!(y0.len(), dim);
    let (steps, deci) = grid(horizon, step, record_every)?;
    let mut y = y0.to_vec();
    let mut trace = TrajectoryTrace {
        dt: step * deci as f64,
        times: vec![0.0],
        states: vec![y.clone()],
        derived: None,
    };
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; dim]);
    let mut wrapped =
        |t: f64, y: &[f64], out: &mut [f64]| field(t, y, out).map_err(Into::into);
    for k in 0..steps {
        let t = k as f64 * step;
        rk4_step(&mut wrapped, t, &mut y, step, &mut scratch)?;
        let t_next = (k + 1) as f64 * step;
        if crate::linalg::norm_inf(&y) > BLOWUP_LIMIT {
            return Err(SimError::Blowup { t: t_next, partial: Box::new(trace) });
        }
        if (k + 1) % deci == 0 {
            trace.times.push(t_next);
            trace.states.push(y.clone());
        }
    }
    Ok(trace)
}

/// Integrate the augmented closed loop from `(x0, xhat0)` and fill the
/// monitored columns at every record.
///
/// The distance quantities are recomputed per record (log-map shooting
/// dominates the cost for non-constant metrics, which is why the decimation
/// factor is configurable).
pub fn integrate_closed_loop(
    cl: &ClosedLoopSystem,
    x0: &[f64],
    xhat0: &[f64],
    horizon: f64,
    step: f64,
    record_every: usize,
) -> Result<TrajectoryTrace, SimError> {
    let n = cl.state_dim();
    assert_eq!(x0.len(), n);
    assert_eq!(xhat0.len(), n);
    let y0 = [x0, xhat0].concat();
    let mut trace = integrate_fn(
        2 * n,
        |_t, y, out| cl.field(&y[..n], &y[n..], out),
        &y0,
        horizon,
        step,
        record_every,
    )?;
    let mut derived = DerivedColumns::default();
    for row in &trace.states {
        let (x, xhat) = row.split_at(n);
        let log = log_map(&cl.metric, xhat, x)?;
        let d2 = log.distance * log.distance;
        let grad: Vec<f64> = log.v.iter().map(|c| -2.0 * c).collect();
        let v = cl.cert.v(xhat);
        let dv = norm2(&cl.cert.grad_v(xhat));
        let alpha = (cl.cert.c * v.max(1.0) / (2.0 * (1.0 + dv) * (1.0 + norm2(&grad))))
            .max(cl.alpha_floor);
        derived.v.push(v);
        derived.d2.push(d2);
        derived.alpha.push(alpha);
        derived.knorm.push(alpha * norm2(&grad));
        derived.xnorm.push(norm2(x));
        derived.xhnorm.push(norm2(xhat));
    }
    trace.derived = Some(derived);
    Ok(trace)
}

/// A single recorded invariant violation.
#[derive(Clone, Debug)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// `V(xhat(t))` exceeded `max(V(xhat0), 1)` plus tolerance.
    LyapunovBound,
    /// Squared distance increased faster than tolerance.
    DistanceMonotonicity,
    /// Pointwise descent inequality `d/dt d^2 <= -alpha |grad d^2|^2_g`
    /// failed beyond tolerance.
    DescentInequality,
    /// Non-finite value in the trace.
    NonFinite,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::LyapunovBound => "lyapunov-bound",
            ViolationKind::DistanceMonotonicity => "distance-monotonicity",
            ViolationKind::DescentInequality => "descent-inequality",
            ViolationKind::NonFinite => "non-finite",
        }
    }
}

/// Monitor tolerances; the defaults follow the trace scales.
#[derive(Clone, Copy, Debug, Default)]
pub struct MonitorConfig {
    /// Tolerance on the Lyapunov bound; default `1e-6 (1 + max(V0, 1))`.
    pub tol_v: Option<f64>,
    /// Allowed positive slope of `d^2` per unit time; default
    /// `1e-6 (1 + d^2(0))`.
    pub tol_mono: Option<f64>,
    /// Tolerance for the pointwise descent inequality; default
    /// `1e-6 (1 + d^2(0))`.
    pub tol_descent: Option<f64>,
}

/// Monitor outcome: violations plus the reported terminal quantities.
#[derive(Clone, Debug)]
pub struct MonitorReport {
    pub violations: Vec<Violation>,
    /// Terminal `|x| + |xhat|`.
    pub terminal_norm: f64,
    /// The bound `max(V(xhat0), 1)` used for the Lyapunov check.
    pub v_bound: f64,
    /// Final squared distance.
    pub d2_final: f64,
}

/// Check a closed-loop trace against the closed-loop invariants:
///
/// (a) `V(xhat(t)) <= max(V(xhat0), 1) + tol_V` for all records;
/// (b) central-difference `d/dt d^2 <= -alpha |grad d^2|^2_g + tol` at
///     interior records, with `|grad d^2|^2_g = 4 d^2` along geodesics;
/// (c) `d^2` non-increasing up to `tol_mono` per unit time;
/// (d) the terminal norm `|x(T)| + |xhat(T)|` is reported.
pub fn monitor(
    trace: &TrajectoryTrace,
    _cert: &LyapunovCertificate,
    cfg: &MonitorConfig,
) -> Result<MonitorReport, SimError> {
    let derived = trace.derived.as_ref().ok_or(SimError::NotClosedLoop)?;
    let mut violations = Vec::new();
    let dt = trace.dt;
    let v0 = derived.v[0];
    let d2_0 = derived.d2[0];
    let v_bound = v0.max(1.0);
    let tol_v = cfg.tol_v.unwrap_or(1e-6 * (1.0 + v_bound));
    let tol_mono = cfg.tol_mono.unwrap_or(1e-6 * (1.0 + d2_0));
    let tol_descent = cfg.tol_descent.unwrap_or(1e-6 * (1.0 + d2_0));

    for (i, row) in trace.states.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            violations.push(Violation {
                kind: ViolationKind::NonFinite,
                t: trace.times[i],
                value: f64::NAN,
                bound: 0.0,
            });
        }
    }
    // (a) Lyapunov sublevel bound
    for (i, &v) in derived.v.iter().enumerate() {
        if v > v_bound + tol_v {
            violations.push(Violation {
                kind: ViolationKind::LyapunovBound,
                t: trace.times[i],
                value: v,
                bound: v_bound + tol_v,
            });
        }
    }
    // (c) monotone squared distance
    for i in 1..derived.d2.len() {
        let rate = (derived.d2[i] - derived.d2[i - 1]) / dt;
        if rate > tol_mono {
            violations.push(Violation {
                kind: ViolationKind::DistanceMonotonicity,
                t: trace.times[i],
                value: rate,
                bound: tol_mono,
            });
        }
    }
    // (b) pointwise descent at interior records; the squared metric norm of
    // the gradient is 4 d^2 exactly
    for i in 1..derived.d2.len().saturating_sub(1) {
        let slope = (derived.d2[i + 1] - derived.d2[i - 1]) / (2.0 * dt);
        let rhs = -4.0 * derived.alpha[i] * derived.d2[i] + tol_descent;
        if slope > rhs {
            violations.push(Violation {
                kind: ViolationKind::DescentInequality,
                t: trace.times[i],
                value: slope,
                bound: rhs,
            });
        }
    }
    Ok(MonitorReport {
        violations,
        terminal_norm: derived.xnorm.last().unwrap() + derived.xhnorm.last().unwrap(),
        v_bound,
        d2_final: *derived.d2.last().unwrap(),
    })
}

/// Distance series between two trajectories driven by the same control;
/// delegates to the contraction module's non-expansion test.
pub fn pair_distance_series(
    sys: &SystemSpec,
    g: &MetricField,
    x1: &[f64],
    x2: &[f64],
    signal: &PiecewiseConstant,
    horizon: f64,
    step: f64,
) -> Result<NonexpansionReport, SimError> {
    Ok(nonexpansion_test(sys, g, x1, x2, signal, horizon, step)?)
}

/// Write the closed-loop trace CSV: header
/// `t,x1..xn,xh1..xhn,V,d2,alpha,knorm`, shortest round-trip decimals, LF
/// line endings. Byte-identical for identical traces.
pub fn write_csv(trace: &TrajectoryTrace, w: &mut impl Write) -> std::io::Result<()> {
    let derived = trace.derived.as_ref().expect("closed-loop trace required");
    let n = trace.states[0].len() / 2;
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    for i in 1..=n {
        header.push_str(&format!(",xh{i}"));
    }
    header.push_str(",V,d2,alpha,knorm");
    writeln!(w, "{header}")?;
    for (i, row) in trace.states.iter().enumerate() {
        let mut line = format!("{}", trace.times[i]);
        for v in row {
            line.push_str(&format!(",{v}"));
        }
        line.push_str(&format!(
            ",{},{},{},{}",
            derived.v[i], derived.d2[i], derived.alpha[i], derived.knorm[i]
        ));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Write a plain state trace CSV (`t,x1..xn[,V]`) for the static and
/// Jurdjevic-Quinn modes.
pub fn write_csv_static(
    trace: &TrajectoryTrace,
    v: Option<&[f64]>,
    w: &mut impl Write,
) -> std::io::Result<()> {
    let n = trace.states[0].len();
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    if v.is_some() {
        header.push_str(",V");
    }
    writeln!(w, "{header}")?;
    for (i, row) in trace.states.iter().enumerate() {
        let mut line = format!("{}", trace.times[i]);
        for val in row {
            line.push_str(&format!(",{val}"));
        }
        if let Some(vcol) = v {
            line.push_str(&format!(",{}", vcol[i]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
