//! Command implementations behind the CLI: certification, simulation,
//! geodesic queries and the self-test battery. Each command returns a plain
//! `KEY: value` report plus a process exit code:
//!
//! - `0` success,
//! - `2` runtime or validation error,
//! - `3` invariant violation (failed certification, monitor violation or a
//!   terminal norm above threshold).
//!
//! Usage errors (exit `1`) are handled by the binary's argument parser.

use std::fmt::Write as _;
use std::path::Path;

use crate::contraction::{certify_weak_contraction, ContractionReport};
use crate::geometry::log_map;
use crate::linalg::{norm2, Mat};
use crate::scenario::{FeedbackMode, LambdaSource, Scenario};
use crate::sim::{
    integrate_closed_loop, integrate_fn, monitor, write_csv, write_csv_static, MonitorConfig,
    SimError, TrajectoryTrace, Violation, ViolationKind,
};
use crate::stabilizer::{build_certificate, local_lqr, ClosedLoopSystem, Feedback, JqFeedback};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

/// Flag overrides applied on top of the scenario file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    pub terminal_tol: Option<f64>,
}

/// A finished command: exit code plus the text report.
#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub exit: i32,
    pub report: String,
}

#[derive(Default)]
struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn render(&self, exit: i32) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k}: {v}");
        }
        let _ = writeln!(out, "EXIT: {exit}");
        out
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_boxes(boxes: &[(f64, f64)]) -> String {
    boxes
        .iter()
        .map(|(lo, hi)| format!("{lo},{hi}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn fmt_mat(m: &Mat) -> String {
    (0..m.rows())
        .map(|i| fmt_vec(m.row(i)))
        .collect::<Vec<_>>()
        .join(";")
}

fn seed_of(scn: &Scenario, ov: &Overrides) -> u64 {
    ov.seed
        .or_else(|| scn.simulation.as_ref().map(|s| s.seed))
        .unwrap_or(0)
}

/// Resolve the local feedback from the scenario (auto-LQR at the
/// linearization, or user expressions).
fn resolve_feedback(scn: &Scenario) -> Result<Feedback, String> {
    let n = scn.sys.state_dim();
    let m = scn.sys.control_dim();
    let Some(fb) = &scn.feedback else {
        if m == 0 {
            return Ok(Feedback::Gain(Mat::zeros(0, n)));
        }
        return Err("missing [feedback] section".into());
    };
    match &fb.lambda {
        LambdaSource::Exprs(exprs) => Ok(Feedback::Exprs(exprs.clone())),
        LambdaSource::AutoLqr { q, r } => {
            let zero_x = vec![0.0; n];
            let zero_u = vec![0.0; m];
            let a = scn.sys.jac_x(&zero_x, &zero_u).map_err(|e| e.to_string())?;
            let b = scn.sys.jac_u(&zero_x, &zero_u).map_err(|e| e.to_string())?;
            let k = local_lqr(&a, &b, *q, *r).map_err(|e| e.to_string())?;
            Ok(Feedback::Gain(k))
        }
    }
}

fn contraction_section(
    rep: &mut Report,
    scn: &Scenario,
    ov: &Overrides,
) -> Result<Option<ContractionReport>, String> {
    let Some(cert) = &scn.certification else {
        return Ok(None);
    };
    let samples = ov.samples.unwrap_or(cert.samples);
    let report = certify_weak_contraction(
        &scn.sys,
        &scn.metric,
        &cert.state_box,
        &cert.control_box,
        samples,
        seed_of(scn, ov),
    )
    .map_err(|e| e.to_string())?;
    rep.push("CONTRACTION_VERDICT", if report.pass { "pass" } else { "fail" });
    rep.push("CONTRACTION_MAX_EIG", report.max_eig);
    rep.push("CONTRACTION_TOL", report.tol);
    rep.push("CONTRACTION_SAMPLES", report.samples_used);
    rep.push("CONTRACTION_STATE_BOX", fmt_boxes(&report.state_box));
    if !report.control_box.is_empty() {
        rep.push("CONTRACTION_CONTROL_BOX", fmt_boxes(&report.control_box));
    }
    if !report.pass {
        rep.push("WITNESS_X", fmt_vec(&report.witness_x));
        rep.push("WITNESS_U", fmt_vec(&report.witness_u));
        rep.push("WITNESS_EIGENVECTOR", fmt_vec(&report.witness_vec));
    }
    Ok(Some(report))
}

/// `certify`: sampling-based weak-contraction check plus certificate
/// construction. Exit 0 when both pass, 3 when contraction is falsified,
/// 2 on errors.
pub fn cmd_certify(scn: &Scenario, ov: &Overrides) -> CommandOutput {
    let mut rep = Report::default();
    rep.push("SCENARIO", &scn.name);
    rep.push("COMMAND", "certify");
    if scn.certification.is_none() {
        rep.push("ERROR", "missing [certification] section");
        return CommandOutput { exit: EXIT_ERROR, report: rep.render(EXIT_ERROR) };
    }
    let contraction = match contraction_section(&mut rep, scn, ov) {
        Ok(r) => r,
        Err(e) => {
            rep.push("ERROR", e);
            return CommandOutput { exit: EXIT_ERROR, report: rep.render(EXIT_ERROR) };
        }
    };
    let mut cert_ok = false;
    match resolve_feedback(scn) {
        Err(e) => rep.push("CERT_ERROR", e),
        Ok(fb) => {
            let boxes = &scn.certification.as_ref().unwrap().state_box;
            let samples = ov.samples.unwrap_or(scn.certification.as_ref().unwrap().samples);
            match build_certificate(&scn.sys, &fb, None, boxes, samples, seed_of(scn, ov)) {
                Ok(cert) => {
                    cert_ok = true;
                    rep.push("CERT_C", cert.c);
                    rep.push("CERT_R_STAR", cert.r_star);
                    rep.push("CERT_P", fmt_mat(&cert.p));
                    if let Some(k) = &cert.gain {
                        rep.push("CERT_K", fmt_mat(k));
                    }
                    if let Some(fail) = cert.failing_level {
                        rep.push("CERT_FAILING_LEVEL", fail);
                    }
                }
                Err(e) => rep.push("CERT_ERROR", e),
            }
        }
    }
    let contraction_pass = contraction.as_ref().is_some_and(|c| c.pass);
    let exit = if !contraction_pass {
        EXIT_VIOLATION
    } else if !cert_ok {
        EXIT_ERROR
    } else {
        EXIT_OK
    };
    CommandOutput { exit, report: rep.render(exit) }
}

fn push_violations(rep: &mut Report, violations: &[Violation]) {
    rep.push("VIOLATIONS", violations.len());
    for (i, v) in violations.iter().take(20).enumerate() {
        rep.push(
            &format!("VIOLATION_{}", i + 1),
            format!("{} t={} value={} bound={}", v.kind.name(), v.t, v.value, v.bound),
        );
    }
}

/// `simulate`: integrate the configured loop, write the trace CSV and the
/// monitor report. Exit 0 only when no invariant is violated and the
/// terminal norm is below threshold.
pub fn cmd_simulate(scn: &Scenario, out_dir: &Path, ov: &Overrides) -> CommandOutput {
    let mut rep = Report::default();
    rep.push("SCENARIO", &scn.name);
    rep.push("COMMAND", "simulate");
    match simulate_inner(scn, out_dir, ov, &mut rep) {
        Ok(exit) => CommandOutput { exit, report: rep.render(exit) },
        Err(e) => {
            rep.push("ERROR", e);
            CommandOutput { exit: EXIT_ERROR, report: rep.render(EXIT_ERROR) }
        }
    }
}

fn simulate_inner(
    scn: &Scenario,
    out_dir: &Path,
    ov: &Overrides,
    rep: &mut Report,
) -> Result<i32, String> {
    let sim = scn
        .simulation
        .as_ref()
        .ok_or_else(|| "missing [simulation] section".to_string())?;
    let fb_spec =
        scn.feedback.as_ref().ok_or_else(|| "missing [feedback] section".to_string())?;
    let horizon = ov.horizon.unwrap_or(sim.horizon);
    let step = ov.step.unwrap_or(sim.step);
    let terminal_tol = ov.terminal_tol.unwrap_or(sim.terminal_tol);
    rep.push("MODE", fb_spec.mode.name());
    rep.push("T", horizon);
    rep.push("H", step);
    rep.push("RECORD_EVERY", sim.record_every);
    rep.push("SEED", seed_of(scn, ov));

    // weak-contraction certification runs inline whenever the scenario
    // carries a [certification] section; a falsified hypothesis is reported
    // but the monitors stay the arbiter of the exit code
    contraction_section(rep, scn, ov)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    let csv_path = out_dir.join(format!("{}.csv", scn.name));

    let (violations, terminal_norm) = match fb_spec.mode {
        FeedbackMode::Dynamic => {
            let cert_spec = scn
                .certification
                .as_ref()
                .ok_or_else(|| "missing [certification] section".to_string())?;
            let feedback = resolve_feedback(scn)?;
            let samples = ov.samples.unwrap_or(cert_spec.samples);
            let cert = build_certificate(
                &scn.sys,
                &feedback,
                None,
                &cert_spec.state_box,
                samples,
                seed_of(scn, ov),
            )
            .map_err(|e| e.to_string())?;
            rep.push("CERT_C", cert.c);
            rep.push("CERT_R_STAR", cert.r_star);
            if let Some(k) = &cert.gain {
                rep.push("CERT_K", fmt_mat(k));
            }
            let xhat0 = sim
                .xhat0
                .as_ref()
                .ok_or_else(|| "dynamic mode requires xhat0 in [simulation]".to_string())?;
            rep.push("XHAT0_IN_CERTIFIED_LEVEL", cert.contains(xhat0));
            let cl = ClosedLoopSystem::new(
                scn.sys.clone(),
                scn.metric.clone(),
                feedback,
                cert,
                fb_spec.alpha_floor,
            )
            .map_err(|e| e.to_string())?;
            let trace = integrate_closed_loop(
                &cl,
                &sim.x0,
                xhat0,
                horizon,
                step,
                sim.record_every,
            )
            .map_err(|e| sim_error(rep, e, &csv_path))?;
            let mon = monitor(&trace, &cl.cert, &MonitorConfig::default())
                .map_err(|e| e.to_string())?;
            rep.push("V_BOUND", mon.v_bound);
            rep.push("D2_FINAL", mon.d2_final);
            write_trace(&trace, None, &csv_path)?;
            (mon.violations, mon.terminal_norm)
        }
        FeedbackMode::Jq => {
            let gamma = fb_spec.gamma.ok_or_else(|| "jq mode requires gamma".to_string())?;
            rep.push("GAMMA", gamma);
            let jq = JqFeedback { gamma };
            let n = scn.sys.state_dim();
            let trace = integrate_fn(
                n,
                |_t, y, out| -> Result<(), SimError> {
                    let u = jq.control(&scn.sys, &scn.metric, y)?;
                    scn.sys.eval_field_into(y, &u, out)?;
                    Ok(())
                },
                &sim.x0,
                horizon,
                step,
                sim.record_every,
            )
            .map_err(|e| sim_error(rep, e, &csv_path))?;
            let v: Vec<f64> = trace
                .states
                .iter()
                .map(|x| jq.lyapunov(&scn.metric, x))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            // V along the damped loop must be non-increasing
            let mut violations = Vec::new();
            for i in 1..v.len() {
                if v[i] - v[i - 1] > 1e-9 {
                    violations.push(Violation {
                        kind: ViolationKind::DistanceMonotonicity,
                        t: trace.times[i],
                        value: v[i] - v[i - 1],
                        bound: 1e-9,
                    });
                }
            }
            let terminal = norm2(trace.last_state());
            rep.push("V_FINAL", *v.last().unwrap());
            write_trace(&trace, Some(&v), &csv_path)?;
            (violations, terminal)
        }
        FeedbackMode::StaticOnly => {
            let cert_spec = scn
                .certification
                .as_ref()
                .ok_or_else(|| "missing [certification] section".to_string())?;
            let feedback = resolve_feedback(scn)?;
            let samples = ov.samples.unwrap_or(cert_spec.samples);
            let cert = build_certificate(
                &scn.sys,
                &feedback,
                None,
                &cert_spec.state_box,
                samples,
                seed_of(scn, ov),
            )
            .map_err(|e| e.to_string())?;
            rep.push("CERT_C", cert.c);
            rep.push("CERT_R_STAR", cert.r_star);
            let n = scn.sys.state_dim();
            let trace = integrate_fn(
                n,
                |_t, y, out| -> Result<(), SimError> {
                    let u = feedback.eval(y)?;
                    scn.sys.eval_field_into(y, &u, out)?;
                    Ok(())
                },
                &sim.x0,
                horizon,
                step,
                sim.record_every,
            )
            .map_err(|e| sim_error(rep, e, &csv_path))?;
            let v: Vec<f64> = trace.states.iter().map(|x| cert.v(x)).collect();
            let tol = 1e-9 * (1.0 + v[0]);
            let mut violations = Vec::new();
            for i in 1..v.len() {
                if v[i] - v[i - 1] > tol {
                    violations.push(Violation {
                        kind: ViolationKind::LyapunovBound,
                        t: trace.times[i],
                        value: v[i] - v[i - 1],
                        bound: tol,
                    });
                }
            }
            let terminal = norm2(trace.last_state());
            rep.push("V_FINAL", *v.last().unwrap());
            write_trace(&trace, Some(&v), &csv_path)?;
            (violations, terminal)
        }
    };

    rep.push("TERMINAL_NORM", terminal_norm);
    rep.push("TERMINAL_TOL", terminal_tol);
    push_violations(rep, &violations);
    rep.push("CSV", csv_path.display());
    if violations.is_empty() && terminal_norm <= terminal_tol {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_VIOLATION)
    }
}

fn sim_error(rep: &mut Report, e: SimError, csv_path: &Path) -> String {
    if let SimError::Blowup { t, ref partial } = e {
        rep.push("BLOWUP_T", t);
        // keep the partial trace for post-mortem plotting
        let _ = write_trace(partial, None, csv_path);
    }
    e.to_string()
}

fn write_trace(
    trace: &TrajectoryTrace,
    v: Option<&[f64]>,
    path: &Path,
) -> Result<(), String> {
    let mut buf = Vec::new();
    let res = if trace.derived.is_some() {
        write_csv(trace, &mut buf)
    } else {
        write_csv_static(trace, v, &mut buf)
    };
    res.map_err(|e| e.to_string())?;
    std::fs::write(path, buf).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// `geodesic`: distance, log vector and shooting diagnostics between two
/// points under the scenario metric.
pub fn cmd_geodesic(scn: &Scenario, from: &[f64], to: &[f64]) -> CommandOutput {
    let mut rep = Report::default();
    rep.push("SCENARIO", &scn.name);
    rep.push("COMMAND", "geodesic");
    rep.push("FROM", fmt_vec(from));
    rep.push("TO", fmt_vec(to));
    let n = scn.sys.state_dim();
    if from.len() != n || to.len() != n {
        rep.push("ERROR", format!("points must have dimension {n}"));
        return CommandOutput { exit: EXIT_ERROR, report: rep.render(EXIT_ERROR) };
    }
    match log_map(&scn.metric, from, to) {
        Ok(log) => {
            rep.push("DISTANCE", log.distance);
            rep.push("LOG_V", fmt_vec(&log.v));
            rep.push("RESIDUAL", log.residual);
            rep.push("ITERATIONS", log.iterations);
            CommandOutput { exit: EXIT_OK, report: rep.render(EXIT_OK) }
        }
        Err(e) => {
            rep.push("ERROR", e);
            CommandOutput { exit: EXIT_ERROR, report: rep.render(EXIT_ERROR) }
        }
    }
}

/// `selftest`: run the built-in oracle battery.
pub fn cmd_selftest() -> CommandOutput {
    let results = crate::selftest::run();
    let mut rep = Report::default();
    rep.push("COMMAND", "selftest");
    let mut all_pass = true;
    for r in &results {
        all_pass &= r.pass;
        rep.push(
            &format!("SELFTEST_{}", r.name),
            format!("{} ({})", if r.pass { "PASS" } else { "FAIL" }, r.detail),
        );
    }
    rep.push("SELFTEST_TOTAL", results.len());
    let exit = if all_pass { EXIT_OK } else { EXIT_VIOLATION };
    CommandOutput { exit, report: rep.render(exit) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    const OSCILLATOR: &str = r#"
[system]
n = 2
m = 1
f1 = x2
f2 = -x1 + u1
ubox1 = -1000, 1000

[metric]
g = identity

[feedback]
mode = dynamic
lambda = auto-lqr

[simulation]
x0 = 5, 0
xhat0 = 4.99, 0.01
T = 40
h = 0.001
record_every = 10
seed = 7

[certification]
xbox1 = -5, 5
xbox2 = -5, 5
ubox1 = -1, 1
samples = 300
"#;

    #[test]
    fn certify_oscillator_exits_zero() {
        let scn = parse_scenario(OSCILLATOR, "osc").unwrap();
        let out = cmd_certify(&scn, &Overrides::default());
        assert_eq!(out.exit, EXIT_OK, "{}", out.report);
        assert!(out.report.contains("CONTRACTION_VERDICT: pass"));
        assert!(out.report.contains("CERT_R_STAR: inf"));
    }

    #[test]
    fn certify_expanding_scalar_exits_three_with_witness() {
        let text = r#"
[system]
n = 1
m = 0
f1 = x1

[metric]
g = identity

[certification]
xbox1 = -2, 2
samples = 50
"#;
        let scn = parse_scenario(text, "expanding").unwrap();
        let out = cmd_certify(&scn, &Overrides::default());
        assert_eq!(out.exit, EXIT_VIOLATION, "{}", out.report);
        assert!(out.report.contains("CONTRACTION_VERDICT: fail"));
        assert!(out.report.contains("CONTRACTION_MAX_EIG: 2"));
    }

    #[test]
    fn certify_reports_are_reproducible() {
        let scn = parse_scenario(OSCILLATOR, "osc").unwrap();
        let a = cmd_certify(&scn, &Overrides::default());
        let b = cmd_certify(&scn, &Overrides::default());
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn simulate_oscillator_converges() {
        let scn = parse_scenario(OSCILLATOR, "osc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_simulate(&scn, dir.path(), &Overrides::default());
        assert_eq!(out.exit, EXIT_OK, "{}", out.report);
        assert!(out.report.contains("VIOLATIONS: 0"));
        assert!(dir.path().join("osc.csv").exists());
    }

    #[test]
    fn simulate_expanding_control_exits_three() {
        let text = r#"
[system]
n = 1
m = 1
f1 = x1 + u1
ubox1 = -1000, 1000

[metric]
g = identity

[feedback]
mode = dynamic
lambda = auto-lqr

[simulation]
x0 = 1
xhat0 = 0
T = 5
h = 0.001
record_every = 10

[certification]
xbox1 = -2, 2
ubox1 = -1, 1
samples = 100
"#;
        let scn = parse_scenario(text, "expanding_ctrl").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_simulate(&scn, dir.path(), &Overrides::default());
        assert_eq!(out.exit, EXIT_VIOLATION, "{}", out.report);
        assert!(out.report.contains("CONTRACTION_VERDICT: fail"));
        assert!(out.report.contains("distance-monotonicity"));
    }

    #[test]
    fn simulate_rest_at_origin_stays() {
        let text = OSCILLATOR
            .replace("x0 = 5, 0", "x0 = 0, 0")
            .replace("xhat0 = 4.99, 0.01", "xhat0 = 0, 0")
            .replace("T = 40", "T = 1");
        let scn = parse_scenario(&text, "origin").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_simulate(&scn, dir.path(), &Overrides::default());
        assert_eq!(out.exit, EXIT_OK, "{}", out.report);
        assert!(out.report.contains("TERMINAL_NORM: 0"));
    }

    #[test]
    fn geodesic_constant_metric_closed_form() {
        let scn = parse_scenario(OSCILLATOR, "osc").unwrap();
        let out = cmd_geodesic(&scn, &[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(out.exit, EXIT_OK);
        assert!(out.report.contains("DISTANCE: 5"));
    }

    #[test]
    fn geodesic_dimension_mismatch_is_error() {
        let scn = parse_scenario(OSCILLATOR, "osc").unwrap();
        let out = cmd_geodesic(&scn, &[0.0], &[1.0]);
        assert_eq!(out.exit, EXIT_ERROR);
    }
}
