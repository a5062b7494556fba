//! Scenario files: the line-oriented text format consumed by the CLI.
//!
//! ```text
//! # comment
//! [system]
//! n = 2
//! m = 1
//! f1 = x2
//! f2 = -x1 + u1
//! ubox1 = -100, 100          # admissible open interval for u1, contains 0
//!
//! [metric]
//! g = identity               # or entries g11 = ..., g12 = ..., ..., gnn = ...
//!
//! [feedback]
//! mode = dynamic             # dynamic | jq | static-only
//! lambda = auto-lqr          # auto-lqr | expressions (lambda1 = ..., ...)
//! q = 1                      # LQR state weight (auto-lqr)
//! r = 1                      # LQR control weight (auto-lqr)
//! gamma = 0.5                # damping gain (jq mode)
//! alpha_floor = 0            # optional lower bound on alpha
//!
//! [simulation]
//! x0 = 10, 0
//! xhat0 = 0, 0               # required for dynamic mode
//! T = 60
//! h = 0.001
//! record_every = 10
//! seed = 0
//! terminal_tol = 0.001
//!
//! [certification]
//! xbox1 = -5, 5
//! xbox2 = -5, 5
//! ubox1 = -1, 1
//! samples = 1000
//! ```
//!
//! Sections `[system]` and `[metric]` are mandatory; the others are needed
//! only by the commands that use them. Keys are `key = value`, `#` starts a
//! comment, unknown sections or keys are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::expr::{parse_expr, Expr, ExprMatrix};
use crate::geometry::MetricField;
use crate::system::SystemSpec;

#[derive(Debug, Error)]
pub struct ScenarioError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => write!(f, "{}", self.msg),
        }
    }
}

fn err<T>(line: Option<usize>, msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError { line, msg: msg.into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedbackMode {
    Dynamic,
    Jq,
    StaticOnly,
}

impl FeedbackMode {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackMode::Dynamic => "dynamic",
            FeedbackMode::Jq => "jq",
            FeedbackMode::StaticOnly => "static-only",
        }
    }
}

#[derive(Clone, Debug)]
pub enum LambdaSource {
    AutoLqr { q: f64, r: f64 },
    Exprs(Vec<Expr>),
}

#[derive(Clone, Debug)]
pub struct FeedbackSpec {
    pub mode: FeedbackMode,
    pub lambda: LambdaSource,
    pub gamma: Option<f64>,
    pub alpha_floor: f64,
}

#[derive(Clone, Debug)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    pub xhat0: Option<Vec<f64>>,
    pub horizon: f64,
    pub step: f64,
    pub record_every: usize,
    pub seed: u64,
    pub terminal_tol: f64,
}

#[derive(Clone, Debug)]
pub struct CertificationSpec {
    pub state_box: Vec<(f64, f64)>,
    pub control_box: Vec<(f64, f64)>,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub sys: SystemSpec,
    pub metric: MetricField,
    pub feedback: Option<FeedbackSpec>,
    pub simulation: Option<SimulationSpec>,
    pub certification: Option<CertificationSpec>,
}

struct Section {
    line: usize,
    entries: BTreeMap<String, (String, usize)>,
}

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>, ScenarioError> {
    const SECTIONS: [&str; 5] = ["system", "metric", "feedback", "simulation", "certification"];
    let mut out: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) {
                return err(Some(lineno), format!("unknown section [{name}]"));
            }
            if out.contains_key(&name) {
                return err(Some(lineno), format!("duplicate section [{name}]"));
            }
            out.insert(name.clone(), Section { line: lineno, entries: BTreeMap::new() });
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(Some(lineno), format!("expected `key = value`, got `{line}`"));
        };
        let Some(section) = &current else {
            return err(Some(lineno), "key outside of any [section]");
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let entries = &mut out.get_mut(section).unwrap().entries;
        if entries.insert(key.clone(), (value, lineno)).is_some() {
            return err(Some(lineno), format!("duplicate key `{key}`"));
        }
    }
    Ok(out)
}

struct SectionReader {
    name: &'static str,
    line: usize,
    entries: BTreeMap<String, (String, usize)>,
}

impl SectionReader {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn require(&mut self, key: &str) -> Result<(String, usize), ScenarioError> {
        self.take(key).ok_or_else(|| ScenarioError {
            line: Some(self.line),
            msg: format!("missing key `{key}` in [{}]", self.name),
        })
    }

    fn finish(self) -> Result<(), ScenarioError> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return err(Some(line), format!("unknown key `{key}` in [{}]", self.name));
        }
        Ok(())
    }
}

fn parse_f64(raw: &(String, usize)) -> Result<f64, ScenarioError> {
    raw.0
        .parse()
        .map_err(|_| ScenarioError { line: Some(raw.1), msg: format!("not a number: `{}`", raw.0) })
}

fn parse_usize(raw: &(String, usize)) -> Result<usize, ScenarioError> {
    raw.0.parse().map_err(|_| ScenarioError {
        line: Some(raw.1),
        msg: format!("not a non-negative integer: `{}`", raw.0),
    })
}

fn parse_vec(raw: &(String, usize), dim: usize) -> Result<Vec<f64>, ScenarioError> {
    let parts: Result<Vec<f64>, _> =
        raw.0.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let v = parts.map_err(|_| ScenarioError {
        line: Some(raw.1),
        msg: format!("not a comma-separated vector: `{}`", raw.0),
    })?;
    if v.len() != dim {
        return err(
            Some(raw.1),
            format!("expected {dim} components, got {} in `{}`", v.len(), raw.0),
        );
    }
    Ok(v)
}

fn parse_interval(raw: &(String, usize)) -> Result<(f64, f64), ScenarioError> {
    let v = parse_vec(raw, 2)?;
    if !(v[0] < v[1]) {
        return err(Some(raw.1), format!("interval must satisfy lo < hi, got `{}`", raw.0));
    }
    Ok((v[0], v[1]))
}

fn parse_expr_at(raw: &(String, usize), n: usize, m: usize) -> Result<Expr, ScenarioError> {
    parse_expr(&raw.0, n, m)
        .map_err(|e| ScenarioError { line: Some(raw.1), msg: format!("in `{}`: {e}", raw.0) })
}

/// Parse and validate a scenario from text; `name` labels outputs.
pub fn parse_scenario(text: &str, name: &str) -> Result<Scenario, ScenarioError> {
    let mut sections = split_sections(text)?;
    let mut reader = |key: &'static str| -> Option<SectionReader> {
        sections
            .remove(key)
            .map(|s| SectionReader { name: key, line: s.line, entries: s.entries })
    };

    // [system]
    let mut system = reader("system")
        .ok_or_else(|| ScenarioError { line: None, msg: "missing [system] section".into() })?;
    let n = parse_usize(&system.require("n")?)?;
    let m = parse_usize(&system.require("m")?)?;
    if n == 0 || n > 8 {
        return err(None, format!("state dimension n = {n} outside supported range 1..=8"));
    }
    let mut f = Vec::with_capacity(n);
    for i in 1..=n {
        let raw = system.require(&format!("f{i}"))?;
        f.push(parse_expr_at(&raw, n, m)?);
    }
    let mut control_box = Vec::with_capacity(m);
    for j in 1..=m {
        let raw = system.require(&format!("ubox{j}"))?;
        control_box.push(parse_interval(&raw)?);
    }
    system.finish()?;
    let sys = SystemSpec::new(n, m, f, control_box)
        .map_err(|e| ScenarioError { line: None, msg: format!("[system]: {e}") })?;

    // [metric]
    let mut metric_sec = reader("metric")
        .ok_or_else(|| ScenarioError { line: None, msg: "missing [metric] section".into() })?;
    let metric = if let Some(g) = metric_sec.take("g") {
        if g.0 != "identity" {
            return err(Some(g.1), format!("metric `g` must be `identity`, got `{}`", g.0));
        }
        metric_sec.finish()?;
        MetricField::identity(n)
    } else {
        let mut entries = Vec::with_capacity(n * n);
        for i in 1..=n {
            for j in 1..=n {
                let raw = metric_sec.require(&format!("g{i}{j}"))?;
                entries.push(parse_expr_at(&raw, n, 0)?);
            }
        }
        metric_sec.finish()?;
        MetricField::new(ExprMatrix::new(n, n, entries))
            .map_err(|e| ScenarioError { line: None, msg: format!("[metric]: {e}") })?
    };

    // [feedback]
    let feedback = match reader("feedback") {
        None => None,
        Some(mut fb) => {
            let mode_raw = fb.require("mode")?;
            let mode = match mode_raw.0.as_str() {
                "dynamic" => FeedbackMode::Dynamic,
                "jq" => FeedbackMode::Jq,
                "static-only" => FeedbackMode::StaticOnly,
                other => {
                    return err(
                        Some(mode_raw.1),
                        format!("mode must be dynamic | jq | static-only, got `{other}`"),
                    )
                }
            };
            let gamma = fb.take("gamma").map(|raw| parse_f64(&raw)).transpose()?;
            let alpha_floor = fb
                .take("alpha_floor")
                .map(|raw| parse_f64(&raw))
                .transpose()?
                .unwrap_or(0.0);
            if alpha_floor < 0.0 {
                return err(None, "alpha_floor must be non-negative");
            }
            let lambda = match fb.take("lambda") {
                Some(src) if src.0 == "auto-lqr" => {
                    let q =
                        fb.take("q").map(|raw| parse_f64(&raw)).transpose()?.unwrap_or(1.0);
                    let r =
                        fb.take("r").map(|raw| parse_f64(&raw)).transpose()?.unwrap_or(1.0);
                    LambdaSource::AutoLqr { q, r }
                }
                Some(src) if src.0 == "expressions" => {
                    let mut exprs = Vec::with_capacity(m);
                    for j in 1..=m {
                        let raw = fb.require(&format!("lambda{j}"))?;
                        exprs.push(parse_expr_at(&raw, n, 0)?);
                    }
                    LambdaSource::Exprs(exprs)
                }
                Some(src) => {
                    return err(
                        Some(src.1),
                        format!("lambda must be auto-lqr | expressions, got `{}`", src.0),
                    )
                }
                None => LambdaSource::AutoLqr { q: 1.0, r: 1.0 },
            };
            if mode == FeedbackMode::Jq && gamma.is_none() {
                return err(None, "jq mode requires `gamma` in [feedback]");
            }
            fb.finish()?;
            Some(FeedbackSpec { mode, lambda, gamma, alpha_floor })
        }
    };

    // [simulation]
    let simulation = match reader("simulation") {
        None => None,
        Some(mut sim) => {
            let x0 = parse_vec(&sim.require("x0")?, n)?;
            let xhat0 = sim.take("xhat0").map(|raw| parse_vec(&raw, n)).transpose()?;
            let horizon = parse_f64(&sim.require("T")?)?;
            let step = parse_f64(&sim.require("h")?)?;
            let record_every = sim
                .take("record_every")
                .map(|raw| parse_usize(&raw))
                .transpose()?
                .unwrap_or(10);
            let seed =
                sim.take("seed").map(|raw| parse_usize(&raw)).transpose()?.unwrap_or(0) as u64;
            let terminal_tol = sim
                .take("terminal_tol")
                .map(|raw| parse_f64(&raw))
                .transpose()?
                .unwrap_or(1e-3);
            sim.finish()?;
            if !(horizon > 0.0 && step > 0.0) || record_every == 0 {
                return err(None, "[simulation]: T, h and record_every must be positive");
            }
            Some(SimulationSpec { x0, xhat0, horizon, step, record_every, seed, terminal_tol })
        }
    };

    // [certification]
    let certification = match reader("certification") {
        None => None,
        Some(mut cert) => {
            let mut state_box = Vec::with_capacity(n);
            for i in 1..=n {
                state_box.push(parse_interval(&cert.require(&format!("xbox{i}"))?)?);
            }
            let mut cbox = Vec::with_capacity(m);
            for j in 1..=m {
                cbox.push(parse_interval(&cert.require(&format!("ubox{j}"))?)?);
            }
            let samples = cert
                .take("samples")
                .map(|raw| parse_usize(&raw))
                .transpose()?
                .unwrap_or(1000);
            cert.finish()?;
            for (j, &(lo, hi)) in cbox.iter().enumerate() {
                let (blo, bhi) = sys.control_box()[j];
                if lo < blo || hi > bhi {
                    return err(
                        None,
                        format!(
                            "[certification]: ubox{} = ({lo}, {hi}) exceeds the admissible \
                             control box ({blo}, {bhi})",
                            j + 1
                        ),
                    );
                }
            }
            Some(CertificationSpec { state_box, control_box: cbox, samples })
        }
    };

    Ok(Scenario { name: name.to_string(), sys, metric, feedback, simulation, certification })
}

/// Load a scenario from a file path.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
        line: None,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    parse_scenario(&text, &name).map_err(|mut e| {
        e.msg = format!("{}: {}", path.display(), e.msg);
        e
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const OSCILLATOR: &str = r#"
# harmonic oscillator with a force input
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
q = 1
r = 1

[simulation]
x0 = 50, 0
xhat0 = 49.99, 0.01
T = 60
h = 0.001
record_every = 10
seed = 42

[certification]
xbox1 = -5, 5
xbox2 = -5, 5
ubox1 = -1, 1
samples = 500
"#;

    #[test]
    fn loads_oscillator() {
        let scn = parse_scenario(OSCILLATOR, "oscillator").unwrap();
        assert_eq!(scn.sys.state_dim(), 2);
        assert_eq!(scn.sys.control_dim(), 1);
        assert!(scn.metric.is_constant());
        let fb = scn.feedback.unwrap();
        assert_eq!(fb.mode, FeedbackMode::Dynamic);
        let sim = scn.simulation.unwrap();
        assert_eq!(sim.x0, vec![50.0, 0.0]);
        assert_eq!(sim.seed, 42);
        assert_eq!(scn.certification.unwrap().samples, 500);
    }

    #[test]
    fn field_must_vanish_at_origin() {
        let text = OSCILLATOR.replace("f1 = x2", "f1 = x2 + 1");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("vanish at the origin"), "{e}");
    }

    #[test]
    fn missing_metric_section_named() {
        let text: String = OSCILLATOR
            .lines()
            .filter(|l| !l.contains("[metric]") && !l.contains("g = identity"))
            .collect::<Vec<_>>()
            .join("\n");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("missing [metric] section"), "{e}");
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = OSCILLATOR.replace("seed = 42", "sede = 42");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("unknown key `sede`"), "{e}");
        assert!(e.line.is_some());
    }

    #[test]
    fn unknown_section_rejected() {
        let text = format!("{OSCILLATOR}\n[plotting]\ncolor = red\n");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("unknown section"), "{e}");
    }

    #[test]
    fn wrong_vector_arity_reported() {
        let text = OSCILLATOR.replace("x0 = 50, 0", "x0 = 50, 0, 1");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("expected 2 components"), "{e}");
    }

    #[test]
    fn expression_errors_carry_line_numbers() {
        let text = OSCILLATOR.replace("f2 = -x1 + u1", "f2 = -x1 + u7");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.line.is_some());
        assert!(e.msg.contains("out of range"), "{e}");
    }

    #[test]
    fn jq_mode_requires_gamma() {
        let text = OSCILLATOR.replace("mode = dynamic", "mode = jq");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("gamma"), "{e}");
    }

    #[test]
    fn certification_control_box_must_fit() {
        let text = OSCILLATOR.replace("ubox1 = -1000, 1000", "ubox1 = -0.5, 0.5");
        let e = parse_scenario(&text, "bad").unwrap_err();
        assert!(e.msg.contains("exceeds the admissible control box"), "{e}");
    }

    #[test]
    fn metric_entries_accepted() {
        let text = OSCILLATOR.replace(
            "g = identity",
            "g11 = 1 + 4*x1^2\ng12 = 2*x1\ng21 = 2*x1\ng22 = 1",
        );
        let scn = parse_scenario(&text, "pullback").unwrap();
        assert!(!scn.metric.is_constant());
    }
}
