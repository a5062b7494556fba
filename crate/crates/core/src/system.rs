//! Control system description: dimensions, admissible control box and the
//! vector field `f(x, u)` as parsed expressions.

use thiserror::Error;

use crate::expr::{jacobian, EvalError, Expr, Wrt};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("expected {expected} field expressions, got {got}")]
    FieldCount { expected: usize, got: usize },
    #[error("control box must be {expected} open intervals containing 0, got {got}")]
    ControlBoxCount { expected: usize, got: usize },
    #[error("control interval {index} = ({lo}, {hi}) must satisfy lo < 0 < hi")]
    BadControlInterval { index: usize, lo: f64, hi: f64 },
    #[error("f{index}(0,0) = {value:.3e}, the field must vanish at the origin")]
    NotVanishingAtOrigin { index: usize, value: f64 },
    #[error("f{index} references {what}{var_index} beyond declared dimensions")]
    IndexOutOfRange { index: usize, what: char, var_index: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The control system `xdot = f(x, u)` with `f(0, 0) = 0`, controls
/// constrained to an open box containing the origin.
#[derive(Clone, Debug)]
pub struct SystemSpec {
    n: usize,
    m: usize,
    f: Vec<Expr>,
    control_box: Vec<(f64, f64)>,
}

impl SystemSpec {
    pub fn new(
        n: usize,
        m: usize,
        f: Vec<Expr>,
        control_box: Vec<(f64, f64)>,
    ) -> Result<Self, SystemError> {
        let sys = Self::new_raw(n, m, f, control_box)?;
        let zero_x = vec![0.0; n];
        let zero_u = vec![0.0; m];
        for (i, e) in sys.f.iter().enumerate() {
            let v = e.eval(&zero_x, &zero_u)?;
            if v.abs() > 1e-12 {
                return Err(SystemError::NotVanishingAtOrigin { index: i + 1, value: v });
            }
        }
        Ok(sys)
    }

    /// Like [`SystemSpec::new`] but without requiring `f(0, 0) = 0`;
    /// contraction analysis applies to fields that do not fix the origin.
    pub fn new_raw(
        n: usize,
        m: usize,
        f: Vec<Expr>,
        control_box: Vec<(f64, f64)>,
    ) -> Result<Self, SystemError> {
        if f.len() != n {
            return Err(SystemError::FieldCount { expected: n, got: f.len() });
        }
        if control_box.len() != m {
            return Err(SystemError::ControlBoxCount { expected: m, got: control_box.len() });
        }
        for (j, &(lo, hi)) in control_box.iter().enumerate() {
            if !(lo < 0.0 && 0.0 < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SystemError::BadControlInterval { index: j + 1, lo, hi });
            }
        }
        for (i, e) in f.iter().enumerate() {
            if let Some(k) = e.max_state_index() {
                if k >= n {
                    return Err(SystemError::IndexOutOfRange {
                        index: i + 1,
                        what: 'x',
                        var_index: k + 1,
                    });
                }
            }
            if let Some(k) = e.max_control_index() {
                if k >= m {
                    return Err(SystemError::IndexOutOfRange {
                        index: i + 1,
                        what: 'u',
                        var_index: k + 1,
                    });
                }
            }
        }
        Ok(SystemSpec { n, m, f, control_box })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn field_exprs(&self) -> &[Expr] {
        &self.f
    }

    pub fn control_box(&self) -> &[(f64, f64)] {
        &self.control_box
    }

    pub fn control_in_box(&self, u: &[f64]) -> bool {
        u.len() == self.m
            && u.iter().zip(&self.control_box).all(|(&v, &(lo, hi))| lo < v && v < hi)
    }

    /// Clamp a control into the admissible box (slightly inside the open
    /// endpoints).
    pub fn clamp_control(&self, u: &mut [f64]) {
        for (v, &(lo, hi)) in u.iter_mut().zip(&self.control_box) {
            let margin = 1e-12 * (hi - lo);
            *v = v.clamp(lo + margin, hi - margin);
        }
    }

    pub fn eval_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.f.iter().map(|e| e.eval(x, u)).collect()
    }

    pub fn eval_field_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.f) {
            *o = e.eval(x, u)?;
        }
        Ok(())
    }

    /// `df/dx` at `(x, u)`.
    pub fn jac_x(&self, x: &[f64], u: &[f64]) -> Result<Mat, EvalError> {
        jacobian(&self.f, x, u, Wrt::State)
    }

    /// `df/du` at `(x, u)`.
    pub fn jac_u(&self, x: &[f64], u: &[f64]) -> Result<Mat, EvalError> {
        jacobian(&self.f, x, u, Wrt::Control)
    }

    /// Drift `a(x) = f(x, 0)` of the control-affine view.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.eval_field(x, &vec![0.0; self.m])
    }

    /// Input matrix `b(x) = df/du (x, 0)` of the control-affine view.
    pub fn input_matrix(&self, x: &[f64]) -> Result<Mat, EvalError> {
        self.jac_u(x, &vec![0.0; self.m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn e(src: &str, n: usize, m: usize) -> Expr {
        parse_expr(src, n, m).unwrap()
    }

    #[test]
    fn accepts_vanishing_field() {
        let sys = SystemSpec::new(
            2,
            1,
            vec![e("x2", 2, 1), e("-x1 + u1", 2, 1)],
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        assert_eq!(sys.eval_field(&[1.0, 2.0], &[0.5]).unwrap(), vec![2.0, -0.5]);
    }

    #[test]
    fn rejects_nonvanishing_field() {
        let err = SystemSpec::new(1, 0, vec![e("x1 + 1", 1, 0)], vec![]).unwrap_err();
        assert!(matches!(err, SystemError::NotVanishingAtOrigin { index: 1, .. }));
    }

    #[test]
    fn rejects_box_without_origin() {
        let err =
            SystemSpec::new(1, 1, vec![e("u1", 1, 1)], vec![(0.5, 2.0)]).unwrap_err();
        assert!(matches!(err, SystemError::BadControlInterval { .. }));
    }

    #[test]
    fn control_affine_view() {
        let sys = SystemSpec::new(
            2,
            1,
            vec![e("x2 + 0.2*x2*u1", 2, 1), e("-x1 + (1 - 0.2*x1)*u1", 2, 1)],
            vec![(-10.0, 10.0)],
        )
        .unwrap();
        let a = sys.drift(&[1.0, 3.0]).unwrap();
        assert_eq!(a, vec![3.0, -1.0]);
        let b = sys.input_matrix(&[1.0, 3.0]).unwrap();
        assert!((b.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((b.get(1, 0) - 0.8).abs() < 1e-15);
    }
}
