//! Scalar expression DSL over state variables `x1..xn` and control variables
//! `u1..um`.
//!
//! Expressions are parsed once into an [`Expr`] tree and then evaluated
//! either on plain `f64` or on dual numbers, which supplies every Jacobian
//! and metric derivative in the crate exactly (machine precision, no finite
//! differences). Supported functions are restricted to the C^1 set
//! `sin, cos, tanh, exp, sqrt`; anything non-smooth (such as `abs`) is
//! rejected at parse time.

mod dual;
mod parser;

pub use dual::{Dual, Num};
pub use parser::{parse_expr, ParseError, ParseErrorKind};

use std::fmt;

use thiserror::Error;

use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
        }
    }
}

/// Expression tree. Variable indices are zero-based internally; the surface
/// syntax (`x1`, `u2`, ...) is one-based.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    /// State variable `x{i+1}`.
    State(usize),
    /// Control variable `u{j+1}`.
    Control(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: expression uses {what}{index} but only {got} provided")]
    DimMismatch { what: &'static str, index: usize, got: usize },
    #[error("domain error in `{expr}`: {detail}")]
    Domain { expr: String, detail: String },
    #[error("non-finite value or derivative produced by `{expr}`")]
    NonFinite { expr: String },
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    /// Evaluate on any scalar carrier. Every node is checked for finiteness
    /// so NaN/Inf are reported at the subexpression that produced them,
    /// never silently consumed downstream.
    pub fn eval_generic<T: Num>(&self, x: &[T], u: &[T]) -> Result<T, EvalError> {
        let out = match self {
            Expr::Const(c) => T::constant(*c),
            Expr::State(i) => {
                if *i >= x.len() {
                    return Err(EvalError::DimMismatch { what: "x", index: i + 1, got: x.len() });
                }
                x[*i]
            }
            Expr::Control(j) => {
                if *j >= u.len() {
                    return Err(EvalError::DimMismatch { what: "u", index: j + 1, got: u.len() });
                }
                u[*j]
            }
            Expr::Neg(e) => -e.eval_generic(x, u)?,
            Expr::Bin(op, a, b) => {
                let av = a.eval_generic(x, u)?;
                match op {
                    BinOp::Add => av + b.eval_generic(x, u)?,
                    BinOp::Sub => av - b.eval_generic(x, u)?,
                    BinOp::Mul => av * b.eval_generic(x, u)?,
                    BinOp::Div => av / b.eval_generic(x, u)?,
                    BinOp::Pow => {
                        // Integer constant exponents keep negative bases legal
                        // (and differentiable); everything else requires a
                        // positive base.
                        if let Expr::Const(c) = **b {
                            if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
                                let n = c as i32;
                                let base = av;
                                if base.primal() == 0.0 && n < 0 {
                                    return Err(EvalError::Domain {
                                        expr: self.to_string(),
                                        detail: "zero base with negative exponent".into(),
                                    });
                                }
                                let r = base.powi(n);
                                return finite_or_err(r, self);
                            }
                        }
                        let bv = b.eval_generic(x, u)?;
                        if av.primal() <= 0.0 {
                            return Err(EvalError::Domain {
                                expr: self.to_string(),
                                detail: format!(
                                    "non-positive base {}; general powers need a positive \
                                     base (integer literal exponents are exempt)",
                                    av.primal()
                                ),
                            });
                        }
                        av.powf(bv)
                    }
                }
            }
            Expr::Call(f, a) => {
                let av = a.eval_generic(x, u)?;
                match f {
                    Func::Sin => av.sin(),
                    Func::Cos => av.cos(),
                    Func::Tanh => av.tanh(),
                    Func::Exp => av.exp(),
                    Func::Sqrt => {
                        if av.primal() < 0.0 {
                            return Err(EvalError::Domain {
                                expr: self.to_string(),
                                detail: format!("sqrt of negative value {}", av.primal()),
                            });
                        }
                        av.sqrt()
                    }
                }
            }
        };
        finite_or_err(out, self)
    }

    /// Plain value evaluation.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<f64, EvalError> {
        self.eval_generic(x, u)
    }

    /// Largest zero-based state index used, if any.
    pub fn max_state_index(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::State(i) => Some(*i),
            _ => None,
        })
    }

    /// Largest zero-based control index used, if any.
    pub fn max_control_index(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::Control(j) => Some(*j),
            _ => None,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.max_state_index().is_none() && self.max_control_index().is_none()
    }

    fn fold_indices(&self, pick: &impl Fn(&Expr) -> Option<usize>) -> Option<usize> {
        let own = pick(self);
        let sub = match self {
            Expr::Const(_) | Expr::State(_) | Expr::Control(_) => None,
            Expr::Neg(e) | Expr::Call(_, e) => e.fold_indices(pick),
            Expr::Bin(_, a, b) => match (a.fold_indices(pick), b.fold_indices(pick)) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
        };
        match (own, sub) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        }
    }
}

fn finite_or_err<T: Num>(v: T, e: &Expr) -> Result<T, EvalError> {
    if v.all_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { expr: e.to_string() })
    }
}

// Precedence levels for printing: Add/Sub = 1, Mul/Div = 2, unary minus = 3,
// Pow = 4, atoms = 5. `^` binds tighter than unary minus and associates to
// the left, matching the parser.
fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Const(_) | Expr::State(_) | Expr::Control(_) | Expr::Call(..) => 5,
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Bin(BinOp::Pow, ..) => 4,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
            if prec(e) < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::State(i) => write!(f, "x{}", i + 1),
            Expr::Control(j) => write!(f, "u{}", j + 1),
            Expr::Neg(e) => {
                write!(f, "-")?;
                child(f, e, 3)
            }
            Expr::Bin(op, a, b) => {
                let (sym, p) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                child(f, a, p)?;
                write!(f, "{sym}")?;
                // strict bound on the right keeps left association explicit
                child(f, b, p + 1)
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Which variable block a Jacobian differentiates against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    State,
    Control,
}

/// Exact forward-mode Jacobian of a vector of expressions, one seeded dual
/// pass per column.
pub fn jacobian(exprs: &[Expr], x: &[f64], u: &[f64], wrt: Wrt) -> Result<Mat, EvalError> {
    let cols = match wrt {
        Wrt::State => x.len(),
        Wrt::Control => u.len(),
    };
    let mut out = Mat::zeros(exprs.len(), cols);
    let mut xd: Vec<Dual> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut ud: Vec<Dual> = u.iter().map(|&v| Dual::constant(v)).collect();
    for j in 0..cols {
        match wrt {
            Wrt::State => xd[j].dot = 1.0,
            Wrt::Control => ud[j].dot = 1.0,
        }
        for (i, e) in exprs.iter().enumerate() {
            out.set(i, j, e.eval_generic(&xd, &ud)?.dot);
        }
        match wrt {
            Wrt::State => xd[j].dot = 0.0,
            Wrt::Control => ud[j].dot = 0.0,
        }
    }
    Ok(out)
}

/// Rectangular grid of expressions over the state variables only (no `u`),
/// the carrier for metric matrices.
#[derive(Clone, Debug)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl ExprMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Expr>) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count mismatch");
        ExprMatrix { rows, cols, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(Expr::is_constant)
    }

    pub fn uses_control(&self) -> bool {
        self.entries.iter().any(|e| e.max_control_index().is_some())
    }

    pub fn max_state_index(&self) -> Option<usize> {
        self.entries.iter().filter_map(Expr::max_state_index).max()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Mat, EvalError> {
        let mut m = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.set(i, j, self.entry(i, j).eval(x, &[])?);
            }
        }
        Ok(m)
    }

    /// Entrywise directional derivative `sum_l v_l dG/dx_l` at `x`, computed
    /// in a single seeded dual pass.
    pub fn directional_derivative(&self, x: &[f64], v: &[f64]) -> Result<Mat, EvalError> {
        assert_eq!(x.len(), v.len(), "direction dimension mismatch");
        let xd: Vec<Dual> = x.iter().zip(v).map(|(&xv, &dv)| Dual::seeded(xv, dv)).collect();
        let mut m = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m.set(i, j, self.entry(i, j).eval_generic(&xd, &[])?.dot);
            }
        }
        Ok(m)
    }
}
