//! Forward-mode automatic differentiation via dual numbers.
//!
//! A [`Dual`] carries a primal value and one directional derivative. Full
//! Jacobians are assembled column by column with one seeded pass per input
//! direction; directional derivatives need a single pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    /// Primal value.
    pub val: f64,
    /// Tangent (derivative along the seeded direction).
    pub dot: f64,
}

impl Dual {
    #[inline]
    pub fn constant(val: f64) -> Self {
        Dual { val, dot: 0.0 }
    }

    #[inline]
    pub fn seeded(val: f64, dot: f64) -> Self {
        Dual { val, dot }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual { val: self.val + o.val, dot: self.dot + o.dot }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual { val: self.val - o.val, dot: self.dot - o.dot }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual { val: self.val * o.val, dot: self.dot * o.val + self.val * o.dot }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual {
            val: self.val / o.val,
            dot: (self.dot * o.val - self.val * o.dot) / (o.val * o.val),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual { val: -self.val, dot: -self.dot }
    }
}

/// Scalar abstraction the expression evaluator is generic over: plain `f64`
/// for values, [`Dual`] for derivatives. Domain preconditions (negative
/// sqrt, non-positive base of a real power) are checked by the evaluator via
/// [`Num::primal`] before the operation is applied.
pub trait Num:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;
    fn primal(&self) -> f64;
    /// True when the value and every carried derivative are finite.
    fn all_finite(&self) -> bool;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    /// Real power; callers must ensure the base is positive.
    fn powf(self, e: Self) -> Self;
}

impl Num for f64 {
    #[inline]
    fn constant(c: f64) -> Self {
        c
    }
    #[inline]
    fn primal(&self) -> f64 {
        *self
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        f64::powf(self, e)
    }
}

impl Num for Dual {
    #[inline]
    fn constant(c: f64) -> Self {
        Dual::constant(c)
    }
    #[inline]
    fn primal(&self) -> f64 {
        self.val
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.val.is_finite() && self.dot.is_finite()
    }
    #[inline]
    fn sin(self) -> Self {
        Dual { val: self.val.sin(), dot: self.dot * self.val.cos() }
    }
    #[inline]
    fn cos(self) -> Self {
        Dual { val: self.val.cos(), dot: -self.dot * self.val.sin() }
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        Dual { val: t, dot: self.dot * (1.0 - t * t) }
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual { val: e, dot: self.dot * e }
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Dual { val: s, dot: self.dot / (2.0 * s) }
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual::constant(1.0);
        }
        Dual {
            val: self.val.powi(n),
            dot: self.dot * f64::from(n) * self.val.powi(n - 1),
        }
    }
    #[inline]
    fn powf(self, e: Self) -> Self {
        let p = self.val.powf(e.val);
        Dual { val: p, dot: p * (e.dot * self.val.ln() + e.val * self.dot / self.val) }
    }
}
