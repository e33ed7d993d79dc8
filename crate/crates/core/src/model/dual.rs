//! Scalar abstraction used by the network evaluator.
//!
//! The same forward/backward code runs on plain `f64` (values and gradients)
//! and on [`Dual`] numbers seeded with a direction, which yields the exact
//! Hessian-vector product as the tangent of the gradient.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub(crate) trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
}

fn softplus_f64(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.re);
        Dual::new(s, self.eps * s * (1.0 - s))
    }
    fn softplus(self) -> Self {
        Dual::new(softplus_f64(self.re), self.eps * sigmoid_f64(self.re))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn tangents_match_finite_differences() {
        for &x in &[-2.3, -0.4, 0.0, 0.7, 3.1] {
            let d = Dual::new(x, 1.0);
            assert!((d.tanh().eps - fd(f64::tanh, x)).abs() < 1e-8);
            assert!((d.softplus().eps - fd(softplus_f64, x)).abs() < 1e-8);
            assert!((d.sigmoid().eps - fd(sigmoid_f64, x)).abs() < 1e-8);
            assert!((d.exp().eps - fd(f64::exp, x)).abs() < 1e-6);
        }
        let d = Dual::new(2.0, 1.0);
        assert!((d.ln().eps - 0.5).abs() < 1e-15);
        assert_eq!((d * d).eps, 4.0);
        assert!(((Dual::cst(1.0) / d).eps + 0.25).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus_f64(800.0), 800.0);
        assert!(softplus_f64(-800.0) >= 0.0);
    }
}
