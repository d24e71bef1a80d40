use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// Numeric type carried by a [`Tape`](super::Tape).
///
/// `f64` gives plain reverse mode. [`Dual`] runs the same reverse sweep over
/// first-order dual numbers, so the tangent part of every adjoint is a
/// directional derivative of the gradient (forward-over-reverse).
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal part.
    fn value(self) -> f64;

    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
}

/// First-order dual number `re + du·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }

    #[inline]
    fn value(self) -> f64 {
        self.re
    }

    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.du.is_finite()
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re * c, self.du * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_product_rule() {
        let x = Dual::new(3.0, 1.0);
        let y = x * x * x;
        assert_eq!(y.re, 27.0);
        assert_eq!(y.du, 27.0);
    }

    #[test]
    fn dual_finite_checks_tangent() {
        assert!(!Dual::new(1.0, f64::NAN).is_finite());
        assert!(Dual::new(1.0, 2.0).is_finite());
    }
}
