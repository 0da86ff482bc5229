//! Scalar types the computation graph is generic over.
//!
//! The tape in [`crate::autodiff`] records operations on any type implementing
//! [`Scalar`]: plain floats, forward-mode duals, or the two-tag truncated
//! Taylor jets used by the PDE residuals. Reverse-mode accumulation works for
//! all of them because every operation's local Jacobian acts on a scalar by
//! (transposed) ring multiplication, which each type supplies via
//! [`Scalar::adjoint_mul`].

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Derivative slot of a jet. `FirstA`/`SecondA` address the first tag,
/// `FirstB`/`SecondB` the second; plain floats only populate `Value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Value,
    FirstA,
    SecondA,
    FirstB,
    SecondB,
}

/// Closed arithmetic carrier for the tape.
///
/// Implementations form a commutative ring with the analytic functions below
/// extended coefficientwise, so the chain rule holds verbatim when a tape is
/// evaluated over them.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    /// Base (order-zero) component, recursively for nested types.
    fn primal(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// Power with a constant (compile-time fixed) exponent.
    fn powf_const(self, e: f64) -> Self;

    /// Read a derivative slot, re-embedded as an order-zero value.
    /// Second-order slots are returned as derivatives (twice the Taylor
    /// coefficient). Slots a type does not carry read as zero.
    fn part(self, slot: Slot) -> Self;
    /// Unit seed in the given slot; `Slot::Value` is `one()`.
    fn seed(slot: Slot) -> Self;
    /// Transposed action of multiplication-by-`partial` on the covector
    /// `upstream`. For plain floats this is ordinary multiplication.
    fn adjoint_mul(partial: Self, upstream: Self) -> Self;
    /// Covector update crossing a `part(slot)` extraction backwards.
    fn adjoint_part(slot: Slot, upstream: Self) -> Self;

    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar_for_float {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn primal(self) -> f64 {
                self as f64
            }
            #[inline]
            fn zero() -> Self {
                <$t as num_traits::Zero>::zero()
            }
            #[inline]
            fn one() -> Self {
                <$t as num_traits::One>::one()
            }
            #[inline]
            fn exp(self) -> Self {
                num_traits::Float::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                num_traits::Float::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                num_traits::Float::tanh(self)
            }
            #[inline]
            fn sin(self) -> Self {
                num_traits::Float::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                num_traits::Float::cos(self)
            }
            #[inline]
            fn powf_const(self, e: f64) -> Self {
                num_traits::Float::powf(self, e as $t)
            }
            #[inline]
            fn part(self, slot: Slot) -> Self {
                match slot {
                    Slot::Value => self,
                    _ => 0.0,
                }
            }
            #[inline]
            fn seed(slot: Slot) -> Self {
                match slot {
                    Slot::Value => 1.0,
                    _ => 0.0,
                }
            }
            #[inline]
            fn adjoint_mul(partial: Self, upstream: Self) -> Self {
                partial * upstream
            }
            #[inline]
            fn adjoint_part(slot: Slot, upstream: Self) -> Self {
                match slot {
                    Slot::Value => upstream,
                    _ => 0.0,
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                num_traits::Float::is_finite(self)
            }
        }
    };
}

impl_scalar_for_float!(f32);
impl_scalar_for_float!(f64);

/// First-order forward-mode dual number over any scalar.
///
/// Nesting (`Dual<Dual<f64>>`, ...) yields exact higher and mixed partials;
/// the tape uses up to three levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub du: S,
}

impl<S: Scalar> Dual<S> {
    #[inline]
    pub fn new(re: S, du: S) -> Self {
        Dual { re, du }
    }
    #[inline]
    pub fn constant(re: S) -> Self {
        Dual { re, du: S::zero() }
    }
    /// Variable with unit derivative tag.
    #[inline]
    pub fn variable(re: S) -> Self {
        Dual { re, du: S::one() }
    }

    #[inline]
    fn chain(self, value: S, deriv: S) -> Self {
        Dual {
            re: value,
            du: deriv * self.du,
        }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}
impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}
impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}
impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let re = self.re / o.re;
        Dual::new(re, (self.du - re * o.du) / o.re)
    }
}
impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.du)
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(S::from_f64(x))
    }
    #[inline]
    fn primal(self) -> f64 {
        self.re.primal()
    }
    #[inline]
    fn zero() -> Self {
        Dual::constant(S::zero())
    }
    #[inline]
    fn one() -> Self {
        Dual::constant(S::one())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.re.ln(), S::one() / self.re)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, S::one() - t * t)
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    #[inline]
    fn powf_const(self, e: f64) -> Self {
        let deriv = S::from_f64(e) * self.re.powf_const(e - 1.0);
        self.chain(self.re.powf_const(e), deriv)
    }
    #[inline]
    fn part(self, slot: Slot) -> Self {
        match slot {
            Slot::Value => Dual::constant(self.re),
            Slot::FirstA => Dual::constant(self.du),
            _ => Dual::constant(S::zero()),
        }
    }
    #[inline]
    fn seed(slot: Slot) -> Self {
        match slot {
            Slot::Value => Self::one(),
            Slot::FirstA => Dual::new(S::zero(), S::one()),
            _ => Self::zero(),
        }
    }
    #[inline]
    fn adjoint_mul(partial: Self, upstream: Self) -> Self {
        // Transpose of multiplication by `partial` in the dual ring.
        Dual::new(
            partial.re * upstream.re + partial.du * upstream.du,
            partial.re * upstream.du,
        )
    }
    #[inline]
    fn adjoint_part(slot: Slot, upstream: Self) -> Self {
        match slot {
            Slot::Value => Dual::new(upstream.re, S::zero()),
            Slot::FirstA => Dual::new(S::zero(), upstream.re),
            _ => Self::zero(),
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.du.is_finite()
    }
}

/// Two-tag truncated Taylor jet: value plus first- and second-order
/// coefficients along two independent directions (tags `a` and `b`), with
/// cross terms quotiented away. Storing Taylor coefficients (`daa` is half the
/// second derivative) keeps multiplication a plain per-tag convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2<S> {
    pub v: S,
    pub da: S,
    pub daa: S,
    pub db: S,
    pub dbb: S,
}

impl<S: Scalar> Jet2<S> {
    #[inline]
    pub fn constant(v: S) -> Self {
        Jet2 {
            v,
            da: S::zero(),
            daa: S::zero(),
            db: S::zero(),
            dbb: S::zero(),
        }
    }
    /// Variable seeded on tag `a`.
    #[inline]
    pub fn variable_a(v: S) -> Self {
        Jet2 {
            da: S::one(),
            ..Jet2::constant(v)
        }
    }
    /// Variable seeded on tag `b`.
    #[inline]
    pub fn variable_b(v: S) -> Self {
        Jet2 {
            db: S::one(),
            ..Jet2::constant(v)
        }
    }
    /// First derivative along tag `a`.
    #[inline]
    pub fn deriv_a(self) -> S {
        self.da
    }
    /// Second derivative along tag `a`.
    #[inline]
    pub fn deriv_aa(self) -> S {
        self.daa + self.daa
    }
    #[inline]
    pub fn deriv_b(self) -> S {
        self.db
    }
    #[inline]
    pub fn deriv_bb(self) -> S {
        self.dbb + self.dbb
    }

    /// Composition `phi(self)` given `phi`, `phi'`, `phi''` at the base point.
    #[inline]
    fn compose(self, f: S, f1: S, f2: S) -> Self {
        let half = S::from_f64(0.5);
        Jet2 {
            v: f,
            da: f1 * self.da,
            daa: f1 * self.daa + half * f2 * self.da * self.da,
            db: f1 * self.db,
            dbb: f1 * self.dbb + half * f2 * self.db * self.db,
        }
    }
}

impl<S: Scalar> Add for Jet2<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Jet2 {
            v: self.v + o.v,
            da: self.da + o.da,
            daa: self.daa + o.daa,
            db: self.db + o.db,
            dbb: self.dbb + o.dbb,
        }
    }
}
impl<S: Scalar> Sub for Jet2<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Jet2 {
            v: self.v - o.v,
            da: self.da - o.da,
            daa: self.daa - o.daa,
            db: self.db - o.db,
            dbb: self.dbb - o.dbb,
        }
    }
}
impl<S: Scalar> Mul for Jet2<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Jet2 {
            v: self.v * o.v,
            da: self.v * o.da + self.da * o.v,
            daa: self.v * o.daa + self.da * o.da + self.daa * o.v,
            db: self.v * o.db + self.db * o.v,
            dbb: self.v * o.dbb + self.db * o.db + self.dbb * o.v,
        }
    }
}
impl<S: Scalar> Div for Jet2<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let v = self.v / o.v;
        let da = (self.da - v * o.da) / o.v;
        let db = (self.db - v * o.db) / o.v;
        Jet2 {
            v,
            da,
            daa: (self.daa - v * o.daa - da * o.da) / o.v,
            db,
            dbb: (self.dbb - v * o.dbb - db * o.db) / o.v,
        }
    }
}
impl<S: Scalar> Neg for Jet2<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Jet2 {
            v: -self.v,
            da: -self.da,
            daa: -self.daa,
            db: -self.db,
            dbb: -self.dbb,
        }
    }
}

impl<S: Scalar> Scalar for Jet2<S> {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Jet2::constant(S::from_f64(x))
    }
    #[inline]
    fn primal(self) -> f64 {
        self.v.primal()
    }
    #[inline]
    fn zero() -> Self {
        Jet2::constant(S::zero())
    }
    #[inline]
    fn one() -> Self {
        Jet2::constant(S::one())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.compose(e, e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        let inv = S::one() / self.v;
        self.compose(self.v.ln(), inv, -inv * inv)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let sech2 = S::one() - t * t;
        let two = S::from_f64(2.0);
        self.compose(t, sech2, -two * t * sech2)
    }
    #[inline]
    fn sin(self) -> Self {
        let s = self.v.sin();
        self.compose(s, self.v.cos(), -s)
    }
    #[inline]
    fn cos(self) -> Self {
        let c = self.v.cos();
        self.compose(c, -self.v.sin(), -c)
    }
    #[inline]
    fn powf_const(self, e: f64) -> Self {
        let f = self.v.powf_const(e);
        let f1 = S::from_f64(e) * self.v.powf_const(e - 1.0);
        let f2 = S::from_f64(e * (e - 1.0)) * self.v.powf_const(e - 2.0);
        self.compose(f, f1, f2)
    }
    #[inline]
    fn part(self, slot: Slot) -> Self {
        let v = match slot {
            Slot::Value => self.v,
            Slot::FirstA => self.da,
            Slot::SecondA => self.daa + self.daa,
            Slot::FirstB => self.db,
            Slot::SecondB => self.dbb + self.dbb,
        };
        Jet2::constant(v)
    }
    #[inline]
    fn seed(slot: Slot) -> Self {
        let mut s = Self::zero();
        match slot {
            Slot::Value => s.v = S::one(),
            Slot::FirstA => s.da = S::one(),
            Slot::SecondA => s.daa = S::one(),
            Slot::FirstB => s.db = S::one(),
            Slot::SecondB => s.dbb = S::one(),
        }
        s
    }
    #[inline]
    fn adjoint_mul(p: Self, u: Self) -> Self {
        // Transpose of the per-tag convolution in `Mul`.
        Jet2 {
            v: p.v * u.v + p.da * u.da + p.daa * u.daa + p.db * u.db + p.dbb * u.dbb,
            da: p.v * u.da + p.da * u.daa,
            daa: p.v * u.daa,
            db: p.v * u.db + p.db * u.dbb,
            dbb: p.v * u.dbb,
        }
    }
    #[inline]
    fn adjoint_part(slot: Slot, u: Self) -> Self {
        let mut out = Self::zero();
        match slot {
            Slot::Value => out.v = u.v,
            Slot::FirstA => out.da = u.v,
            Slot::SecondA => out.daa = u.v + u.v,
            Slot::FirstB => out.db = u.v,
            Slot::SecondB => out.dbb = u.v + u.v,
        }
        out
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.v.is_finite()
            && self.da.is_finite()
            && self.daa.is_finite()
            && self.db.is_finite()
            && self.dbb.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn dual_tracks_first_derivative() {
        let x = Dual::variable(0.7_f64);
        let y = x.tanh();
        close(y.re, 0.7f64.tanh(), 1e-15);
        close(y.du, 1.0 - 0.7f64.tanh().powi(2), 1e-15);
    }

    #[test]
    fn nested_duals_give_second_derivative() {
        // f(x) = exp(2x), f''(0) = 4
        let x = Dual::new(Dual::variable(0.0_f64), Dual::constant(1.0));
        let y = (x + x).exp();
        close(y.du.du, 4.0, 1e-14);
    }

    #[test]
    fn jet_second_derivatives_match_closed_forms() {
        // f(x, t) = exp(t - x/2): f_xx = f/4, f_t = f
        let x = Jet2::variable_a(0.3_f64);
        let t = Jet2::variable_b(0.8_f64);
        let f = (t - x * Jet2::from_f64(0.5)).exp();
        let v = (0.8f64 - 0.15).exp();
        close(f.v, v, 1e-15);
        close(f.deriv_a(), -v / 2.0, 1e-15);
        close(f.deriv_aa(), v / 4.0, 1e-14);
        close(f.deriv_b(), v, 1e-15);
    }

    #[test]
    fn jet_division_is_mul_inverse() {
        let a = Jet2 {
            v: 1.3_f64,
            da: 0.2,
            daa: -0.4,
            db: 0.9,
            dbb: 0.05,
        };
        let b = Jet2 {
            v: -0.7_f64,
            da: 1.1,
            daa: 0.3,
            db: -0.2,
            dbb: 0.6,
        };
        let q = (a * b) / b;
        close(q.v, a.v, 1e-14);
        close(q.da, a.da, 1e-14);
        close(q.daa, a.daa, 1e-14);
        close(q.db, a.db, 1e-14);
        close(q.dbb, a.dbb, 1e-14);
    }

    #[test]
    fn adjoint_mul_is_transpose_of_mul() {
        // <M(p) x, y> == <x, adjoint_mul(p, y)> for the induced inner product.
        let p = Jet2 {
            v: 0.4_f64,
            da: -1.2,
            daa: 0.7,
            db: 2.0,
            dbb: -0.3,
        };
        let x = Jet2 {
            v: 1.0_f64,
            da: 0.5,
            daa: -0.25,
            db: 0.125,
            dbb: 2.5,
        };
        let y = Jet2 {
            v: -0.6_f64,
            da: 0.9,
            daa: 1.4,
            db: -0.8,
            dbb: 0.2,
        };
        let dot = |a: Jet2<f64>, b: Jet2<f64>| {
            a.v * b.v + a.da * b.da + a.daa * b.daa + a.db * b.db + a.dbb * b.dbb
        };
        let lhs = dot(p * x, y);
        let rhs = dot(x, Jet2::adjoint_mul(p, y));
        close(lhs, rhs, 1e-14);
    }
}
