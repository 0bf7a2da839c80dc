//! Scalar field abstraction: plain `f64` or forward-mode dual numbers.
//!
//! Every numeric routine in this crate is generic over [`Scalar`], so the same
//! code path produces plain values when instantiated with `f64` and carries
//! derivatives when instantiated with [`Dual`]. Comparisons and branches always
//! resolve on the primal value, which keeps control flow identical in both
//! modes: a dual run with zero tangent seeds reproduces the `f64` run bit for
//! bit.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of terms in the polynomial kernel of [`exp_approx`].
const EXP_POLY: [f64; 13] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
    1.0 / 479001600.0,
];

/// Polynomial exponential with relative error below `2e-14`.
///
/// Unlike the libm call this compiles to straight-line arithmetic (saturation
/// and NaN handling are conditional moves, not branches), so the soft-max and
/// log-sum-exp hot loops stay vectorisable. Out-of-range inputs saturate to
/// `0` / `+inf` like `f64::exp`.
#[inline(always)]
pub fn exp_approx(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Work on a clamped copy; the original decides saturation at the end.
    // (`max`/`min` turn a NaN input into the bound, which is fine: the last
    // select below restores it.)
    let xc = x.max(-745.2).min(709.7);
    // Round-to-nearest-integer via the 1.5 * 2^52 trick: adding the constant
    // pushes the value into a binade whose spacing is exactly 1, so the FP
    // add rounds to integer (ties to even) and the low mantissa bits of the
    // sum hold the integer directly. Avoids a float-to-int cast, which does
    // not vectorise well.
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    let kb = xc * std::f64::consts::LOG2_E + MAGIC;
    let k = kb - MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Horner evaluation, unrolled so surrounding loops can vectorise.
    let mut p = EXP_POLY[12];
    p = p.mul_add(r, EXP_POLY[11]);
    p = p.mul_add(r, EXP_POLY[10]);
    p = p.mul_add(r, EXP_POLY[9]);
    p = p.mul_add(r, EXP_POLY[8]);
    p = p.mul_add(r, EXP_POLY[7]);
    p = p.mul_add(r, EXP_POLY[6]);
    p = p.mul_add(r, EXP_POLY[5]);
    p = p.mul_add(r, EXP_POLY[4]);
    p = p.mul_add(r, EXP_POLY[3]);
    p = p.mul_add(r, EXP_POLY[2]);
    p = p.mul_add(r, EXP_POLY[1]);
    p = p.mul_add(r, EXP_POLY[0]);
    // Assemble 2^k in two factors so subnormal results stay representable.
    let k = (kb.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    let hi = k.max(-1021);
    let lo = k - hi;
    let scale_hi = f64::from_bits(((hi + 1023) as u64) << 52);
    let scale_lo = f64::from_bits(((lo + 1023) as u64) << 52);
    let y = p * scale_hi * scale_lo;
    let y = if x < -745.2 { 0.0 } else { y };
    let y = if x > 709.7 { f64::INFINITY } else { y };
    if x.is_nan() {
        f64::NAN
    } else {
        y
    }
}

/// A field of numbers supporting the primitives the numeric kernels need.
///
/// Implemented by `f64` and by [`Dual`]. Branch decisions (`PartialOrd`,
/// [`Scalar::max_val`], …) always compare primal values.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    /// Embed a constant; in dual mode the tangent is zero.
    fn lift(x: f64) -> Self;
    /// The primal value.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    /// Same contract as [`Scalar::exp`] but via [`exp_approx`]; used in the
    /// soft-max / log-sum-exp hot loops.
    fn exp_fast(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    /// Fused multiply-add `self * a + b` (single rounding on the value).
    fn mul_add(self, a: Self, b: Self) -> Self;
    /// The operand with the larger value; ties keep `self`.
    fn max_val(self, other: Self) -> Self;
    /// The operand with the smaller value; ties keep `self`.
    fn min_val(self, other: Self) -> Self;
    fn is_finite_value(self) -> bool {
        self.value().is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn lift(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn exp_fast(self) -> Self {
        exp_approx(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    #[inline(always)]
    fn max_val(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
    #[inline(always)]
    fn min_val(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

/// Forward-mode dual number with a fixed-width tangent of `P` directions.
///
/// `P` is the number of parameters differentiated against in one pass; each
/// arithmetic primitive applies the chain rule to all `P` tangent slots.
/// Random draws and other constants enter with zero tangent, so derivatives
/// flow only through the reparameterised transforms applied to them.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const P: usize> {
    pub value: f64,
    pub tangent: [f64; P],
}

impl<const P: usize> Dual<P> {
    /// Constant with zero tangent.
    #[inline(always)]
    pub const fn constant(value: f64) -> Self {
        Dual {
            value,
            tangent: [0.0; P],
        }
    }

    /// Variable seeded with a unit tangent along `axis`.
    #[inline(always)]
    pub fn seed(value: f64, axis: usize) -> Self {
        assert!(axis < P, "tangent axis {axis} out of range for width {P}");
        let mut tangent = [0.0; P];
        tangent[axis] = 1.0;
        Dual { value, tangent }
    }

    #[inline(always)]
    fn map_tangent(self, value: f64, factor: f64) -> Self {
        let mut tangent = [0.0; P];
        for (t, s) in tangent.iter_mut().zip(self.tangent.iter()) {
            *t = factor * s;
        }
        Dual { value, tangent }
    }
}

impl<const P: usize> PartialEq for Dual<P> {
    /// Value-only equality: branch decisions ignore tangents.
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl<const P: usize> PartialOrd for Dual<P> {
    /// Value-only ordering: branch decisions ignore tangents.
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.value.partial_cmp(&other.value)
    }
}

impl<const P: usize> Add for Dual<P> {
    type Output = Self;
    #[inline(always)]
    fn add(self, rhs: Self) -> Self {
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = self.tangent[i] + rhs.tangent[i];
        }
        Dual {
            value: self.value + rhs.value,
            tangent,
        }
    }
}

impl<const P: usize> Sub for Dual<P> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, rhs: Self) -> Self {
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = self.tangent[i] - rhs.tangent[i];
        }
        Dual {
            value: self.value - rhs.value,
            tangent,
        }
    }
}

impl<const P: usize> Mul for Dual<P> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, rhs: Self) -> Self {
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = self.tangent[i] * rhs.value + self.value * rhs.tangent[i];
        }
        Dual {
            value: self.value * rhs.value,
            tangent,
        }
    }
}

impl<const P: usize> Div for Dual<P> {
    type Output = Self;
    #[inline(always)]
    fn div(self, rhs: Self) -> Self {
        let value = self.value / rhs.value;
        let inv = 1.0 / rhs.value;
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = (self.tangent[i] - value * rhs.tangent[i]) * inv;
        }
        Dual { value, tangent }
    }
}

impl<const P: usize> Neg for Dual<P> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = -self.tangent[i];
        }
        Dual {
            value: -self.value,
            tangent,
        }
    }
}

impl<const P: usize> AddAssign for Dual<P> {
    #[inline(always)]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<const P: usize> SubAssign for Dual<P> {
    #[inline(always)]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<const P: usize> MulAssign for Dual<P> {
    #[inline(always)]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}
impl<const P: usize> DivAssign for Dual<P> {
    #[inline(always)]
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl<const P: usize> Scalar for Dual<P> {
    const ZERO: Self = Dual::constant(0.0);
    const ONE: Self = Dual::constant(1.0);

    #[inline(always)]
    fn lift(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self.value
    }
    #[inline(always)]
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.map_tangent(e, e)
    }
    #[inline(always)]
    fn exp_fast(self) -> Self {
        let e = exp_approx(self.value);
        self.map_tangent(e, e)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        self.map_tangent(self.value.ln(), 1.0 / self.value)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.map_tangent(s, 0.5 / s)
    }
    #[inline(always)]
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.map_tangent(t, 1.0 - t * t)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        // Subgradient at zero resolves to +1, matching the value-branch rule.
        if self.value < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline(always)]
    fn powi(self, n: i32) -> Self {
        let value = self.value.powi(n);
        self.map_tangent(value, f64::from(n) * self.value.powi(n - 1))
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        let mut tangent = [0.0; P];
        for i in 0..P {
            tangent[i] = self.tangent[i].mul_add(a.value, self.value.mul_add(a.tangent[i], b.tangent[i]));
        }
        Dual {
            value: self.value.mul_add(a.value, b.value),
            tangent,
        }
    }
    #[inline(always)]
    fn max_val(self, other: Self) -> Self {
        if other.value > self.value {
            other
        } else {
            self
        }
    }
    #[inline(always)]
    fn min_val(self, other: Self) -> Self {
        if other.value < self.value {
            other
        } else {
            self
        }
    }
}

/// Log-sum-exp over a slice, stabilised by the maximum value.
///
/// Returns negative infinity for an empty slice or when every entry is
/// negative infinity.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let mut m = S::lift(f64::NEG_INFINITY);
    for &x in xs {
        m = m.max_val(x);
    }
    if !m.value().is_finite() {
        // All -inf (or empty): the sum is zero.
        return S::lift(f64::NEG_INFINITY);
    }
    let mut acc = S::ZERO;
    for &x in xs {
        acc += (x - m).exp_fast();
    }
    m + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type D1 = Dual<1>;
    type D2 = Dual<2>;

    #[test]
    fn exp_approx_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..200_001 {
            let x = -50.0 + i as f64 * (60.0 / 200_000.0);
            let got = exp_approx(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 2e-14, "worst relative error {worst}");
        // Extremes and edge cases.
        assert_eq!(exp_approx(-1000.0), 0.0);
        assert_eq!(exp_approx(800.0), f64::INFINITY);
        assert!((exp_approx(0.0) - 1.0).abs() < 1e-15);
        assert!((exp_approx(700.0) / 700f64.exp() - 1.0).abs() < 1e-13);
        assert!((exp_approx(-730.0) / (-730f64).exp() - 1.0).abs() < 1e-12);
        assert!(exp_approx(f64::NAN).is_nan());
    }

    #[test]
    fn squared_seed_carries_derivative() {
        let x = D2::seed(3.0, 0);
        let y = x * x;
        assert_eq!(y.value, 9.0);
        assert_eq!(y.tangent, [6.0, 0.0]);
    }

    #[test]
    fn lifted_constant_has_zero_tangent() {
        let y = D1::constant(0.0).exp();
        assert_eq!(y.value, 1.0);
        assert_eq!(y.tangent, [0.0]);
    }

    #[test]
    fn log_of_quadratic_matches_closed_form() {
        let theta = D1::seed(1.5, 0);
        let y = (theta * theta + D1::constant(1.0)).ln();
        assert!((y.value - 3.25f64.ln()).abs() < 1e-15);
        let expect = 2.0 * 1.5 / 3.25;
        assert!((y.tangent[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn value_of_lift_is_identity() {
        for &c in &[0.0, -3.5, 1e-12, 7.25e9] {
            assert_eq!(<f64 as Scalar>::lift(c).value(), c);
            assert_eq!(D2::lift(c).value(), c);
        }
    }

    #[test]
    fn max_ties_keep_first_operand() {
        let a = D1 {
            value: 2.0,
            tangent: [1.0],
        };
        let b = D1 {
            value: 2.0,
            tangent: [5.0],
        };
        assert_eq!(a.max_val(b).tangent, [1.0]);
        assert_eq!(b.max_val(a).tangent, [5.0]);
        assert_eq!(a.min_val(b).tangent, [1.0]);
    }

    #[test]
    fn division_chain_rule() {
        let x = D1::seed(2.0, 0);
        let y = D1::constant(4.0);
        let z = x / (y + x);
        // z = x/(x+4): dz = 4/(x+4)^2 = 4/36.
        assert!((z.value - 2.0 / 6.0).abs() < 1e-15);
        assert!((z.tangent[0] - 4.0 / 36.0).abs() < 1e-15);
    }

    /// A fixed composite exercising every primitive once.
    fn composite<S: Scalar>(x: S) -> S {
        let a = (x * x + S::ONE).sqrt();
        let b = (a + S::lift(0.5)).ln();
        let c = (b * S::lift(0.3)).exp();
        let d = c.tanh() + (x - S::lift(0.2)).abs();
        let e = d.powi(2) / (S::ONE + d * d).sqrt();
        e.max_val(x * S::lift(0.1)) + x.mul_add(S::lift(0.25), S::ONE)
    }

    #[test]
    fn composite_matches_central_differences() {
        for &x0 in &[-1.7, -0.3, 0.9, 2.4] {
            let h = 1e-6;
            let fd = (composite(x0 + h) - composite(x0 - h)) / (2.0 * h);
            let t = composite(D1::seed(x0, 0)).tangent[0];
            assert!(
                (fd - t).abs() <= 1e-6 * t.abs().max(1.0),
                "x0={x0}: fd={fd} tangent={t}"
            );
        }
    }

    proptest! {
        #[test]
        fn random_compositions_match_central_differences(x0 in -2.0f64..2.0, shift in -0.5f64..0.5) {
            // Keep the effective input away from the |.| kink and the max tie
            // so the difference quotient is smooth at scale h.
            prop_assume!((x0 + shift - 0.2f64).abs() > 1e-3);
            prop_assume!(((x0 + shift) * 0.1 - composite_gap(x0, shift)).abs() > 1e-3);
            let f = |x: f64| composite(x + shift);
            let h = 1e-6;
            let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
            let t = composite(D1::seed(x0, 0) + D1::constant(shift)).tangent[0];
            prop_assert!((fd - t).abs() <= 1e-5 * t.abs().max(1.0), "fd={} tangent={}", fd, t);
        }
    }

    /// Value of the non-max branch in `composite`, used to keep property
    /// inputs away from the max tie.
    fn composite_gap(x0: f64, shift: f64) -> f64 {
        let x = x0 + shift;
        let a = (x * x + 1.0).sqrt();
        let b = (a + 0.5).ln();
        let c = (b * 0.3).exp();
        let d = c.tanh() + (x - 0.2).abs();
        d.powi(2) / (1.0 + d * d).sqrt()
    }

    #[test]
    fn dual_with_zero_tangent_reproduces_f64_bits() {
        for &x in &[0.3, -1.7, 42.0, 1e-8] {
            let real = composite(x);
            let dual = composite(D1::constant(x));
            assert_eq!(real.to_bits(), dual.value.to_bits());
            assert_eq!(dual.tangent, [0.0]);
        }
    }
}
