//! Exact arithmetic over finite doubles. Every finite `f64` is a dyadic
//! rational, so sums are exact in big integers and a single correctly
//! rounded conversion produces the result.

use std::cmp::Ordering;

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

/// `mant * 2^exp`.
#[derive(Clone, Debug)]
pub(crate) struct Dyadic {
    mant: BigInt,
    exp: i64,
}

impl Dyadic {
    pub(crate) fn from_f64(x: f64) -> Self {
        debug_assert!(x.is_finite());
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, exp) = if biased == 0 { (frac, -1074) } else { (frac | (1u64 << 52), biased - 1075) };
        let mant = BigInt::from(m);
        Dyadic { mant: if negative { -mant } else { mant }, exp }
    }

    pub(crate) fn from_i64(i: i64) -> Self {
        Dyadic { mant: BigInt::from(i), exp: 0 }
    }

    fn align(&self, exp: i64) -> BigInt {
        debug_assert!(self.exp >= exp);
        &self.mant << ((self.exp - exp) as usize)
    }

    pub(crate) fn sum(items: &[Dyadic]) -> Dyadic {
        let Some(min) = items.iter().map(|d| d.exp).min() else {
            return Dyadic { mant: BigInt::zero(), exp: 0 };
        };
        let mant = items.iter().map(|d| d.align(min)).sum();
        Dyadic { mant, exp: min }
    }

    /// Numerator and (positive) denominator of `self / divisor`.
    fn ratio(&self, divisor: u64) -> (BigInt, BigUint) {
        let mut num = self.mant.clone();
        let mut den = BigUint::from(divisor);
        if self.exp >= 0 {
            num <<= self.exp as usize;
        } else {
            den <<= (-self.exp) as usize;
        }
        (num, den)
    }

    #[cfg(test)]
    fn to_f64(&self) -> f64 {
        self.div_to_f64(1)
    }

    pub(crate) fn div_to_f64(&self, divisor: u64) -> f64 {
        let (n, d) = self.ratio(divisor);
        ratio_to_f64(&n, &d)
    }

    pub(crate) fn div_to_i64(&self, divisor: u64) -> Option<i64> {
        let (n, d) = self.ratio(divisor);
        round_half_even(&n, &d).try_into().ok()
    }
}

impl PartialEq for Dyadic {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Dyadic {}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Self) -> Ordering {
        let e = self.exp.min(other.exp);
        self.align(e).cmp(&other.align(e))
    }
}

/// Nearest integer to `n / d`, ties to even.
pub(crate) fn round_half_even(n: &BigInt, d: &BigUint) -> BigInt {
    let d = BigInt::from_biguint(Sign::Plus, d.clone());
    let (q, r) = n.div_mod_floor(&d);
    let twice: BigInt = r << 1usize;
    match twice.cmp(&d) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        Ordering::Equal => {
            if q.is_odd() {
                q + 1
            } else {
                q
            }
        }
    }
}

/// Correctly rounded (ties-to-even) conversion of `n / d` to `f64`.
pub(crate) fn ratio_to_f64(n: &BigInt, d: &BigUint) -> f64 {
    assert!(!d.is_zero(), "zero denominator");
    if n.is_zero() {
        return 0.0;
    }
    let negative = n.is_negative();
    let n = n.magnitude();

    // Pick k so that n * 2^k / d lands in [2^52, 2^53).
    let mut k: i64 = 52 - (n.bits() as i64 - d.bits() as i64);
    let quotient_bits = |k: i64| -> u64 {
        let (num, den) = scaled(n, d, k);
        (num / den).bits()
    };
    if quotient_bits(k) < 53 {
        k += 1;
    }
    // Below the normal range the spacing is fixed at 2^-1074.
    if k > 1074 {
        k = 1074;
    }
    let (num, den) = scaled(n, d, k);
    let (mut q, r) = num.div_rem(&den);
    let twice = r << 1usize;
    let two52 = BigUint::one() << 52usize;
    let two53 = BigUint::one() << 53usize;
    match twice.cmp(&den) {
        Ordering::Greater => q += 1u32,
        Ordering::Equal if q.is_odd() => q += 1u32,
        _ => {}
    }
    if q == two53 {
        q = two52.clone();
        k -= 1;
    }
    let q: u64 = q.try_into().expect("53-bit mantissa");
    let exponent = 52 - k;
    let bits = if q >= 1u64 << 52 {
        if exponent > 1023 {
            return if negative { f64::NEG_INFINITY } else { f64::INFINITY };
        }
        (((exponent + 1023) as u64) << 52) | (q - (1u64 << 52))
    } else {
        q
    };
    let x = f64::from_bits(bits);
    if negative {
        -x
    } else {
        x
    }
}

fn scaled(n: &BigUint, d: &BigUint, k: i64) -> (BigUint, BigUint) {
    if k >= 0 {
        (n << (k as usize), d.clone())
    } else {
        (n.clone(), d << ((-k) as usize))
    }
}
