//! Scalar abstraction shared by the exact oracles and the closed-form helpers.
//!
//! Anything that only needs ring operations (enumeration weights, binomial
//! sums, Bernoulli splitting) is written against [`Weight`], so the same code
//! runs on `f64`, `f32` or arbitrary-precision rationals. Code that needs
//! square roots or exponentials is written against [`num_traits::Float`].

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, One};
use std::fmt::Debug;

/// A commutative ring element usable as a probability weight.
pub trait Weight: Num + Clone + Debug + PartialOrd {}

impl<T: Num + Clone + Debug + PartialOrd> Weight for T {}

/// `x^k` by repeated squaring.
pub fn powi<T: Weight>(x: &T, k: usize) -> T {
    num_traits::pow(x.clone(), k)
}

/// Bernoulli weight `p^k (1-p)^(n-k)`.
pub fn bernoulli_weight<T: Weight>(p: &T, k: usize, n: usize) -> T {
    let q = T::one() - p.clone();
    powi(p, k) * powi(&q, n - k)
}

/// Exact rational `num / den`.
pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// `2^k` for possibly negative `k`, as an exact rational.
pub fn pow2(k: i64) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    if k >= 0 {
        num_traits::pow(two, k as usize)
    } else {
        BigRational::one() / num_traits::pow(two, (-k) as usize)
    }
}

/// Lossy conversion used when exact values are compared with Monte Carlo output.
pub fn to_f64(x: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or(f64::NAN)
}

/// Sum of a slice of weights.
pub fn sum<T: Weight>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, x| acc + x.clone())
}

/// Integer `n` as a ring element, built from its binary expansion.
pub fn from_u64<T: Weight>(n: u64) -> T {
    let two = T::one() + T::one();
    let mut acc = T::zero();
    for bit in (0..64).rev() {
        acc = acc * two.clone();
        if n >> bit & 1 == 1 {
            acc = acc + T::one();
        }
    }
    acc
}

/// Binomial coefficient `C(n, k)`.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}
