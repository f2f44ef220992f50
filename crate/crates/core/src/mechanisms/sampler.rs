//! Exact discrete Gaussian sampling on a power-of-two grid.
//!
//! Floating-point Gaussian samplers leak information through the low-order
//! bits of their output. Here noise is an integer `Z` drawn from the discrete
//! Gaussian with variance `(σ/g)²` using only integer arithmetic and exact
//! rational Bernoulli trials, and the released value is `Z·g`.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MechanismError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    /// Output grid spacing; a power of two.
    pub granularity: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, granularity: f64) -> Result<Self, MechanismError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(MechanismError::InvalidArgument(format!("sigma must be positive (got {sigma})")));
        }
        if !(granularity > 0.0 && granularity.is_finite()) {
            return Err(MechanismError::InvalidArgument(format!(
                "granularity must be positive (got {granularity})"
            )));
        }
        Ok(NoiseSpec {
            sigma,
            granularity: pow2_floor(granularity),
        })
    }

    /// Draws `x + noise`, where `x` is first rounded to the grid.
    pub fn privatize<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let g = self.granularity;
        let base = (x / g).round();
        let z = DiscreteGaussian::new(self.sigma / g).sample_i128(rng);
        if base.abs() < 1e38 {
            ((base as i128).saturating_add(z)) as f64 * g
        } else {
            base * g + z as f64 * g
        }
    }

    /// One noise draw, an exact multiple of the granularity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.privatize(0.0, rng)
    }
}

/// Largest power of two not exceeding `x` (`x > 0`).
pub fn pow2_floor(x: f64) -> f64 {
    let e = x.log2().floor() as i32;
    let mut p = 2f64.powi(e);
    if p > x {
        p /= 2.0;
    } else if p * 2.0 <= x {
        p *= 2.0;
    }
    p
}

/// Grid spacing for a quantity with per-partition sensitivity
/// `per_partition`: `2^-exponent · Δ`, rounded down to a power of two.
pub fn granularity_for(per_partition: f64, exponent: i32) -> f64 {
    pow2_floor(per_partition.max(f64::MIN_POSITIVE) * 2f64.powi(-exponent))
}

/// Discrete Gaussian over the integers with variance parameter `σ²`, where
/// `σ` is represented exactly as a dyadic rational.
#[derive(Debug, Clone)]
pub struct DiscreteGaussian {
    sigma2_num: BigUint,
    sigma2_den: BigUint,
    /// Scale of the discrete Laplace proposal, `⌊σ⌋ + 1`.
    t: u64,
}

impl DiscreteGaussian {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive");
        let (mantissa, exp) = decompose(sigma);
        let m2 = BigUint::from(mantissa) * BigUint::from(mantissa);
        let (sigma2_num, sigma2_den) = if exp >= 0 {
            (m2 << (2 * exp as usize), BigUint::one())
        } else {
            (m2, BigUint::one() << (2 * (-exp) as usize))
        };
        let t = sigma.floor().min(u64::MAX as f64 / 4.0) as u64 + 1;
        DiscreteGaussian {
            sigma2_num,
            sigma2_den,
            t,
        }
    }

    pub fn sample_i128<R: Rng + ?Sized>(&self, rng: &mut R) -> i128 {
        let t = BigUint::from(self.t);
        loop {
            let y = discrete_laplace(self.t, rng);
            // γ = (|y| − σ²/t)² / (2σ²)
            //   = (|y|·t·den − num)² / (2·t²·den·num)
            let y_abs = BigUint::from(y.unsigned_abs());
            let diff = BigInt::from_biguint(Sign::Plus, &y_abs * &t * &self.sigma2_den)
                - BigInt::from_biguint(Sign::Plus, self.sigma2_num.clone());
            let num = diff.magnitude() * diff.magnitude();
            let den = BigUint::from(2u32) * &t * &t * &self.sigma2_den * &self.sigma2_num;
            if bernoulli_exp_neg(&num, &den, rng) {
                return y;
            }
        }
    }
}

/// `sigma = mantissa · 2^exp` exactly.
fn decompose(x: f64) -> (u64, i64) {
    let bits = x.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut m, mut e) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    while m != 0 && m & 1 == 0 {
        m >>= 1;
        e += 1;
    }
    (m, e)
}

/// Uniform integer in `[0, bound)`.
fn uniform_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    if let Some(b) = bound.to_u128() {
        return BigUint::from(rng.random_range(0..b));
    }
    let bits = bound.bits();
    let words = bits.div_ceil(32) as usize;
    let top_mask = if bits % 32 == 0 { u32::MAX } else { (1u32 << (bits % 32)) - 1 };
    loop {
        let mut digits: Vec<u32> = (0..words).map(|_| rng.random()).collect();
        if let Some(last) = digits.last_mut() {
            *last &= top_mask;
        }
        let candidate = BigUint::new(digits);
        if &candidate < bound {
            return candidate;
        }
    }
}

fn bernoulli<R: Rng + ?Sized>(num: &BigUint, den: &BigUint, rng: &mut R) -> bool {
    &uniform_below(den, rng) < num
}

fn bernoulli_small<R: Rng + ?Sized>(num: u128, den: u128, rng: &mut R) -> bool {
    rng.random_range(0..den) < num
}

/// Bernoulli with success probability `exp(−num/den)`.
fn bernoulli_exp_neg<R: Rng + ?Sized>(num: &BigUint, den: &BigUint, rng: &mut R) -> bool {
    if let (Some(n), Some(d)) = (num.to_u64(), den.to_u64()) {
        return bernoulli_exp_neg_small(u128::from(n), u128::from(d), rng);
    }
    let whole = num / den;
    let mut k = BigUint::zero();
    while k < whole {
        if !bernoulli_exp_neg_unit(1, 1, rng) {
            return false;
        }
        k += 1u32;
    }
    let rem = num - &whole * den;
    let mut k = BigUint::one();
    loop {
        if !bernoulli(&rem, &(den * &k), rng) {
            break;
        }
        k += 1u32;
    }
    k.bit(0)
}

fn bernoulli_exp_neg_small<R: Rng + ?Sized>(num: u128, den: u128, rng: &mut R) -> bool {
    let whole = num / den;
    for _ in 0..whole {
        if !bernoulli_exp_neg_unit(1, 1, rng) {
            return false;
        }
    }
    bernoulli_exp_neg_unit(num - whole * den, den, rng)
}

/// `exp(−γ)` for `γ = num/den ∈ [0, 1]`: run Bernoulli(γ/k) trials for
/// k = 1, 2, … until one fails; succeed iff the failing k is odd.
fn bernoulli_exp_neg_unit<R: Rng + ?Sized>(num: u128, den: u128, rng: &mut R) -> bool {
    let mut k: u128 = 1;
    while bernoulli_small(num, den * k, rng) {
        k += 1;
    }
    k % 2 == 1
}

/// Discrete Laplace with scale `t`: `P(y) ∝ exp(−|y|/t)`.
fn discrete_laplace<R: Rng + ?Sized>(t: u64, rng: &mut R) -> i128 {
    let t = u128::from(t);
    loop {
        let u = rng.random_range(0..t);
        if !bernoulli_exp_neg_small(u, t, rng) {
            continue;
        }
        let mut v: u128 = 0;
        while bernoulli_exp_neg_unit(1, 1, rng) {
            v += 1;
        }
        let negative = rng.random::<bool>();
        if negative && u == 0 && v == 0 {
            continue;
        }
        let mag = (u + t * v) as i128;
        return if negative { -mag } else { mag };
    }
}
