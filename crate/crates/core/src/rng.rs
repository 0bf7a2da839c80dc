//! Counter-based splittable random number stream.
//!
//! A stream is a 256-bit key plus a draw counter; each draw encrypts the
//! counter with a 20-round Threefry-4x64 block and advances the counter.
//! Child streams are derived by encrypting a label under the parent key, so
//! splitting is pure: the same `(seed, split path, draw order)` always yields
//! bit-identical outputs, and sibling streams never share blocks. This is what
//! lets per-particle work run in parallel while matching the sequential run
//! exactly — give particle `i` the child stream `split(i)` and the schedule of
//! draws no longer depends on execution order.
//!
//! Continuous draws are deterministic transforms of `u64` blocks. When the
//! surrounding arithmetic runs in dual mode they enter as constants with zero
//! tangent, so derivatives flow only through the transforms applied to them
//! downstream (the reparameterisation route), never through the generator.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RandError {
    #[error("rate must be finite and non-negative, got {0}")]
    InvalidRate(f64),
    #[error("weights sum to zero or contain NaN")]
    DegenerateWeights,
}

const C240: u64 = 0x1BD1_1BDA_A9FC_1A22;
/// Rotation schedule for the 4x64 block (indexed by round mod 8).
const ROTATIONS: [[u32; 2]; 8] = [
    [14, 16],
    [52, 57],
    [23, 40],
    [5, 37],
    [25, 33],
    [46, 12],
    [58, 22],
    [32, 32],
];

/// Domain-separation tags for the counter word so draw blocks, split blocks
/// and seed expansion can never collide.
const TAG_DRAW: u64 = 0x6472_6177; // "draw"
const TAG_SPLIT: u64 = 0x7370_6c69; // "spli"
const TAG_SEED: u64 = 0x7365_6564; // "seed"

#[inline]
fn threefry4x64(key: [u64; 4], counter: [u64; 4]) -> [u64; 4] {
    let ks = [
        key[0],
        key[1],
        key[2],
        key[3],
        C240 ^ key[0] ^ key[1] ^ key[2] ^ key[3],
    ];
    let mut x = [
        counter[0].wrapping_add(ks[0]),
        counter[1].wrapping_add(ks[1]),
        counter[2].wrapping_add(ks[2]),
        counter[3].wrapping_add(ks[3]),
    ];
    for round in 0..20 {
        let r = ROTATIONS[round % 8];
        x[0] = x[0].wrapping_add(x[1]);
        x[1] = x[1].rotate_left(r[0]) ^ x[0];
        x[2] = x[2].wrapping_add(x[3]);
        x[3] = x[3].rotate_left(r[1]) ^ x[2];
        x.swap(1, 3);
        if round % 4 == 3 {
            let s = round / 4 + 1;
            for i in 0..4 {
                x[i] = x[i].wrapping_add(ks[(s + i) % 5]);
            }
            x[3] = x[3].wrapping_add(s as u64);
        }
    }
    x
}

/// Splittable counter-based random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: [u64; 4],
    counter: u64,
}

impl RngStream {
    /// Expand a 64-bit seed into a full 256-bit key.
    pub fn from_seed(seed: u64) -> Self {
        let key = threefry4x64([C240, C240.rotate_left(17), !C240, C240 ^ 0xA5A5], [seed, TAG_SEED, 0, 0]);
        RngStream { key, counter: 0 }
    }

    /// Derive an independent child stream; the parent remains usable.
    ///
    /// Splitting is pure: the same `(parent, label)` always produces the same
    /// child, which is how per-particle substreams are indexed by particle id.
    pub fn split(&self, label: u64) -> Self {
        let key = threefry4x64(self.key, [label, TAG_SPLIT, self.counter, 0]);
        RngStream { key, counter: 0 }
    }

    /// Next raw 64-bit block word.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let block = threefry4x64(self.key, [self.counter, TAG_DRAW, 0, 0]);
        self.counter = self.counter.wrapping_add(1);
        block[0]
    }

    /// Uniform draw strictly inside (0, 1), with 53-bit resolution.
    #[inline]
    pub fn draw_unit_uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw on (lo, hi).
    #[inline]
    pub fn draw_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.draw_unit_uniform()
    }

    /// Standard normal draw (Box-Muller; consumes exactly two blocks).
    #[inline]
    pub fn draw_normal(&mut self) -> f64 {
        let u1 = self.draw_unit_uniform();
        let u2 = self.draw_unit_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel draw `-ln(-ln U)`.
    #[inline]
    pub fn draw_gumbel(&mut self) -> f64 {
        -(-self.draw_unit_uniform().ln()).ln()
    }

    /// Poisson draw: sequential inversion below rate 10, transformed
    /// rejection (PTRS) above. Rate zero always yields zero.
    pub fn draw_poisson(&mut self, rate: f64) -> Result<u64, RandError> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(RandError::InvalidRate(rate));
        }
        if rate == 0.0 {
            return Ok(0);
        }
        if rate < 10.0 {
            let u = self.draw_unit_uniform();
            let mut p = (-rate).exp();
            let mut cum = p;
            let mut k = 0u64;
            while u > cum {
                k += 1;
                p *= rate / k as f64;
                cum += p;
                if k > 10_000 {
                    break; // unreachable for rate < 10; guards fp pathologies
                }
            }
            Ok(k)
        } else {
            self.poisson_ptrs(rate)
        }
    }

    /// Hörmann's transformed rejection with squeeze, valid for rate >= 10.
    fn poisson_ptrs(&mut self, rate: f64) -> Result<u64, RandError> {
        let log_rate = rate.ln();
        let b = 0.931 + 2.53 * rate.sqrt();
        let a = -0.059 + 0.024_83 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.draw_unit_uniform() - 0.5;
            let v = self.draw_unit_uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return Ok(k as u64);
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
            let rhs = k * log_rate - rate - ln_factorial(k as u64);
            if lhs <= rhs {
                return Ok(k as u64);
            }
        }
    }

    /// Categorical draw by inverse CDF over normalised weights; boundary ties
    /// resolve toward the lower index, and zero-weight entries are never
    /// selected.
    pub fn draw_categorical(&mut self, weights: &[f64]) -> Result<usize, RandError> {
        let u = self.draw_unit_uniform();
        categorical_from_uniform(weights, u)
    }
}

/// Inverse-CDF categorical selection given a uniform variate.
pub(crate) fn categorical_from_uniform(weights: &[f64], u: f64) -> Result<usize, RandError> {
    let mut total = 0.0;
    for &w in weights {
        if w.is_nan() || w < 0.0 {
            return Err(RandError::DegenerateWeights);
        }
        total += w;
    }
    if !(total > 0.0) || !total.is_finite() {
        return Err(RandError::DegenerateWeights);
    }
    let target = u * total;
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(i);
        }
        cum += w;
        if cum >= target && w > 0.0 {
            return Ok(i);
        }
    }
    // Floating-point shortfall at the top end: return the last live index.
    last_positive.ok_or(RandError::DegenerateWeights)
}

/// Natural log of `k!`, exact summation below 128, Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    if k < 128 {
        let mut acc = 0.0;
        for i in 2..=k {
            acc += (i as f64).ln();
        }
        acc
    } else {
        let n = k as f64 + 1.0; // ln k! = ln Gamma(k+1)
        let inv = 1.0 / n;
        let inv2 = inv * inv;
        (n - 0.5) * n.ln() - n + 0.5 * (std::f64::consts::TAU).ln()
            + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
    }
}
