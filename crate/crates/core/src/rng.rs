//! Deterministic random streams.
//!
//! Dataset bytes and parameter initialization are pinned to exact bit
//! patterns across releases, so the generator is fixed here instead of
//! borrowing one whose stream may change between crate versions. SplitMix64
//! is used both as the stream generator and for counter-based derivation of
//! independent child seeds.

use crate::scalar::Scalar;
#[allow(unused_imports)]
use num_traits::Float as _;


#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a master seed and a counter.
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    let mut s = master ^ counter.wrapping_mul(0xA076_1D64_78BD_642F);
    let a = splitmix64(&mut s);
    let b = splitmix64(&mut s);
    a ^ b.rotate_left(17)
}

/// Seeded random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Cached second output of the Box-Muller pair.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // Warm the state so nearby seeds diverge immediately.
        let mut state = seed;
        let _ = splitmix64(&mut state);
        Rng {
            state,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for the
        // small moduli used here.
        (self.uniform() * n as f64) as usize % n
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u in (0, 1] to keep ln finite.
        let u = 1.0 - self.uniform();
        let v = self.uniform();
        let r = (-2.0 * libm_ln(u)).sqrt();
        let theta = 2.0 * core::f64::consts::PI * v;
        self.spare_normal = Some(r * libm_sin(theta));
        r * libm_cos(theta)
    }

    pub fn normal_scaled<T: Scalar>(&mut self, std: f64) -> T {
        T::of(self.normal() * std)
    }
}

// Route the f64 transcendentals through num-traits so libm backs them when
// the std feature is off.
#[inline]
fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}
#[inline]
fn libm_sin(x: f64) -> f64 {
    num_traits::Float::sin(x)
}
#[inline]
fn libm_cos(x: f64) -> f64 {
    num_traits::Float::cos(x)
}
