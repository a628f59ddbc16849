//! Counter-based random number generation.
//!
//! Every random quantity in the toolkit is drawn from a substream addressed
//! by `(master seed, stream tag, a, b, c)` — e.g. `(seed, NOISE, replica,
//! particle, step)`. A draw is a pure function of its address, so results are
//! independent of thread count, scheduling and evaluation order, and any
//! prefix of a simulation can be reproduced without replaying the rest.
//!
//! The mixer is splitmix64 applied to the absorbed address words. It is not
//! cryptographic; it is a fast, well-distributed hash that is more than
//! adequate for Monte Carlo.

use std::f64::consts::PI;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const MIX_A: u64 = 0xbf58_476d_1ce4_e5b9;
const MIX_B: u64 = 0x94d0_49bb_1331_11eb;
const WORD_A: u64 = 0xa076_1d64_78bd_642f;
const WORD_B: u64 = 0xe703_7ed1_a0b4_28db;
const WORD_C: u64 = 0x8ebc_6af0_9c88_c6e3;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

/// Stream tags keep the independent uses of the master seed disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    /// Brownian increments, addressed (replica, particle, step).
    Noise,
    /// Initial conditions, addressed (replica, particle, 0).
    Initial,
    /// Randomized check grids (KBM trials, probe vectors, ...).
    Probe,
}

impl StreamTag {
    fn word(self) -> u64 {
        match self {
            StreamTag::Noise => 0x01,
            StreamTag::Initial => 0x02,
            StreamTag::Probe => 0x03,
        }
    }
}

/// A stateful view of one substream. Cheap to construct; construct one per
/// (address) and draw the handful of values that address owns.
#[derive(Debug, Clone)]
pub struct Substream {
    state: u64,
}

impl Substream {
    pub fn new(seed: u64, tag: StreamTag, a: u64, b: u64, c: u64) -> Self {
        let mut s = splitmix(seed ^ tag.word().wrapping_mul(GOLDEN));
        s = splitmix(s ^ a.wrapping_mul(WORD_A));
        s = splitmix(s ^ b.wrapping_mul(WORD_B));
        s = splitmix(s ^ c.wrapping_mul(WORD_C));
        Substream { state: s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = splitmix(self.state);
        self.state
    }

    /// Uniform on (0, 1]: the +1 keeps `ln` off zero.
    #[inline]
    pub fn uniform_pos(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform on [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (cosine branch only, so each draw is a
    /// pure function of the stream position).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_pos();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}
