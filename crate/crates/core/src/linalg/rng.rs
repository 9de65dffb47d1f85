//! Seeded pseudo-randomness.
//!
//! Every random draw in this crate goes through [`SeededRng`], a xoshiro256++
//! generator seeded via SplitMix64. The algorithm is fixed: the same seed
//! yields the same draw sequence on every platform and every release.
//!
//! Sub-streams (per task, per layer, per epoch) never share one sequential
//! stream; they are opened with [`derive_seed`], which hashes
//! `(root seed, purpose tag, a, b)` into an independent seed. This is what
//! makes checkpoint/resume reproduce an uninterrupted run bit for bit: the
//! randomness consumed after task `t` does not depend on how much randomness
//! was consumed before it.

/// SplitMix64 output function, also used as the final mixer in [`derive_seed`].
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent sub-stream seed from a root seed.
///
/// The purpose tag keeps streams with equal `(a, b)` ids apart (e.g.
/// factor init vs. batch shuffling for the same task). The hash is FNV-1a
/// over the tag bytes folded into the root, then two SplitMix64 rounds
/// absorbing `a` and `b`.
pub fn derive_seed(root: u64, purpose: &str, a: u64, b: u64) -> u64 {
    let mut h = root ^ 0xCBF2_9CE4_8422_2325;
    for &byte in purpose.as_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut state = h ^ a;
    let first = splitmix64(&mut state);
    state ^= b;
    first ^ splitmix64(&mut state)
}

/// Deterministic xoshiro256++ generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: [u64; 4],
}

impl SeededRng {
    /// Seed the four state words with consecutive SplitMix64 outputs, as
    /// recommended by the xoshiro authors.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { state }
    }

    /// xoshiro256++ step.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller. Consumes exactly two `u64`s:
    /// `u1` is shifted into `(0, 1]` so the log is always finite.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased uniform draw in `[0, n)` (Lemire's multiply-and-reject).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        let mut m = u128::from(self.next_u64()) * u128::from(n);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = u128::from(self.next_u64()) * u128::from(n);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Uniform random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<u32> {
        let mut perm: Vec<u32> = (0..n as u32).collect();
        self.shuffle(&mut perm);
        perm
    }
}
