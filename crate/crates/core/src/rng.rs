//! Counter-based Philox4x32-10 generator.
//!
//! Output is a pure function of `(seed, stream, counter)`, so two parties
//! holding the same seed reproduce identical draws regardless of platform,
//! thread count, or the order in which rows are requested. Floating-point
//! transforms use `libm` to avoid depending on the platform math library.

use serde::{Deserialize, Serialize};

/// Identifier written into generator descriptions and config files.
pub const PHILOX_ID: &str = "philox4x32-10";

const MUL0: u32 = 0xD251_1F53;
const MUL1: u32 = 0xCD9E_8D57;
const WEYL0: u32 = 0x9E37_79B9;
const WEYL1: u32 = 0xBB67_AE85;
const ROUNDS: usize = 10;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32 block: encrypt `ctr` under `key`.
pub fn philox4x32(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..ROUNDS {
        if round > 0 {
            k[0] = k[0].wrapping_add(WEYL0);
            k[1] = k[1].wrapping_add(WEYL1);
        }
        let (hi0, lo0) = mulhilo(MUL0, c[0]);
        let (hi1, lo1) = mulhilo(MUL1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Serializable generator description: algorithm id plus 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub algorithm: GeneratorAlgorithm,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorAlgorithm {
    #[serde(rename = "philox4x32-10")]
    Philox4x32_10,
}

impl GeneratorSpec {
    pub fn philox(seed: u64) -> Self {
        Self {
            algorithm: GeneratorAlgorithm::Philox4x32_10,
            seed,
        }
    }

    pub fn stream(&self, stream: u64) -> Philox {
        Philox::new(self.seed, stream)
    }
}

/// Sequential view over a Philox stream.
///
/// The 128-bit counter is laid out as `(block lo, block hi, stream lo, stream hi)`.
/// Each block yields four 32-bit words which are consumed in order.
#[derive(Debug, Clone)]
pub struct Philox {
    key: [u32; 2],
    stream: u64,
    block: u64,
    buf: [u32; 4],
    used: usize,
}

impl Philox {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: [seed as u32, (seed >> 32) as u32],
            stream,
            block: 0,
            buf: [0; 4],
            used: 4,
        }
    }

    /// Position the stream at an absolute block index.
    pub fn at_block(seed: u64, stream: u64, block: u64) -> Self {
        let mut rng = Self::new(seed, stream);
        rng.block = block;
        rng
    }

    fn refill(&mut self) {
        let ctr = [
            self.block as u32,
            (self.block >> 32) as u32,
            self.stream as u32,
            (self.stream >> 32) as u32,
        ];
        self.buf = philox4x32(ctr, self.key);
        self.block = self.block.wrapping_add(1);
        self.used = 0;
    }

    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.refill();
        }
        let v = self.buf[self.used];
        self.used += 1;
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by inversion, so each draw consumes exactly one `u64`.
    pub fn next_normal(&mut self) -> f64 {
        crate::special::normal_quantile(self.next_open01())
    }

    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_open01() < p
    }

    /// Unbiased integer in `0..bound` (Lemire's multiply-and-reject).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
