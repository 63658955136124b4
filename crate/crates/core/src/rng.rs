//! Counter-based random streams.
//!
//! Every trial owns a stream whose key is derived from
//! `(master seed, label, trial index)`. The i-th output of a stream is a pure
//! function of `(key, i)`, so results never depend on how trials are scheduled
//! across threads, and a single uniform can be looked up by index without
//! replaying the stream.

use rand_core::{impls, Error as RandError, RngCore};

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

/// The i-th raw 64-bit output of the stream keyed by `key`.
#[inline]
pub fn word_at(key: u64, index: u64) -> u64 {
    mix64(key.wrapping_add(GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// The i-th uniform in `[0, 1)` of the stream keyed by `key` (53-bit resolution).
#[inline]
pub fn uniform_at(key: u64, index: u64) -> f64 {
    (word_at(key, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derive a child key from a parent key and an index.
#[inline]
pub fn child_key(key: u64, index: u64) -> u64 {
    mix64(key ^ mix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Master seed of an experiment; the root of all derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MasterSeed(pub u64);

impl MasterSeed {
    /// Key of the stream for `(label, index)`.
    pub fn key(&self, label: &str, index: u64) -> u64 {
        child_key(mix64(self.0 ^ hash_label(label)), index)
    }

    pub fn stream(&self, label: &str, index: u64) -> StreamRng {
        StreamRng::new(self.key(label, index))
    }
}

/// Sequential view of a counter-based stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of 64-bit words drawn so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, index: u64) -> StreamRng {
        StreamRng::new(child_key(self.key, index))
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let u = uniform_at(self.key, self.counter);
        self.counter += 1;
        u
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let w = word_at(self.key, self.counter);
        self.counter += 1;
        w
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.fill_bytes(dest);
        Ok(())
    }
}
