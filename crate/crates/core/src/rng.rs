//! Keyed random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is built directly from
//! `(seed, request id, purpose, salt)`, so the value at a given position is a
//! pure function of those coordinates and of nothing else in the program.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    TraceLength = 1,
    TraceAccept = 2,
    TraceToken = 3,
    AcceptDraw = 4,
}

/// Builds a keyed ChaCha8 generator.
pub fn keyed(seed: u64, id: u64, purpose: Purpose, salt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&id.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[24..32].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// 64-bit FNV-1a, used to turn method names into stream salts.
pub fn name_salt(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Uniform in `[0, 1)` from the top 53 bits.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Reads the `index`-th 64-bit output of a keyed stream without touching the
/// generator's sequential position.
pub fn nth_u64(rng: &mut ChaCha8Rng, index: u64) -> u64 {
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

/// Random access over a keyed stream that stays cheap when reads are
/// sequential: the generator is only repositioned on a jump.
#[derive(Clone, Debug)]
pub struct SeekStream {
    rng: ChaCha8Rng,
    next: u64,
}

impl SeekStream {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, next: 0 }
    }

    pub fn get(&mut self, index: u64) -> u64 {
        if index != self.next {
            self.rng.set_word_pos(u128::from(index) * 2);
        }
        self.next = index + 1;
        self.rng.next_u64()
    }
}

/// Sequential cache over a keyed stream: `get(i)` is the `i`-th output.
#[derive(Clone, Debug)]
pub struct StreamCache {
    rng: ChaCha8Rng,
    values: Vec<u64>,
}

impl StreamCache {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            values: Vec::new(),
        }
    }

    pub fn get(&mut self, index: usize) -> u64 {
        while self.values.len() <= index {
            self.values.push(self.rng.next_u64());
        }
        self.values[index]
    }
}
