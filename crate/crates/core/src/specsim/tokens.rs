//! Deterministic stand-in for the target model's output.
//!
//! The "true" token at a position is a pure function of the seed, the request
//! id and the position. A drafter reproduces it with its latent acceptance
//! probability and otherwise proposes some other token.

use crate::rng::{keyed, name_salt, unit_f64, Purpose, SeekStream};
use crate::workload::Request;

pub const VOCAB_SIZE: u32 = 152_064;

/// Target-model tokens of one request.
#[derive(Clone, Debug)]
pub struct TokenOracle {
    stream: SeekStream,
}

impl TokenOracle {
    pub fn new(seed: u64, request: u64) -> Self {
        Self { stream: SeekStream::new(keyed(seed, request, Purpose::TraceToken, 0)) }
    }

    pub fn token(&mut self, position: u32) -> u32 {
        (self.stream.get(u64::from(position)) % u64::from(VOCAB_SIZE)) as u32
    }
}

pub fn true_token(seed: u64, request: u64, position: u32) -> u32 {
    TokenOracle::new(seed, request).token(position)
}

/// The full response the target model would produce for `request`.
pub fn generate_true_sequence(request: &Request, seed: u64) -> Vec<u32> {
    let mut oracle = TokenOracle::new(seed, request.id);
    (0..request.true_len).map(|i| oracle.token(i)).collect()
}

/// One drafting method's proposals for one request.
#[derive(Clone, Debug)]
pub struct Drafter {
    draws: SeekStream,
    p: f64,
}

impl Drafter {
    pub fn new(seed: u64, request: u64, method: &str, p: f64) -> Self {
        Self {
            draws: SeekStream::new(keyed(seed, request, Purpose::AcceptDraw, name_salt(method))),
            p,
        }
    }

    /// Proposed token at `position`, given the true one.
    pub fn propose(&mut self, position: u32, truth: u32) -> u32 {
        let x = self.draws.get(u64::from(position));
        if unit_f64(x) < self.p {
            truth
        } else {
            let offset = 1 + (x.rotate_left(29) % u64::from(VOCAB_SIZE - 1)) as u32;
            (truth + offset) % VOCAB_SIZE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn req(id: u64, len: u32) -> Request {
        Request::new(id, 1, len, BTreeMap::new()).unwrap()
    }

    #[test]
    fn sequences_are_pure() {
        let r = req(7, 300);
        assert_eq!(generate_true_sequence(&r, 11), generate_true_sequence(&r, 11));
        assert_eq!(generate_true_sequence(&r, 11).len(), 300);
    }

    #[test]
    fn ids_and_seeds_give_different_sequences() {
        let a = generate_true_sequence(&req(1, 64), 5);
        assert_ne!(a, generate_true_sequence(&req(2, 64), 5));
        assert_ne!(a, generate_true_sequence(&req(1, 64), 6));
    }

    #[test]
    fn positionwise_matches_whole_sequence() {
        let r = req(3, 200);
        let whole = generate_true_sequence(&r, 9);
        for pos in [199u32, 0, 57, 58, 3] {
            assert_eq!(true_token(9, 3, pos), whole[pos as usize]);
        }
        assert!(whole.iter().all(|&t| t < VOCAB_SIZE));
    }

    #[test]
    fn drafter_extremes() {
        let mut truth = TokenOracle::new(1, 1);
        let mut always = Drafter::new(1, 1, "d", 1.0);
        let mut never = Drafter::new(1, 1, "d", 0.0);
        for pos in 0..500 {
            let t = truth.token(pos);
            assert_eq!(always.propose(pos, t), t);
            let wrong = never.propose(pos, t);
            assert!(wrong != t && wrong < VOCAB_SIZE);
        }
    }

    #[test]
    fn drafter_match_rate_tracks_p() {
        let mut truth = TokenOracle::new(4, 8);
        let mut d = Drafter::new(4, 8, "m", 0.3);
        let n = 100_000;
        let hits = (0..n).filter(|&i| {
            let t = truth.token(i);
            d.propose(i, t) == t
        });
        let rate = hits.count() as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
    }
}
