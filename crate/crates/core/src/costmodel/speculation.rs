use super::{check_probability, check_window, CostModelError};
use crate::Scalar;

/// Probability that exactly `a` of `w` drafted tokens are accepted when each
/// token is accepted independently with probability `p`:
/// `p^a (1-p)` for `a < w` and `p^w` for `a = w`.
pub fn accept_pmf<T: Scalar>(p: T, w: u32, a: u32) -> Result<T, CostModelError> {
    check_probability(p)?;
    check_window(w)?;
    if a > w {
        return Err(CostModelError::AcceptedAboveWindow { accepted: a, window: w });
    }
    let pa = p.powi(a as i32);
    Ok(if a == w { pa } else { pa * (T::one() - p) })
}

/// Expected committed tokens per drafting window under pipelined execution.
///
/// A window that stops at `a < w` also costs the following window, so its
/// `a + 1` tokens are spread over two windows; a fully accepted window yields
/// `w` tokens and leaves the pipeline intact.
pub fn expected_tokens_decoupled<T: Scalar>(p: T, w: u32) -> Result<T, CostModelError> {
    check_probability(p)?;
    check_window(w)?;
    let half = T::lit(0.5);
    let one_minus = T::one() - p;
    let mut pa = T::one();
    let mut partial = T::zero();
    for a in 0..w {
        partial = partial + pa * one_minus * T::from_count(a as usize + 1) * half;
        pa = pa * p;
    }
    Ok(partial + T::from_count(w as usize) * pa)
}

/// Expected committed tokens per serialized draft-then-verify iteration:
/// the accepted prefix plus the token emitted by the verifier,
/// `(1 - p^(w+1)) / (1 - p)`, with limit `w + 1` at `p = 1`.
pub fn expected_tokens_coupled<T: Scalar>(p: T, w: u32) -> Result<T, CostModelError> {
    check_probability(p)?;
    check_window(w)?;
    // Summed directly so p -> 1 stays exact.
    let mut term = T::one();
    let mut total = T::zero();
    for _ in 0..=w {
        total = total + term;
        term = term * p;
    }
    Ok(total)
}
