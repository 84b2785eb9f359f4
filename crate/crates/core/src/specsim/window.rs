use serde::{Deserialize, Serialize};

use super::tokens::TokenOracle;
use crate::workload::ExecMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowStatus {
    Drafting,
    AwaitingVerify,
    Verified,
}

/// One drafted window of a request.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowState {
    pub request: u64,
    /// Position of the first drafted token.
    pub start: u32,
    /// The request's drafting window when this window was drafted.
    pub nominal: u32,
    pub mode: ExecMode,
    /// Proposed tokens; never more than `nominal`.
    pub tokens: Vec<u32>,
    pub status: WindowStatus,
}

impl WindowState {
    pub fn proposed(&self) -> u32 {
        self.tokens.len() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct VerificationOutcome {
    /// Length of the matching prefix.
    pub accepted: u32,
    /// A rejected token was replaced by the target's token.
    pub corrected_token_emitted: bool,
    pub bonus_token_emitted: bool,
    /// Tokens appended to the request.
    pub committed: u32,
    /// Drafted tokens thrown away: the rejected tail of this window plus the
    /// whole successor window if one was in flight.
    pub wasted: u32,
    pub successor_discarded: bool,
    /// Largest drafting window among the windows involved; the waste of this
    /// outcome is at most `2 * window - 1`.
    pub window: u32,
}

/// Exact-match verification of `window` against the target's tokens.
///
/// The first mismatch at offset `a` commits the `a` accepted tokens plus the
/// target's token at that offset and discards everything drafted after it,
/// including `successor`. A fully accepted window commits its tokens, plus
/// one bonus token from the target when `bonus_token` is set, nothing is
/// drafted ahead and the response has room left.
pub fn verify_window(
    window: &WindowState,
    successor: Option<&WindowState>,
    truth: &mut TokenOracle,
    true_len: u32,
    bonus_token: bool,
) -> VerificationOutcome {
    let size = window.proposed();
    let accepted = window
        .tokens
        .iter()
        .enumerate()
        .position(|(i, &t)| t != truth.token(window.start + i as u32))
        .map_or(size, |a| a as u32);
    let bound = successor.map_or(window.nominal, |s| s.nominal.max(window.nominal));
    if accepted < size {
        let ahead = successor.map_or(0, WindowState::proposed);
        VerificationOutcome {
            accepted,
            corrected_token_emitted: true,
            bonus_token_emitted: false,
            committed: accepted + 1,
            wasted: size - accepted - 1 + ahead,
            successor_discarded: successor.is_some(),
            window: bound,
        }
    } else {
        let bonus = bonus_token && successor.is_none() && window.start + size < true_len;
        VerificationOutcome {
            accepted,
            corrected_token_emitted: false,
            bonus_token_emitted: bonus,
            committed: size + u32::from(bonus),
            wasted: 0,
            successor_discarded: false,
            window: bound,
        }
    }
}
