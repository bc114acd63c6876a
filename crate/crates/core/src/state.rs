//! State alphabets for the extended and lumped chains.
//!
//! The extended chain lives on `{1..sigma} ∪ {sigma+1..2*sigma} ∪ {d}`: the
//! first block holds the pre-retirement health statuses, the second block the
//! (unobserved) health statuses after retirement, and `d` is the absorbing
//! dead state. The observed (lumped) chain merges the whole retired block
//! into the single pensioner state `p`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A state of either alphabet.
///
/// `Pre(i)` and `Retired(i)` carry the health index `i ∈ 1..=sigma`;
/// `Retired(i)` corresponds to extended label `sigma + i`. `Pensioner` is the
/// lumped state `p` and only occurs in the lumped alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum State {
    Pre(u32),
    Retired(u32),
    Pensioner,
    Dead,
}

impl State {
    /// Merge the retired block into the pensioner state. Identity on
    /// `{1..sigma, d}`, maps every retired health state to `p`.
    pub fn lump(self) -> State {
        match self {
            State::Retired(_) => State::Pensioner,
            other => other,
        }
    }

    pub fn is_extended(self, sigma: u32) -> bool {
        match self {
            State::Pre(i) | State::Retired(i) => 1 <= i && i <= sigma,
            State::Dead => true,
            State::Pensioner => false,
        }
    }

    pub fn is_lumped(self, sigma: u32) -> bool {
        match self {
            State::Pre(i) => 1 <= i && i <= sigma,
            State::Pensioner | State::Dead => true,
            State::Retired(_) => false,
        }
    }

    /// Dense index in the extended alphabet: `Pre(i) -> i-1`,
    /// `Retired(i) -> sigma+i-1`, `Dead -> 2*sigma`.
    pub fn ext_index(self, sigma: u32) -> usize {
        match self {
            State::Pre(i) => (i - 1) as usize,
            State::Retired(i) => (sigma + i - 1) as usize,
            State::Dead => (2 * sigma) as usize,
            State::Pensioner => panic!("pensioner is not an extended state"),
        }
    }

    /// Dense index in the lumped alphabet: `Pre(i) -> i-1`, `p -> sigma`,
    /// `d -> sigma+1`.
    pub fn lumped_index(self, sigma: u32) -> usize {
        match self {
            State::Pre(i) => (i - 1) as usize,
            State::Pensioner => sigma as usize,
            State::Dead => (sigma + 1) as usize,
            State::Retired(_) => panic!("retired health states are not lumped states"),
        }
    }

    pub fn from_ext_index(idx: usize, sigma: u32) -> State {
        let s = sigma as usize;
        if idx < s {
            State::Pre(idx as u32 + 1)
        } else if idx < 2 * s {
            State::Retired((idx - s) as u32 + 1)
        } else if idx == 2 * s {
            State::Dead
        } else {
            panic!("extended index {idx} out of range for sigma={sigma}");
        }
    }

    /// Parse a state label as it appears in model files: `"1".."2*sigma"`
    /// for numbered states, `"p"`, `"d"`.
    pub fn parse(label: &str, sigma: u32) -> Option<State> {
        match label {
            "p" => Some(State::Pensioner),
            "d" => Some(State::Dead),
            num => {
                let i: u32 = num.parse().ok()?;
                if 1 <= i && i <= sigma {
                    Some(State::Pre(i))
                } else if sigma < i && i <= 2 * sigma {
                    Some(State::Retired(i - sigma))
                } else {
                    None
                }
            }
        }
    }

    /// Display label; `sigma` fixes the numbering of the retired block.
    pub fn label(self, sigma: u32) -> String {
        match self {
            State::Pre(i) => i.to_string(),
            State::Retired(i) => (sigma + i).to_string(),
            State::Pensioner => "p".to_string(),
            State::Dead => "d".to_string(),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Pre(i) => write!(f, "{i}"),
            State::Retired(i) => write!(f, "r{i}"),
            State::Pensioner => write!(f, "p"),
            State::Dead => write!(f, "d"),
        }
    }
}

/// Iterator over the extended alphabet in dense-index order.
pub fn extended_states(sigma: u32) -> impl Iterator<Item = State> {
    (0..=(2 * sigma) as usize).map(move |i| State::from_ext_index(i, sigma))
}

/// Iterator over the lumped alphabet in dense-index order.
pub fn lumped_states(sigma: u32) -> impl Iterator<Item = State> {
    (1..=sigma)
        .map(State::Pre)
        .chain([State::Pensioner, State::Dead])
}
