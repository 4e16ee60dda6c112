use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Execution precision of a quantizable network: a low-bit mode (1..=8) or
/// full precision (32).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitMode(u8);

impl BitMode {
    pub const FULL: BitMode = BitMode(32);
    pub const MAX_LOW: u8 = 8;

    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            1..=Self::MAX_LOW | 32 => Ok(BitMode(bits)),
            other => Err(Error::BitWidth(other as u32)),
        }
    }

    pub fn low(bits: u8) -> Result<Self> {
        match bits {
            1..=Self::MAX_LOW => Ok(BitMode(bits)),
            other => Err(Error::BitWidth(other as u32)),
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_full(self) -> bool {
        self.0 == 32
    }
}

impl TryFrom<u8> for BitMode {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        BitMode::new(bits)
    }
}

impl From<BitMode> for u8 {
    fn from(mode: BitMode) -> u8 {
        mode.0
    }
}

impl fmt::Display for BitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.0)
    }
}

/// Parses a list of raw bit-widths into a sorted, deduplicated mode list.
pub fn mode_list(bits: &[u8]) -> Result<Vec<BitMode>> {
    let mut modes = bits.iter().map(|&b| BitMode::new(b)).collect::<Result<Vec<_>>>()?;
    modes.sort();
    modes.dedup();
    Ok(modes)
}
