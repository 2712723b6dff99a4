use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision a model runs at: an integer bit-width in `1..=8`, or
/// full 32-bit float.
///
/// `Full` sorts above every integer width and prints as `32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    Int(u8),
    Full,
}

/// Largest supported integer bit-width; deployment codes are stored at this width.
pub const MAX_INT_BITS: u8 = 8;

impl Precision {
    pub const FULL_BITS: u8 = 32;

    /// Builds an integer precision, rejecting widths outside `1..=8`.
    pub fn int(bits: u8) -> Result<Self> {
        if (1..=MAX_INT_BITS).contains(&bits) {
            Ok(Precision::Int(bits))
        } else {
            Err(Error::Input(format!(
                "bit-width {bits} outside supported range 1..={MAX_INT_BITS}"
            )))
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == Self::FULL_BITS {
            Ok(Precision::Full)
        } else {
            Self::int(bits)
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Precision::Int(n) => n,
            Precision::Full => Self::FULL_BITS,
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Precision::Full)
    }

    /// `MAX_N = 2^N - 1`, the largest code at this width. `None` for full precision.
    pub fn max_level(self) -> Option<u32> {
        match self {
            Precision::Int(n) => Some((1u32 << n) - 1),
            Precision::Full => None,
        }
    }
}

impl TryFrom<u8> for Precision {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Precision::from_bits(bits)
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        p.bits()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("fp32") || s.eq_ignore_ascii_case("full") {
            return Ok(Precision::Full);
        }
        let bits: u8 = s
            .parse()
            .map_err(|_| Error::Input(format!("not a bit-width: {s:?}")))?;
        Precision::from_bits(bits)
    }
}

/// Parses a comma-separated bit list such as `1,2,4,8,32`.
pub fn parse_bit_list(s: &str) -> Result<Vec<Precision>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_bit_list(bits: &[Precision]) -> String {
    bits.iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
