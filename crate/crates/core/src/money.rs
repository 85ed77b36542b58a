//! Fixed-point monetary amounts.
//!
//! All objective arithmetic (revenue, electricity cost, lost revenue) runs on
//! an integer grid of [`Money::SCALE`] units per currency unit, so that two
//! solvers evaluating the same solution agree exactly.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MoneyParseError {
    #[error("empty amount")]
    Empty,
    #[error("invalid character {0:?} in amount")]
    InvalidChar(char),
    #[error("more than {} fractional digits", Money::DECIMALS)]
    TooPrecise,
    #[error("amount out of range")]
    Overflow,
}

impl Money {
    pub const DECIMALS: u32 = 6;
    pub const SCALE: i64 = 1_000_000;
    pub const ZERO: Money = Money(0);

    pub const fn from_units(units: i64) -> Self {
        Money(units)
    }

    pub const fn units(self) -> i64 {
        self.0
    }

    /// Converts a real-valued amount onto the grid, rounding half to even.
    /// Non-finite input maps to zero.
    pub fn from_f64(amount: f64) -> Self {
        if !amount.is_finite() {
            return Money::ZERO;
        }
        let scaled = (amount * Self::SCALE as f64).round_ties_even();
        Money(scaled.clamp(i64::MIN as f64, i64::MAX as f64) as i64)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn checked_mul(self, k: i64) -> Option<Money> {
        self.0.checked_mul(k).map(Money)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl SubAssign for Money {
    fn sub_assign(&mut self, rhs: Money) {
        self.0 -= rhs.0;
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Mul<i64> for Money {
    type Output = Money;
    fn mul(self, k: i64) -> Money {
        Money(self.0 * k)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let scale = Self::SCALE as u64;
        write!(
            f,
            "{sign}{}.{:0width$}",
            abs / scale,
            abs % scale,
            width = Self::DECIMALS as usize
        )
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    /// Exact decimal parse: `[-+]digits[.digits]` with at most six
    /// fractional digits. No exponent notation.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (negative, body) = match s.as_bytes().first() {
            Some(b'-') => (true, &s[1..]),
            Some(b'+') => (false, &s[1..]),
            Some(_) => (false, s),
            None => return Err(MoneyParseError::Empty),
        };
        let (int_part, frac_part) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(MoneyParseError::Empty);
        }
        if frac_part.len() > Self::DECIMALS as usize {
            return Err(MoneyParseError::TooPrecise);
        }
        let mut units: i64 = 0;
        for c in int_part.chars() {
            let d = c.to_digit(10).ok_or(MoneyParseError::InvalidChar(c))?;
            units = units
                .checked_mul(10)
                .and_then(|u| u.checked_add(d as i64))
                .ok_or(MoneyParseError::Overflow)?;
        }
        units = units
            .checked_mul(Self::SCALE)
            .ok_or(MoneyParseError::Overflow)?;
        let mut frac: i64 = 0;
        for c in frac_part.chars() {
            let d = c.to_digit(10).ok_or(MoneyParseError::InvalidChar(c))?;
            frac = frac * 10 + d as i64;
        }
        frac *= 10i64.pow(Self::DECIMALS - frac_part.len() as u32);
        units = units.checked_add(frac).ok_or(MoneyParseError::Overflow)?;
        Ok(Money(if negative { -units } else { units }))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
