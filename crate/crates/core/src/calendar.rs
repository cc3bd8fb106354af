//! Monthly calendar index.

use std::fmt;
use std::str::FromStr;

use crate::error::BpsError;

/// A calendar month, written `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    fn index(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    fn from_index(i: i64) -> Self {
        Self { year: i.div_euclid(12) as i32, month: (i.rem_euclid(12) + 1) as u32 }
    }

    /// Shift by a signed number of months.
    pub fn add_months(self, months: i64) -> Self {
        Self::from_index(self.index() + months)
    }

    /// Months from `other` to `self`.
    pub fn months_since(self, other: Self) -> i64 {
        self.index() - other.index()
    }

    /// Months since 0000-01; a stable integer key for the month.
    pub fn ordinal(self) -> i64 {
        self.index()
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = BpsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || BpsError::Data(format!("invalid month '{s}', expected YYYY-MM"));
        let (y, m) = s.split_once(['-', '/']).ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        Self::new(year, month).ok_or_else(bad)
    }
}
