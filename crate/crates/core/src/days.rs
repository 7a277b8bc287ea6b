//! Calendar days, county identifiers and day spans.
//!
//! Day index 0 is 2020-01-01, so day 59 is 2020-02-29 and day 60 is 2020-03-01.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar date mapped to day index 0.
pub fn day_zero() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

/// Day index of a calendar date. Dates before day zero are rejected.
pub fn day_index(date: NaiveDate) -> Result<u32> {
    let offset = (date - day_zero()).num_days();
    u32::try_from(offset).map_err(|_| Error::Range(format!("{date} precedes 2020-01-01")))
}

pub fn date_of(day: u32) -> NaiveDate {
    day_zero() + chrono::Days::new(u64::from(day))
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| Error::Validation(format!("bad ISO date {s:?}: {e}")))
}

/// Flow tables are weekly; week `w` covers days `7w .. 7w + 7`.
pub fn week_of(day: u32) -> u32 {
    day / 7
}

/// Five-digit county code. Finer-grained region codes roll up to their county
/// by their first five digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fips(pub u32);

impl Fips {
    pub fn state(self) -> u32 {
        self.0 / 1000
    }

    pub fn county(self) -> u32 {
        self.0 % 1000
    }
}

impl fmt::Display for Fips {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:05}", self.0)
    }
}

impl FromStr for Fips {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Validation(format!("bad county code {s:?}")));
        }
        let county = if s.len() > 5 { &s[..5] } else { s };
        county
            .parse()
            .map(Fips)
            .map_err(|e| Error::Validation(format!("bad county code {s:?}: {e}")))
    }
}

/// Inclusive range of day indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySpan {
    pub start: u32,
    pub end: u32,
}

impl DaySpan {
    pub fn new(start: u32, end: u32) -> Result<Self> {
        if end < start {
            return Err(Error::Range(format!("span end {end} before start {start}")));
        }
        Ok(DaySpan { start, end })
    }

    pub fn from_dates(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        DaySpan::new(day_index(start)?, day_index(end)?)
    }

    /// 2020-02-22 through 2020-05-31.
    pub fn default_graph_span() -> Self {
        DaySpan {
            start: 52,
            end: 151,
        }
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, day: u32) -> bool {
        (self.start..=self.end).contains(&day)
    }

    pub fn days(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }

    /// Position of `day` within the span.
    pub fn offset(&self, day: u32) -> Result<usize> {
        if self.contains(day) {
            Ok((day - self.start) as usize)
        } else {
            Err(Error::Range(format!(
                "day {day} outside span {}..={}",
                self.start, self.end
            )))
        }
    }
}

/// Half-open day range `a:b`, as used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: u32,
    pub end: u32,
}

impl DayRange {
    pub fn days(&self) -> std::ops::Range<u32> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FromStr for DayRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("expected a:b day range, got {s:?}")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|e| Error::Usage(format!("bad day {x:?}: {e}")))
        };
        let (start, end) = (parse(a)?, parse(b)?);
        if end <= start {
            return Err(Error::Usage(format!("empty day range {s:?}")));
        }
        Ok(DayRange { start, end })
    }
}
