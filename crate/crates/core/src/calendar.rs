//! Trading calendar and calendar-month arithmetic.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};

use crate::error::{Error, Result};

/// A calendar month, stored as `year * 12 + (month - 1)` so that month
/// arithmetic is plain integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthId(i32);

impl MonthId {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range: {month}");
        MonthId(year * 12 + month as i32 - 1)
    }

    pub fn of(date: NaiveDate) -> Self {
        MonthId::new(date.year(), date.month())
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    /// Shift by a (possibly negative) number of months.
    pub fn offset(self, months: i32) -> Self {
        MonthId(self.0 + months)
    }

    /// Signed number of months from `other` to `self`.
    pub fn months_since(self, other: MonthId) -> i32 {
        self.0 - other.0
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year(), self.month(), 1).expect("valid month")
    }
}

impl fmt::Display for MonthId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for MonthId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) || y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        Ok(MonthId::new(year, month))
    }
}

/// Ordered set of trading days. Each day belongs to exactly one calendar month.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradingCalendar {
    days: Vec<NaiveDate>,
    day_months: Vec<MonthId>,
}

impl TradingCalendar {
    pub fn new(days: Vec<NaiveDate>) -> Result<Self> {
        if let Some(pos) = days.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::UnorderedCalendar { position: pos + 1 });
        }
        let day_months = days.iter().map(|d| MonthId::of(*d)).collect();
        Ok(TradingCalendar { days, day_months })
    }

    /// Union of arbitrary dates (duplicates allowed, any order).
    pub fn from_dates<I: IntoIterator<Item = NaiveDate>>(dates: I) -> Self {
        let mut days: Vec<NaiveDate> = dates.into_iter().collect();
        days.sort_unstable();
        days.dedup();
        TradingCalendar::new(days).expect("sorted and deduplicated")
    }

    /// `n` consecutive weekdays starting at (or after) `start`.
    pub fn weekdays(start: NaiveDate, n: usize) -> Self {
        let mut days = Vec::with_capacity(n);
        let mut d = start;
        while days.len() < n {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                days.push(d);
            }
            d += Duration::days(1);
        }
        TradingCalendar::new(days).expect("strictly increasing")
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn days(&self) -> &[NaiveDate] {
        &self.days
    }

    pub fn day(&self, t: usize) -> NaiveDate {
        self.days[t]
    }

    pub fn month_of(&self, t: usize) -> MonthId {
        self.day_months[t]
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.days.binary_search(&date).ok()
    }

    pub fn first_month(&self) -> Option<MonthId> {
        self.day_months.first().copied()
    }

    pub fn last_month(&self) -> Option<MonthId> {
        self.day_months.last().copied()
    }

    /// Distinct months that contain at least one trading day, in order.
    pub fn months(&self) -> Vec<MonthId> {
        let mut out: Vec<MonthId> = Vec::new();
        for m in &self.day_months {
            if out.last() != Some(m) {
                out.push(*m);
            }
        }
        out
    }

    /// Every month from the first to the last calendar month, including
    /// months without trading days.
    pub fn month_span(&self) -> Vec<MonthId> {
        match (self.first_month(), self.last_month()) {
            (Some(a), Some(b)) => (0..=b.months_since(a)).map(|i| a.offset(i)).collect(),
            _ => Vec::new(),
        }
    }

    /// Day indices whose month lies in `[from, to]` (inclusive).
    pub fn day_range(&self, from: MonthId, to: MonthId) -> Range<usize> {
        let lo = self.day_months.partition_point(|m| *m < from);
        let hi = self.day_months.partition_point(|m| *m <= to);
        lo..hi.max(lo)
    }

    /// Day indices of the `q` calendar months immediately before `end`.
    /// The window must lie inside the calendar's month span.
    pub fn window(&self, end: MonthId, q: u32) -> Result<Range<usize>> {
        let (first, last) = match (self.first_month(), self.last_month()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Invalid("window requested on an empty calendar".into()));
            }
        };
        let start = end.offset(-(q as i32));
        if q == 0 || start < first || end.offset(-1) > last {
            return Err(Error::WindowOutOfRange {
                end,
                q,
                first,
                last,
            });
        }
        Ok(self.day_range(start, end.offset(-1)))
    }

    /// Like [`TradingCalendar::window`] but truncated at the calendar start
    /// instead of failing. Returns an empty range when nothing precedes `end`.
    pub fn window_clamped(&self, end: MonthId, q: u32) -> Range<usize> {
        let Some(first) = self.first_month() else {
            return 0..0;
        };
        let start = end.offset(-(q as i32)).max(first);
        if end.offset(-1) < start {
            return 0..0;
        }
        self.day_range(start, end.offset(-1))
    }

    pub fn slice(&self, range: Range<usize>) -> TradingCalendar {
        TradingCalendar {
            days: self.days[range.clone()].to_vec(),
            day_months: self.day_months[range].to_vec(),
        }
    }
}
