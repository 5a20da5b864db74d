//! UTC timestamps with millisecond precision, times of day, and the
//! injectable clock.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::HgError;

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

/// A UTC instant truncated to whole milliseconds.
///
/// Serialized as `2024-01-15T09:30:00.000Z`. Parsing accepts any RFC 3339
/// offset and normalizes to UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub fn from_millis(ms: i64) -> Self {
        Self(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Self(dt.timestamp_millis())
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_millis_opt(self.0)
            .single()
            .expect("timestamp in chrono range")
    }

    pub fn date(self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    /// Midnight UTC of `date`.
    pub fn start_of(date: NaiveDate) -> Self {
        Self::at(date, TimeOfDay::MIDNIGHT)
    }

    pub fn at(date: NaiveDate, tod: TimeOfDay) -> Self {
        let base = date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
        Self(base.timestamp_millis() + i64::from(tod.seconds()) * 1000)
    }

    pub fn plus_secs_f64(self, secs: f64) -> Self {
        Self(self.0 + (secs * 1000.0).round() as i64)
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Self(self.0 + ms)
    }

    pub fn plus(self, d: Duration) -> Self {
        Self(self.0 + d.num_milliseconds())
    }

    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format(TS_FORMAT))
    }
}

impl FromStr for Timestamp {
    type Err = HgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dt = DateTime::parse_from_rfc3339(s)
            .map_err(|e| HgError::validation(format!("bad timestamp {s:?}: {e}")))?;
        Ok(Self::from_datetime(dt.with_timezone(&Utc)))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Time of day in UTC, second resolution. Serialized `HH:MM` when the
/// seconds are zero, `HH:MM:SS` otherwise. `24:00` is accepted as end of day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub const MIDNIGHT: TimeOfDay = TimeOfDay(0);
    pub const END_OF_DAY: TimeOfDay = TimeOfDay(86_400);

    pub fn hms(h: u32, m: u32, s: u32) -> Option<Self> {
        let total = h * 3600 + m * 60 + s;
        (m < 60 && s < 60 && total <= 86_400).then_some(Self(total))
    }

    pub fn seconds(self) -> u32 {
        self.0
    }

    pub fn of(ts: Timestamp) -> Self {
        Self(ts.to_datetime().time().num_seconds_from_midnight())
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, m, s) = (self.0 / 3600, self.0 / 60 % 60, self.0 % 60);
        if s == 0 {
            write!(f, "{h:02}:{m:02}")
        } else {
            write!(f, "{h:02}:{m:02}:{s:02}")
        }
    }
}

impl FromStr for TimeOfDay {
    type Err = HgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "24:00" || s == "24:00:00" {
            return Ok(Self::END_OF_DAY);
        }
        let parsed = NaiveTime::parse_from_str(s, "%H:%M:%S")
            .or_else(|_| NaiveTime::parse_from_str(s, "%H:%M"))
            .map_err(|_| HgError::validation(format!("bad time of day {s:?}")))?;
        Ok(Self(parsed.num_seconds_from_midnight()))
    }
}

impl Serialize for TimeOfDay {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeOfDay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Source of "now". Everything time-dependent takes one of these.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_datetime(Utc::now())
    }
}

/// A clock that only moves when told to. Clones share the same time.
#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<Timestamp>>);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Arc::new(Mutex::new(start)))
    }

    pub fn set(&self, ts: Timestamp) {
        *self.0.lock().unwrap() = ts;
    }

    pub fn advance_millis(&self, ms: i64) {
        let mut now = self.0.lock().unwrap();
        *now = now.plus_millis(ms);
    }

    pub fn advance_secs(&self, secs: f64) {
        self.advance_millis((secs * 1000.0).round() as i64);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.0.lock().unwrap()
    }
}
