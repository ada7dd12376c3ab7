use crate::error::{Error, Result};
use chrono::{DateTime, Datelike, TimeZone, Timelike, Utc};

/// A UTC instant with 1-second precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStamp(i64);

impl TimeStamp {
    pub fn from_epoch_seconds(secs: i64) -> TimeStamp {
        TimeStamp(secs)
    }

    pub fn epoch_seconds(&self) -> i64 {
        self.0
    }

    /// Accepts `2023-03-20T12:07Z`, `2023-03-20T12:07:00Z`, and RFC 3339.
    pub fn parse(s: &str) -> Result<TimeStamp> {
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(TimeStamp(dt.timestamp()));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%MZ"] {
            if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(TimeStamp(naive.and_utc().timestamp()));
            }
        }
        Err(Error::Time(format!("cannot parse timestamp '{s}'")))
    }

    fn utc(&self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.0, 0).single().expect("valid epoch seconds")
    }

    /// Day of year in the proleptic Gregorian calendar, 1-366.
    pub fn day_of_year(&self) -> u32 {
        self.utc().ordinal()
    }

    /// UTC hour of day including minutes and seconds, in [0, 24).
    pub fn fractional_hour(&self) -> f64 {
        let dt = self.utc();
        dt.hour() as f64 + dt.minute() as f64 / 60.0 + dt.second() as f64 / 3600.0
    }

    pub fn add_hours(&self, hours: i64) -> TimeStamp {
        TimeStamp(self.0 + hours * 3600)
    }

    pub fn to_rfc3339(&self) -> String {
        self.utc().format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }
}

impl std::fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_rfc3339())
    }
}
