//! Ping parsing, validation, time localization, and per-device partitioning.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, TimeZone, Timelike, Utc, Weekday};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// One raw GPS record.
#[derive(Debug, Clone, PartialEq)]
pub struct Ping {
    pub device_id: String,
    pub location: GeoPoint,
    pub timestamp_utc: i64,
}

/// The study window plus the timezone all wall-clock rules run in.
#[derive(Debug, Clone)]
pub struct ObservationWindow {
    pub start_utc: i64,
    pub end_utc: i64,
    pub tz: Tz,
    pub weekday_count: u32,
}

impl ObservationWindow {
    pub fn new(start_utc: i64, end_utc: i64, timezone_id: &str) -> Result<Self> {
        if start_utc >= end_utc {
            return Err(Error::Config(format!(
                "window start {start_utc} must precede end {end_utc}"
            )));
        }
        let tz = Tz::from_str(timezone_id)
            .map_err(|_| Error::UnknownTimezone(timezone_id.to_string()))?;
        let weekday_count = count_weekdays(start_utc, end_utc, tz);
        Ok(ObservationWindow { start_utc, end_utc, tz, weekday_count })
    }

    /// Build a window from local calendar dates, inclusive on both ends.
    pub fn from_local_dates(start: NaiveDate, end: NaiveDate, timezone_id: &str) -> Result<Self> {
        let tz = Tz::from_str(timezone_id)
            .map_err(|_| Error::UnknownTimezone(timezone_id.to_string()))?;
        let start_utc = tz
            .from_local_datetime(&start.and_hms_opt(0, 0, 0).unwrap())
            .earliest()
            .ok_or_else(|| Error::Config(format!("ambiguous local start {start}")))?
            .timestamp();
        let end_utc = tz
            .from_local_datetime(&end.succ_opt().unwrap().and_hms_opt(0, 0, 0).unwrap())
            .earliest()
            .ok_or_else(|| Error::Config(format!("ambiguous local end {end}")))?
            .timestamp()
            - 1;
        Self::new(start_utc, end_utc, timezone_id)
    }

    pub fn contains(&self, ts: i64) -> bool {
        ts >= self.start_utc && ts <= self.end_utc
    }
}

/// Local calendar weekdays (Mon-Fri) whose dates intersect the window.
fn count_weekdays(start_utc: i64, end_utc: i64, tz: Tz) -> u32 {
    let start_date = local_datetime(start_utc, tz).date_naive();
    let end_date = local_datetime(end_utc, tz).date_naive();
    let mut count = 0;
    let mut d = start_date;
    while d <= end_date {
        if is_weekday(d.weekday()) {
            count += 1;
        }
        d = d.succ_opt().unwrap();
    }
    count
}

fn is_weekday(w: Weekday) -> bool {
    !matches!(w, Weekday::Sat | Weekday::Sun)
}

fn local_datetime(ts: i64, tz: Tz) -> DateTime<Tz> {
    Utc.timestamp_opt(ts, 0).unwrap().with_timezone(&tz)
}

/// Civil wall-clock view of a UTC instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalInstant {
    pub date: NaiveDate,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
    pub is_weekday: bool,
}

impl LocalInstant {
    /// Seconds since local midnight.
    pub fn seconds_of_day(&self) -> i64 {
        (self.hour as i64) * 3600 + (self.minute as i64) * 60 + self.second as i64
    }
}

pub fn to_local(timestamp_utc: i64, window: &ObservationWindow) -> LocalInstant {
    let dt = local_datetime(timestamp_utc, window.tz);
    LocalInstant {
        date: dt.date_naive(),
        hour: dt.hour(),
        minute: dt.minute(),
        second: dt.second(),
        is_weekday: is_weekday(dt.weekday()),
    }
}

/// CSV schema knobs; defaults match the documented input contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub delimiter: char,
    pub device_col: String,
    pub lat_col: String,
    pub lon_col: String,
    pub ts_col: String,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            delimiter: ',',
            device_col: "device_id".into(),
            lat_col: "latitude".into(),
            lon_col: "longitude".into(),
            ts_col: "timestamp".into(),
        }
    }
}

/// Per-reason rejection counts. Accepted + total rejected = input rows.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionReport {
    pub accepted: u64,
    pub malformed_row: u64,
    pub coordinate_out_of_range: u64,
    pub bad_timestamp: u64,
    pub outside_window: u64,
    pub duplicate: u64,
}

impl RejectionReport {
    pub fn rejected(&self) -> u64 {
        self.malformed_row
            + self.coordinate_out_of_range
            + self.bad_timestamp
            + self.outside_window
            + self.duplicate
    }
}

pub type Trajectories = BTreeMap<String, Vec<Ping>>;

/// Parse a headered ping CSV (gzip supported by `.gz` extension) into
/// per-device time-sorted trajectories plus a rejection report.
pub fn parse_pings_file(
    path: &Path,
    schema: &SchemaConfig,
    window: &ObservationWindow,
) -> Result<(Trajectories, RejectionReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_pings(reader, schema, window).map_err(|e| match e {
        Error::Csv { source, .. } => Error::Csv { path: path.display().to_string(), source },
        other => other,
    })
}

pub fn parse_pings(
    reader: impl Read,
    schema: &SchemaConfig,
    window: &ObservationWindow,
) -> Result<(Trajectories, RejectionReport)> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(reader);

    let headers = csv_reader
        .headers()
        .map_err(|e| Error::Csv { path: "<input>".into(), source: e })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let device_idx = col(&schema.device_col)?;
    let lat_idx = col(&schema.lat_col)?;
    let lon_idx = col(&schema.lon_col)?;
    let ts_idx = col(&schema.ts_col)?;

    let mut report = RejectionReport::default();
    let mut trajectories: Trajectories = BTreeMap::new();

    for record in csv_reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                report.malformed_row += 1;
                continue;
            }
        };
        let fields = (
            record.get(device_idx),
            record.get(lat_idx).and_then(|s| s.trim().parse::<f64>().ok()),
            record.get(lon_idx).and_then(|s| s.trim().parse::<f64>().ok()),
            record.get(ts_idx),
        );
        let (Some(device), Some(lat), Some(lon), Some(ts_str)) = fields else {
            report.malformed_row += 1;
            continue;
        };
        if device.is_empty() {
            report.malformed_row += 1;
            continue;
        }
        let Ok(ts) = ts_str.trim().parse::<i64>() else {
            report.bad_timestamp += 1;
            continue;
        };
        let Ok(location) = GeoPoint::new(lat, lon) else {
            report.coordinate_out_of_range += 1;
            continue;
        };
        if !window.contains(ts) {
            report.outside_window += 1;
            continue;
        }
        report.accepted += 1;
        trajectories.entry(device.to_string()).or_default().push(Ping {
            device_id: device.to_string(),
            location,
            timestamp_utc: ts,
        });
    }

    for pings in trajectories.values_mut() {
        pings.sort_by(|a, b| {
            a.timestamp_utc
                .cmp(&b.timestamp_utc)
                .then(a.location.lat.total_cmp(&b.location.lat))
                .then(a.location.lon.total_cmp(&b.location.lon))
        });
        let before = pings.len();
        pings.dedup_by(|a, b| {
            a.timestamp_utc == b.timestamp_utc
                && a.location.lat == b.location.lat
                && a.location.lon == b.location.lon
        });
        let dropped = (before - pings.len()) as u64;
        report.duplicate += dropped;
        report.accepted -= dropped;
    }
    trajectories.retain(|_, v| !v.is_empty());

    Ok((trajectories, report))
}
