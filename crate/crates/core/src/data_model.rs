//! Raw trip, GPS and label ingestion.
//!
//! Three UTF-8 CSV feeds are joined on bike id into one [`BikeRecord`] per
//! bike over an observation window, then split per class into train and test
//! partitions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::GeoCoord;

pub const TRIPS_HEADER: &str = "bike_id,start_time,end_time,start_lat,start_lon,end_lat,end_lon";
pub const GPS_HEADER: &str = "bike_id,timestamp,lat,lon";
pub const LABELS_HEADER: &str = "bike_id,status";

/// Opaque bike identifier. Never empty and never contains a comma.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BikeId(String);

impl BikeId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::Invalid("bike id is empty".into()));
        }
        if id.contains(',') || id.contains('\n') {
            return Err(Error::Invalid(format!("bike id {id:?} contains a separator")));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for BikeId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<BikeId> for String {
    fn from(id: BikeId) -> String {
        id.0
    }
}

impl fmt::Display for BikeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Operational status of a bike. Serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Status {
    Normal = 0,
    Unusable = 1,
}

impl Status {
    pub const ALL: [Status; 2] = [Status::Normal, Status::Unusable];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Status::Normal),
            1 => Some(Status::Unusable),
            _ => None,
        }
    }
}

impl Serialize for Status {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Status {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Status::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("status {v} not in {{0,1}}")))
    }
}

/// UTC instant with one-second resolution, stored as seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    /// Parses an ISO-8601 / RFC 3339 timestamp. Offsets are converted to UTC;
    /// fractional seconds are rejected.
    pub fn parse(s: &str) -> Option<Self> {
        let dt = DateTime::parse_from_rfc3339(s)
            .map(|d| d.with_timezone(&Utc))
            .ok()
            .or_else(|| {
                NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
                    .ok()
                    .map(|n| n.and_utc())
            })?;
        if dt.timestamp_subsec_nanos() != 0 {
            return None;
        }
        Some(Timestamp(dt.timestamp()))
    }

    pub fn to_iso(self) -> String {
        DateTime::<Utc>::from_timestamp(self.0, 0)
            .expect("timestamp within chrono range")
            .format("%Y-%m-%dT%H:%M:%SZ")
            .to_string()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub bike: BikeId,
    pub start_time: Timestamp,
    pub end_time: Timestamp,
    pub start: GeoCoord,
    pub end: GeoCoord,
}

impl TripRecord {
    pub fn duration_seconds(&self) -> i64 {
        self.end_time.0 - self.start_time.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub bike: BikeId,
    pub timestamp: Timestamp,
    pub coord: GeoCoord,
}

/// Everything observed for one bike inside the observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BikeRecord {
    pub bike: BikeId,
    pub trips: Vec<TripRecord>,
    pub trajectory: Vec<GpsPoint>,
    pub label: Option<Status>,
}

/// Closed interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        if end < start {
            return Err(Error::Invalid(format!("window end {end} precedes start {start}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t <= self.end
    }

    /// Smallest window covering every timestamp in the feeds, or `None` when
    /// both feeds are empty.
    pub fn covering(trips: &[TripRecord], gps: &[GpsPoint]) -> Option<Self> {
        let times = trips
            .iter()
            .flat_map(|t| [t.start_time, t.end_time])
            .chain(gps.iter().map(|p| p.timestamp));
        let (mut lo, mut hi) = (None::<Timestamp>, None::<Timestamp>);
        for t in times {
            lo = Some(lo.map_or(t, |l| l.min(t)));
            hi = Some(hi.map_or(t, |h| h.max(t)));
        }
        Some(Self { start: lo?, end: hi? })
    }
}

/// Bikes dropped during assembly because no GPS point fell inside the window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<BikeId>,
}

impl SkipReport {
    pub fn count(&self) -> usize {
        self.skipped.len()
    }
}

fn open_csv(path: &Path, expected: &str) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let found = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    let found = found.trim_start_matches('\u{feff}').to_string();
    if found != expected {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(reader)
}

struct Row<'a> {
    record: &'a csv::StringRecord,
    line: u64,
    names: &'static [&'static str],
}

impl Row<'_> {
    fn field(&self, idx: usize) -> Result<&str> {
        self.record.get(idx).ok_or_else(|| Error::Parse {
            line: self.line,
            field: self.names[idx].to_string(),
            message: "missing field".into(),
        })
    }

    fn bike(&self, idx: usize) -> Result<BikeId> {
        BikeId::new(self.field(idx)?).map_err(|e| Error::Parse {
            line: self.line,
            field: self.names[idx].to_string(),
            message: e.to_string(),
        })
    }

    fn time(&self, idx: usize) -> Result<Timestamp> {
        let raw = self.field(idx)?;
        Timestamp::parse(raw).ok_or_else(|| Error::Parse {
            line: self.line,
            field: self.names[idx].to_string(),
            message: format!("{raw:?} is not an ISO-8601 UTC timestamp"),
        })
    }

    fn number(&self, idx: usize) -> Result<f64> {
        let raw = self.field(idx)?;
        let v: f64 = raw.parse().map_err(|_| Error::Parse {
            line: self.line,
            field: self.names[idx].to_string(),
            message: format!("{raw:?} is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Range { line: self.line, field: self.names[idx].to_string(), value: v });
        }
        Ok(v)
    }

    fn coord(&self, lat_idx: usize, lon_idx: usize) -> Result<GeoCoord> {
        let lat = self.number(lat_idx)?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Range { line: self.line, field: self.names[lat_idx].to_string(), value: lat });
        }
        let lon = self.number(lon_idx)?;
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Range { line: self.line, field: self.names[lon_idx].to_string(), value: lon });
        }
        Ok(GeoCoord { lat, lon })
    }

    fn expect_len(&self) -> Result<()> {
        if self.record.len() != self.names.len() {
            return Err(Error::Parse {
                line: self.line,
                field: "*".into(),
                message: format!("expected {} fields, found {}", self.names.len(), self.record.len()),
            });
        }
        Ok(())
    }
}

fn for_each_row(
    path: &Path,
    header: &str,
    names: &'static [&'static str],
    mut f: impl FnMut(&Row<'_>) -> Result<()>,
) -> Result<()> {
    let mut reader = open_csv(path, header)?;
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse { line, field: "*".into(), message: e.to_string() }
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let row = Row { record: &record, line, names };
        row.expect_len()?;
        f(&row)?;
    }
    Ok(())
}

const TRIP_FIELDS: &[&str] = &["bike_id", "start_time", "end_time", "start_lat", "start_lon", "end_lat", "end_lon"];
const GPS_FIELDS: &[&str] = &["bike_id", "timestamp", "lat", "lon"];
const LABEL_FIELDS: &[&str] = &["bike_id", "status"];

/// Reads a trips file, preserving row order.
pub fn parse_trips(path: impl AsRef<Path>) -> Result<Vec<TripRecord>> {
    let mut out = Vec::new();
    for_each_row(path.as_ref(), TRIPS_HEADER, TRIP_FIELDS, |row| {
        let bike = row.bike(0)?;
        let start_time = row.time(1)?;
        let end_time = row.time(2)?;
        if end_time < start_time {
            return Err(Error::Parse {
                line: row.line,
                field: "end_time".into(),
                message: format!("end {end_time} precedes start {start_time}"),
            });
        }
        let start = row.coord(3, 4)?;
        let end = row.coord(5, 6)?;
        out.push(TripRecord { bike, start_time, end_time, start, end });
        Ok(())
    })?;
    Ok(out)
}

/// Reads a GPS file, preserving row order.
pub fn parse_gps(path: impl AsRef<Path>) -> Result<Vec<GpsPoint>> {
    let mut out = Vec::new();
    for_each_row(path.as_ref(), GPS_HEADER, GPS_FIELDS, |row| {
        out.push(GpsPoint { bike: row.bike(0)?, timestamp: row.time(1)?, coord: row.coord(2, 3)? });
        Ok(())
    })?;
    Ok(out)
}

/// Reads a labels file. Each bike may appear once.
pub fn parse_labels(path: impl AsRef<Path>) -> Result<Vec<(BikeId, Status)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_row(path.as_ref(), LABELS_HEADER, LABEL_FIELDS, |row| {
        let bike = row.bike(0)?;
        let raw = row.field(1)?;
        let status = match raw {
            "0" => Status::Normal,
            "1" => Status::Unusable,
            other => {
                return Err(Error::Parse {
                    line: row.line,
                    field: "status".into(),
                    message: format!("{other:?} is not 0 or 1"),
                })
            }
        };
        if !seen.insert(bike.clone()) {
            return Err(Error::DuplicateBike(bike.0));
        }
        out.push((bike, status));
        Ok(())
    })?;
    Ok(out)
}

fn fmt_coord(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v}")
}

pub fn write_trips(path: impl AsRef<Path>, trips: &[TripRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRIPS_HEADER}")?;
    for t in trips {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            t.bike,
            t.start_time,
            t.end_time,
            fmt_coord(t.start.lat),
            fmt_coord(t.start.lon),
            fmt_coord(t.end.lat),
            fmt_coord(t.end.lon)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gps(path: impl AsRef<Path>, points: &[GpsPoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{GPS_HEADER}")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.bike, p.timestamp, fmt_coord(p.coord.lat), fmt_coord(p.coord.lon))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[(BikeId, Status)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LABELS_HEADER}")?;
    for (bike, status) in labels {
        writeln!(w, "{},{}", bike, status.as_u8())?;
    }
    w.flush()?;
    Ok(())
}

/// Joins the three feeds on bike id.
///
/// A trip is kept only when it lies entirely inside the window. Bikes are
/// emitted in bike-id order; bikes left without any GPS point are reported in
/// the [`SkipReport`] instead. `window` defaults to the span of the data.
pub fn assemble_records(
    trips: &[TripRecord],
    gps: &[GpsPoint],
    labels: &[(BikeId, Status)],
    window: Option<TimeWindow>,
) -> (Vec<BikeRecord>, SkipReport) {
    let window = window.or_else(|| TimeWindow::covering(trips, gps));
    let label_map: BTreeMap<&BikeId, Status> = labels.iter().map(|(b, s)| (b, *s)).collect();

    let mut by_bike: BTreeMap<&BikeId, (Vec<TripRecord>, Vec<GpsPoint>)> = BTreeMap::new();
    for t in trips {
        let entry = by_bike.entry(&t.bike).or_default();
        if window.is_some_and(|w| w.contains(t.start_time) && w.contains(t.end_time)) {
            entry.0.push(t.clone());
        }
    }
    for p in gps {
        let entry = by_bike.entry(&p.bike).or_default();
        if window.is_some_and(|w| w.contains(p.timestamp)) {
            entry.1.push(p.clone());
        }
    }

    let mut records = Vec::with_capacity(by_bike.len());
    let mut skipped: BTreeSet<BikeId> = label_map
        .keys()
        .filter(|b| !by_bike.contains_key(*b))
        .map(|b| (*b).clone())
        .collect();
    for (bike, (mut trips, mut trajectory)) in by_bike {
        if trajectory.is_empty() {
            skipped.insert(bike.clone());
            continue;
        }
        // Stable sorts keep file order among equal timestamps.
        trips.sort_by_key(|t| t.start_time);
        trajectory.sort_by_key(|p| p.timestamp);
        records.push(BikeRecord {
            bike: bike.clone(),
            trips,
            trajectory,
            label: label_map.get(bike).copied(),
        });
    }
    (records, SkipReport { skipped: skipped.into_iter().collect() })
}

/// Number of records class `n_c` contributes to the training side.
pub fn train_count(n_c: usize, ratio: f64) -> usize {
    // The small slack absorbs representation error such as 8860 * 0.8.
    ((n_c as f64) * ratio + 1e-9).floor() as usize
}

/// Per-class seeded split: each class contributes `floor(n_c * ratio)` records
/// to train. Both outputs keep input order.
pub fn stratified_split(
    records: &[BikeRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<BikeRecord>, Vec<BikeRecord>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| Error::Invalid(format!("bike {} has no label; cannot stratify", r.bike)))?;
        by_class[label.index()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    for (class, idx) in Status::ALL.iter().zip(by_class.iter_mut()) {
        if idx.is_empty() {
            return Err(Error::Invalid(format!("class {class:?} has no records")));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..train_count(idx.len(), ratio)] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(r, _)| r.clone()).collect(),
        test.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}
