//! Labeled synthetic fleets.
//!
//! Normal bikes ride often and far along smooth paths. Faulty bikes ride
//! rarely, take short hops, leave jittery point clusters around trip ends and
//! back-and-forth stubs inside trips, and are parked mostly in the outer rings
//! of the service area. Every bike draws from its own seeded stream, and normal
//! bikes never consult the fragmentation setting.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_model::{write_gps, write_labels, write_trips, BikeId, GpsPoint, Status, Timestamp, TripRecord};
use crate::error::{Error, Result};
use crate::features::{haversine_km, GeoCoord};
use crate::rng::stream;

pub const MAX_TRIPS: u64 = 20;
const KM_PER_DEG_LAT: f64 = 111.195;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, c: GeoCoord) -> bool {
        (self.lat_min..=self.lat_max).contains(&c.lat) && (self.lon_min..=self.lon_max).contains(&c.lon)
    }

    fn center(&self) -> GeoCoord {
        GeoCoord { lat: (self.lat_min + self.lat_max) / 2.0, lon: (self.lon_min + self.lon_max) / 2.0 }
    }

    fn clamp(&self, c: GeoCoord) -> GeoCoord {
        GeoCoord { lat: c.lat.clamp(self.lat_min, self.lat_max), lon: c.lon.clamp(self.lon_min, self.lon_max) }
    }

    fn km_per_deg_lon(&self) -> f64 {
        KM_PER_DEG_LAT * self.center().lat.to_radians().cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_bikes: usize,
    pub faulty_fraction: f64,
    pub days: u32,
    pub window_start: Timestamp,
    /// Expected trips per window for normal bikes.
    pub lambda_normal: f64,
    /// Expected trips per window for faulty bikes.
    pub lambda_faulty: f64,
    /// Strength of faulty trajectory artifacts, in `[0, 1]`.
    pub fragmentation: f64,
    pub bbox: BoundingBox,
    /// Probability that a faulty bike is parked in the inner, middle or outer ring.
    pub faulty_ring_weights: [f64; 3],
    pub gps_period_s: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::easy()
    }
}

impl SynthConfig {
    /// Well separated classes.
    pub fn easy() -> Self {
        Self {
            n_bikes: 2000,
            faulty_fraction: 0.15,
            days: 3,
            window_start: Timestamp::parse("2021-09-11T00:00:00Z").expect("valid literal"),
            lambda_normal: 8.0,
            lambda_faulty: 2.0,
            fragmentation: 0.8,
            bbox: BoundingBox { lat_min: 30.55, lat_max: 30.80, lon_min: 103.95, lon_max: 104.20 },
            faulty_ring_weights: [0.1, 0.3, 0.6],
            gps_period_s: 60,
            seed: 42,
        }
    }

    /// Overlapping classes: close trip rates, faint artifacts, weak spatial bias.
    pub fn hard() -> Self {
        Self {
            lambda_normal: 6.0,
            lambda_faulty: 3.0,
            fragmentation: 0.35,
            faulty_ring_weights: [0.2, 0.3, 0.5],
            ..Self::easy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("synth.{m}")));
        if self.n_bikes == 0 {
            return err("n_bikes: must be at least 1".into());
        }
        if !(self.faulty_fraction > 0.0 && self.faulty_fraction < 1.0) {
            return err(format!("faulty_fraction: {} not in (0, 1)", self.faulty_fraction));
        }
        if self.days == 0 {
            return err("days: must be at least 1".into());
        }
        for (name, v) in [("lambda_normal", self.lambda_normal), ("lambda_faulty", self.lambda_faulty)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name}: {v} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.fragmentation) {
            return err(format!("fragmentation: {} not in [0, 1]", self.fragmentation));
        }
        let b = &self.bbox;
        let valid = b.lat_min < b.lat_max
            && b.lon_min < b.lon_max
            && GeoCoord { lat: b.lat_min, lon: b.lon_min }.is_valid()
            && GeoCoord { lat: b.lat_max, lon: b.lon_max }.is_valid();
        if !valid {
            return err(format!("bbox: {b:?} is not a valid box"));
        }
        let w = self.faulty_ring_weights;
        if w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return err(format!("faulty_ring_weights: {w:?} must be non-negative with a positive sum"));
        }
        if self.gps_period_s == 0 {
            return err("gps_period_s: must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_faulty(&self) -> usize {
        (self.n_bikes as f64 * self.faulty_fraction + 1e-9).floor() as usize
    }

    pub fn window_end(&self) -> Timestamp {
        Timestamp(self.window_start.0 + i64::from(self.days) * 86_400)
    }
}

/// Per-class empirical statistics of a generated fleet.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub bikes: usize,
    pub mean_trips: f64,
    pub mean_gps_points: f64,
    pub mean_trip_minutes: f64,
    pub mean_jitter_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub normal: ClassStats,
    pub faulty: ClassStats,
    pub trips: usize,
    pub gps_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub trips: Vec<TripRecord>,
    pub gps: Vec<GpsPoint>,
    pub labels: Vec<(BikeId, Status)>,
    pub manifest: Manifest,
}

struct Bike {
    trips: Vec<TripRecord>,
    gps: Vec<GpsPoint>,
}

fn round6(c: GeoCoord) -> GeoCoord {
    GeoCoord { lat: (c.lat * 1e6).round() / 1e6, lon: (c.lon * 1e6).round() / 1e6 }
}

/// Mean distance in km between each interior point and the midpoint of its
/// two neighbours. Zero for straight, evenly spaced tracks.
pub fn jitter_magnitude(points: &[GpsPoint]) -> Option<f64> {
    if points.len() < 3 {
        return None;
    }
    let total: f64 = points
        .windows(3)
        .map(|w| {
            let mid = GeoCoord {
                lat: (w[0].coord.lat + w[2].coord.lat) / 2.0,
                lon: (w[0].coord.lon + w[2].coord.lon) / 2.0,
            };
            haversine_km(w[1].coord, mid)
        })
        .sum();
    Some(total / (points.len() - 2) as f64)
}

struct Geo {
    bbox: BoundingBox,
    kx: f64,
}

impl Geo {
    /// Offset `c` by `(east_km, north_km)`, staying inside the box.
    fn shift(&self, c: GeoCoord, east_km: f64, north_km: f64) -> GeoCoord {
        self.bbox.clamp(GeoCoord { lat: c.lat + north_km / KM_PER_DEG_LAT, lon: c.lon + east_km / self.kx })
    }

    /// Parking spot in ring `ring` (0 inner .. 2 outer) of the ellipse inscribed in the box.
    fn in_ring(&self, ring: usize, rng: &mut ChaCha8Rng) -> GeoCoord {
        let (r0, r1) = (ring as f64 / 3.0, (ring + 1) as f64 / 3.0);
        // Uniform over the annulus area.
        let r = (r0 * r0 + rng.random::<f64>() * (r1 * r1 - r0 * r0)).sqrt();
        let a = rng.random::<f64>() * 2.0 * PI;
        let c = self.bbox.center();
        let half_lat = (self.bbox.lat_max - self.bbox.lat_min) / 2.0;
        let half_lon = (self.bbox.lon_max - self.bbox.lon_min) / 2.0;
        self.bbox.clamp(GeoCoord { lat: c.lat + r * a.sin() * half_lat, lon: c.lon + r * a.cos() * half_lon })
    }
}

fn pick_ring(weights: [f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    2
}

fn trip_count(lambda: f64, rng: &mut ChaCha8Rng) -> usize {
    let p = Poisson::new(lambda).expect("validated rate");
    // Conditioned on the [0, MAX_TRIPS] range by rejection.
    loop {
        let k = p.sample(rng) as u64;
        if k <= MAX_TRIPS {
            return k as usize;
        }
    }
}

fn make_bike(cfg: &SynthConfig, geo: &Geo, id: &BikeId, faulty: bool, rng: &mut ChaCha8Rng) -> Bike {
    let start = cfg.window_start.0;
    let end = cfg.window_end().0;
    let period = i64::from(cfg.gps_period_s);
    let frag = if faulty { cfg.fragmentation } else { 0.0 };
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let ring = if faulty { pick_ring(cfg.faulty_ring_weights, rng) } else { pick_ring([1.0, 3.0, 5.0], rng) };
    let mut here = geo.in_ring(ring, rng);
    let n_trips = trip_count(if faulty { cfg.lambda_faulty } else { cfg.lambda_normal }, rng);

    let point = |t: i64, c: GeoCoord| GpsPoint { bike: id.clone(), timestamp: Timestamp(t), coord: round6(c) };
    let mut gps = vec![point(start, here)];
    let mut trips = Vec::with_capacity(n_trips);
    let slot = (end - start) / (n_trips as i64 + 1);

    for k in 0..n_trips {
        let dist = if faulty {
            rng.random_range(1.5..5.0) * (1.0 - 0.75 * frag)
        } else {
            rng.random_range(1.5..5.0)
        };
        let speed_kmh = rng.random_range(9.0..15.0);
        let duration = ((dist / speed_kmh * 3600.0) as i64).max(period).min(slot / 2).max(1);
        let t0 = start + slot * (k as i64 + 1) - rng.random_range(0..slot / 3);
        let t1 = (t0 + duration).min(end - 1);
        let heading = rng.random::<f64>() * 2.0 * PI;
        let to = geo.shift(here, dist * heading.cos(), dist * heading.sin());
        // Gentle lateral bow, same sign for the whole trip.
        let bow = rng.random_range(-0.15..0.15) * dist;
        let steps = ((t1 - t0) / period).max(1);
        let stub_at = if rng.random::<f64>() < frag { Some(rng.random_range(0..steps)) } else { None };
        let cluster = (6.0 * frag).round() as i64;

        let (mut east, mut north) = (
            (to.lon - here.lon) * geo.kx,
            (to.lat - here.lat) * KM_PER_DEG_LAT,
        );
        if east == 0.0 && north == 0.0 {
            east = 1e-9;
            north = 1e-9;
        }
        let len = (east * east + north * north).sqrt();
        let (px, py) = (-north / len, east / len);
        let from = here;
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let lateral = bow * (PI * f).sin();
            let mut dx = east * f + px * lateral + 0.004 * unit.sample(rng);
            let mut dy = north * f + py * lateral + 0.004 * unit.sample(rng);
            let near_end = s < cluster || s > steps - cluster;
            if near_end && frag > 0.0 {
                dx += 0.1 * frag * unit.sample(rng);
                dy += 0.1 * frag * unit.sample(rng);
            }
            let t = t0 + (t1 - t0) * s / steps;
            gps.push(point(t, geo.shift(from, dx, dy)));
            if stub_at == Some(s) && s < steps {
                // Short out-and-back segment recorded between two regular fixes.
                let back = geo.shift(from, dx + 0.3 * frag * px, dy + 0.3 * frag * py);
                let tm = t + period / 2;
                gps.push(point(tm, back));
            }
        }
        here = round6(to);
        trips.push(TripRecord {
            bike: id.clone(),
            start_time: Timestamp(t0),
            end_time: Timestamp(t1),
            start: round6(from),
            end: here,
        });
    }
    gps.push(point(end, here));
    gps.dedup_by_key(|p| p.timestamp);
    Bike { trips, gps }
}

/// Generates the fleet in memory. Bikes are emitted in index order.
pub fn generate_fleet(cfg: &SynthConfig) -> Result<Fleet> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.n_bikes).collect();
    order.shuffle(&mut stream(cfg.seed, &[0]));
    let mut faulty = vec![false; cfg.n_bikes];
    for &i in &order[..cfg.n_faulty()] {
        faulty[i] = true;
    }
    let geo = Geo { bbox: cfg.bbox, kx: cfg.bbox.km_per_deg_lon() };
    let width = cfg.n_bikes.to_string().len().max(5);

    let (mut trips, mut gps, mut labels) = (Vec::new(), Vec::new(), Vec::with_capacity(cfg.n_bikes));
    let mut acc = [Accumulator::default(), Accumulator::default()];
    for (i, &is_faulty) in faulty.iter().enumerate() {
        let id = BikeId::new(format!("B{i:0width$}"))?;
        let bike = make_bike(cfg, &geo, &id, is_faulty, &mut stream(cfg.seed, &[1, i as u64]));
        acc[usize::from(is_faulty)].add(&bike);
        let status = if is_faulty { Status::Unusable } else { Status::Normal };
        labels.push((id, status));
        trips.extend(bike.trips);
        gps.extend(bike.gps);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        normal: acc[0].finish(),
        faulty: acc[1].finish(),
        trips: trips.len(),
        gps_points: gps.len(),
    };
    Ok(Fleet { trips, gps, labels, manifest })
}

#[derive(Default)]
struct Accumulator {
    bikes: usize,
    trips: usize,
    points: usize,
    minutes: f64,
    jitter: f64,
    jitter_n: usize,
}

impl Accumulator {
    fn add(&mut self, b: &Bike) {
        self.bikes += 1;
        self.trips += b.trips.len();
        self.points += b.gps.len();
        self.minutes += b.trips.iter().map(|t| t.duration_seconds() as f64 / 60.0).sum::<f64>();
        if let Some(j) = jitter_magnitude(&b.gps) {
            self.jitter += j;
            self.jitter_n += 1;
        }
    }

    fn finish(&self) -> ClassStats {
        let per = |v: f64| if self.bikes == 0 { 0.0 } else { v / self.bikes as f64 };
        ClassStats {
            bikes: self.bikes,
            mean_trips: per(self.trips as f64),
            mean_gps_points: per(self.points as f64),
            mean_trip_minutes: if self.trips == 0 { 0.0 } else { self.minutes / self.trips as f64 },
            mean_jitter_km: if self.jitter_n == 0 { 0.0 } else { self.jitter / self.jitter_n as f64 },
        }
    }
}

pub const TRIPS_FILE: &str = "trips.csv";
pub const GPS_FILE: &str = "gps.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Fleet {
    /// Writes `trips.csv`, `gps.csv`, `labels.csv` and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_trips(dir.join(TRIPS_FILE), &self.trips)?;
        write_gps(dir.join(GPS_FILE), &self.gps)?;
        write_labels(dir.join(LABELS_FILE), &self.labels)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }
}
