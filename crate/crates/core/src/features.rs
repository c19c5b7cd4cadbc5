//! Spatiotemporal feature construction.
//!
//! Each bike becomes a `T x 5` block: the resampled trajectory (lat, lon)
//! followed by three per-window aggregates (cumulative distance, trip count,
//! total riding time) broadcast along the time axis. Channels are z-scored
//! with statistics fitted on the training split only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{BikeId, BikeRecord, GpsPoint, Status};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const N_CHANNELS: usize = 5;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["lat", "lon", "cum_distance_km", "trip_count", "total_time_min"];
pub const DEFAULT_T_STEPS: usize = 64;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoord {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // Symmetric in (a, b) term by term except for the product order of the
    // cosines, which is commutative in IEEE arithmetic.
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Time-uniform linear interpolation of a trajectory to `t_steps` rows of
/// `[lat, lon]`. Row `k` samples time `t0 + k (t1 - t0) / (T - 1)`.
pub fn resample_trajectory(points: &[GpsPoint], t_steps: usize) -> Result<Vec<[f64; 2]>> {
    if t_steps == 0 {
        return Err(Error::Config("t_steps must be at least 1".into()));
    }
    let first = points
        .first()
        .ok_or_else(|| Error::Invalid("cannot resample an empty trajectory".into()))?;
    let last = points.last().expect("nonempty");
    let as_row = |p: &GpsPoint| [p.coord.lat, p.coord.lon];
    let t0 = first.timestamp.seconds();
    let t1 = last.timestamp.seconds();
    if points.len() == 1 || t_steps == 1 || t1 == t0 {
        return Ok(vec![as_row(first); t_steps]);
    }

    let span = (t1 - t0) as f64;
    let mut out = Vec::with_capacity(t_steps);
    let mut seg = 0usize;
    for k in 0..t_steps {
        if k == t_steps - 1 {
            out.push(as_row(last));
            break;
        }
        let tau = t0 as f64 + k as f64 * span / (t_steps - 1) as f64;
        // Advance to the first segment whose right end reaches tau.
        while seg + 1 < points.len() - 1 && (points[seg + 1].timestamp.seconds() as f64) < tau {
            seg += 1;
        }
        let (a, b) = (&points[seg], &points[seg + 1]);
        let (ta, tb) = (a.timestamp.seconds() as f64, b.timestamp.seconds() as f64);
        if tb <= ta {
            out.push(as_row(b));
            continue;
        }
        let w = ((tau - ta) / (tb - ta)).clamp(0.0, 1.0);
        out.push([
            a.coord.lat + w * (b.coord.lat - a.coord.lat),
            a.coord.lon + w * (b.coord.lon - a.coord.lon),
        ]);
    }
    Ok(out)
}

/// Per-window scalar features of one bike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateFeatures {
    pub cum_distance_km: f64,
    pub trip_count: usize,
    pub total_time_min: f64,
}

/// Distance is the GPS arc length; count and time come from trip rows.
pub fn compute_aggregates(record: &BikeRecord) -> AggregateFeatures {
    let cum_distance_km = record
        .trajectory
        .windows(2)
        .map(|w| haversine_km(w[0].coord, w[1].coord))
        .sum();
    let total_time_min = record
        .trips
        .iter()
        .map(|t| t.duration_seconds() as f64 / 60.0)
        .sum();
    AggregateFeatures { cum_distance_km, trip_count: record.trips.len(), total_time_min }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl NormStats {
    pub fn apply(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }
}

/// Unstandardized `n x t x 5` feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub n: usize,
    pub t: usize,
    pub values: Vec<f64>,
}

/// Population mean / std per channel over every `(n, t)` cell.
pub fn fit_normalizer(raw: &RawFeatures) -> Result<NormStats> {
    let cells = raw.n * raw.t;
    if cells == 0 || raw.values.len() != cells * N_CHANNELS {
        return Err(Error::Invalid("cannot fit normalizer on an empty training set".into()));
    }
    let mut mean = [0.0; N_CHANNELS];
    for row in raw.values.chunks_exact(N_CHANNELS) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= cells as f64);
    let mut var = [0.0; N_CHANNELS];
    for row in raw.values.chunks_exact(N_CHANNELS) {
        for c in 0..N_CHANNELS {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let std = var.map(|v| (v / cells as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// Where the standardization statistics come from.
#[derive(Debug, Clone)]
pub enum Normalization<'a> {
    Fit,
    Use(&'a NormStats),
}

/// Model input: standardized `n x t x 5` values plus per-bike labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub n: usize,
    pub t: usize,
    pub values: Vec<f32>,
    pub labels: Vec<Option<Status>>,
    pub bike_ids: Vec<BikeId>,
    pub norm: NormStats,
}

impl FeatureTensor {
    pub const D: usize = N_CHANNELS;

    pub fn d(&self) -> usize {
        N_CHANNELS
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.t * N_CHANNELS;
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// Labels of every sample, failing if any is missing.
    pub fn require_labels(&self) -> Result<Vec<Status>> {
        self.labels
            .iter()
            .zip(&self.bike_ids)
            .map(|(l, b)| l.ok_or_else(|| Error::Invalid(format!("bike {b} is unlabeled"))))
            .collect()
    }

    /// Copy of the samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureTensor {
        let mut values = Vec::with_capacity(idx.len() * self.t * N_CHANNELS);
        for &i in idx {
            values.extend_from_slice(self.sample(i));
        }
        FeatureTensor {
            n: idx.len(),
            t: self.t,
            values,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            bike_ids: idx.iter().map(|&i| self.bike_ids[i].clone()).collect(),
            norm: self.norm.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = TensorMeta {
            n: self.n,
            t: self.t,
            d: N_CHANNELS,
            channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
            norm: self.norm.clone(),
            bike_ids: self.bike_ids.clone(),
            labeled: self.labels.iter().filter(|l| l.is_some()).count(),
        };
        let mut data = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let labels: Vec<u8> = self.labels.iter().map(|l| l.map_or(255, Status::as_u8)).collect();
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        fs::write(dir.join("data.bin"), data)?;
        fs::write(dir.join("labels.bin"), labels)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path));
        }
        let meta: TensorMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        let corrupt = |message: String| Error::Corrupt { path: dir.to_path_buf(), message };
        if meta.d != N_CHANNELS || meta.channels != CHANNEL_NAMES {
            return Err(corrupt(format!("unexpected channel layout {:?}", meta.channels)));
        }
        if meta.bike_ids.len() != meta.n {
            return Err(corrupt(format!("{} bike ids for n = {}", meta.bike_ids.len(), meta.n)));
        }
        let data = fs::read(dir.join("data.bin"))?;
        let expected = meta.n * meta.t * N_CHANNELS * 4;
        if data.len() != expected {
            return Err(corrupt(format!("data.bin holds {} bytes, expected {expected}", data.len())));
        }
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("data.bin contains non-finite values".into()));
        }
        let raw_labels = fs::read(dir.join("labels.bin"))?;
        if raw_labels.len() != meta.n {
            return Err(corrupt(format!("labels.bin holds {} entries, expected {}", raw_labels.len(), meta.n)));
        }
        let labels = raw_labels
            .iter()
            .map(|&b| match b {
                255 => Ok(None),
                v => Status::from_u8(v).map(Some).ok_or_else(|| corrupt(format!("label byte {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureTensor { n: meta.n, t: meta.t, values, labels, bike_ids: meta.bike_ids, norm: meta.norm })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    n: usize,
    t: usize,
    d: usize,
    channels: Vec<String>,
    norm: NormStats,
    bike_ids: Vec<BikeId>,
    labeled: usize,
}

/// Longest trajectory among `records`, capped at `cap`.
pub fn observed_max_steps(records: &[BikeRecord], cap: usize) -> usize {
    records
        .iter()
        .map(|r| r.trajectory.len())
        .max()
        .unwrap_or(1)
        .clamp(1, cap.max(1))
}

/// Unstandardized features of every record, in input order.
pub fn raw_features(records: &[BikeRecord], t_steps: usize) -> Result<RawFeatures> {
    if t_steps == 0 {
        return Err(Error::Config("t_steps must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(records.len() * t_steps * N_CHANNELS);
    for r in records {
        let track = resample_trajectory(&r.trajectory, t_steps)
            .map_err(|e| Error::Invalid(format!("bike {}: {e}", r.bike)))?;
        let agg = compute_aggregates(r);
        for [lat, lon] in track {
            values.extend_from_slice(&[lat, lon, agg.cum_distance_km, agg.trip_count as f64, agg.total_time_min]);
        }
    }
    Ok(RawFeatures { n: records.len(), t: t_steps, values })
}

/// Builds the model tensor. With [`Normalization::Fit`] the statistics are
/// fitted on `records` themselves and returned alongside the tensor.
pub fn build_dataset(records: &[BikeRecord], norm: Normalization<'_>, t_steps: usize) -> Result<(FeatureTensor, NormStats)> {
    let raw = raw_features(records, t_steps)?;
    let stats = match norm {
        Normalization::Fit => fit_normalizer(&raw)?,
        Normalization::Use(s) => s.clone(),
    };
    let mut values = Vec::with_capacity(raw.values.len());
    for row in raw.values.chunks_exact(N_CHANNELS) {
        for (c, v) in row.iter().enumerate() {
            let z = stats.apply(c, *v) as f32;
            if !z.is_finite() {
                return Err(Error::Invalid(format!("non-finite standardized value in channel {}", CHANNEL_NAMES[c])));
            }
            values.push(z);
        }
    }
    let tensor = FeatureTensor {
        n: records.len(),
        t: t_steps,
        values,
        labels: records.iter().map(|r| r.label).collect(),
        bike_ids: records.iter().map(|r| r.bike.clone()).collect(),
        norm: stats.clone(),
    };
    Ok((tensor, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{Timestamp, TripRecord};

    fn pt(t: i64, lat: f64, lon: f64) -> GpsPoint {
        GpsPoint { bike: BikeId::new("B1").unwrap(), timestamp: Timestamp(t), coord: GeoCoord { lat, lon } }
    }

    #[test]
    fn haversine_reference_values() {
        let o = GeoCoord { lat: 0.0, lon: 0.0 };
        assert_eq!(haversine_km(o, o), 0.0);
        let one_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((haversine_km(o, GeoCoord { lat: 1.0, lon: 0.0 }) - 111.195).abs() < 1e-3);
        assert!((haversine_km(o, GeoCoord { lat: 1.0, lon: 0.0 }) - one_deg).abs() < 1e-9);
        let anti = haversine_km(o, GeoCoord { lat: 0.0, lon: 180.0 });
        assert!((anti - 20015.087).abs() < 0.01);
    }

    #[test]
    fn resample_broadcasts_single_point() {
        let out = resample_trajectory(&[pt(5, 1.0, 2.0)], 4).unwrap();
        assert_eq!(out, vec![[1.0, 2.0]; 4]);
    }

    #[test]
    fn resample_midpoint() {
        let out = resample_trajectory(&[pt(0, 0.0, 0.0), pt(10, 10.0, 0.0)], 3).unwrap();
        let lats: Vec<f64> = out.iter().map(|r| r[0]).collect();
        assert_eq!(lats, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn resample_single_step_and_errors() {
        let pts = [pt(0, 1.0, 1.0), pt(10, 2.0, 2.0)];
        assert_eq!(resample_trajectory(&pts, 1).unwrap(), vec![[1.0, 1.0]]);
        assert!(resample_trajectory(&[], 4).is_err());
        assert!(resample_trajectory(&pts, 0).is_err());
    }

    #[test]
    fn resample_duplicate_timestamps() {
        let pts = [pt(0, 0.0, 0.0), pt(5, 1.0, 0.0), pt(5, 3.0, 0.0), pt(10, 4.0, 0.0)];
        let out = resample_trajectory(&pts, 5).unwrap();
        assert_eq!(out[0], [0.0, 0.0]);
        assert_eq!(out[4], [4.0, 0.0]);
        assert!(out.iter().all(|r| r[0].is_finite()));
    }

    fn record(trips: Vec<TripRecord>, trajectory: Vec<GpsPoint>) -> BikeRecord {
        BikeRecord { bike: BikeId::new("B1").unwrap(), trips, trajectory, label: None }
    }

    #[test]
    fn aggregates() {
        let r = record(vec![], vec![pt(0, 0.0, 0.0)]);
        assert_eq!(
            compute_aggregates(&r),
            AggregateFeatures { cum_distance_km: 0.0, trip_count: 0, total_time_min: 0.0 }
        );

        let trip = TripRecord {
            bike: BikeId::new("B1").unwrap(),
            start_time: Timestamp(0),
            end_time: Timestamp(600),
            start: GeoCoord { lat: 0.0, lon: 0.0 },
            end: GeoCoord { lat: 1.0, lon: 0.0 },
        };
        let r = record(vec![trip], vec![pt(0, 0.0, 0.0), pt(600, 1.0, 0.0)]);
        let a = compute_aggregates(&r);
        assert!((a.cum_distance_km - 111.195).abs() < 1e-3);
        assert_eq!(a.trip_count, 1);
        assert!((a.total_time_min - 10.0).abs() < 1e-12);

        let r = record(vec![], vec![pt(0, 0.0, 0.0), pt(1, 0.5, 0.0), pt(2, 1.5, 0.0)]);
        let expected = haversine_km(GeoCoord { lat: 0.0, lon: 0.0 }, GeoCoord { lat: 0.5, lon: 0.0 })
            + haversine_km(GeoCoord { lat: 0.5, lon: 0.0 }, GeoCoord { lat: 1.5, lon: 0.0 });
        assert!((compute_aggregates(&r).cum_distance_km - expected).abs() < 1e-12);
    }

    #[test]
    fn normalizer_reference_values() {
        let constant = RawFeatures { n: 2, t: 1, values: vec![5.0; 10] };
        let s = fit_normalizer(&constant).unwrap();
        assert_eq!(s.mean, [5.0; 5]);
        assert_eq!(s.std, [STD_FLOOR; 5]);

        let two = RawFeatures { n: 1, t: 2, values: [[0.0; 5], [2.0; 5]].concat() };
        let s = fit_normalizer(&two).unwrap();
        assert_eq!(s.mean, [1.0; 5]);
        assert_eq!(s.std, [1.0; 5]);
        assert_eq!(fit_normalizer(&two).unwrap(), s);

        assert!(fit_normalizer(&RawFeatures { n: 0, t: 4, values: vec![] }).is_err());
    }

    #[test]
    fn build_dataset_shape_and_centering() {
        let recs: Vec<BikeRecord> = (0..3)
            .map(|i| {
                let mut r = record(vec![], vec![pt(0, i as f64, 0.5), pt(100, i as f64 + 1.0, 0.25 * i as f64)]);
                r.bike = BikeId::new(format!("B{i}")).unwrap();
                r
            })
            .collect();
        let (tensor, stats) = build_dataset(&recs[..1], Normalization::Fit, 8).unwrap();
        assert_eq!((tensor.n, tensor.t, tensor.d()), (1, 8, 5));
        assert_eq!(tensor.values.len(), 40);

        let (tensor, stats2) = build_dataset(&recs, Normalization::Fit, 8).unwrap();
        for c in 0..5 {
            let mean: f64 = tensor.values.iter().skip(c).step_by(5).map(|&v| v as f64).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        }
        let (applied, same) = build_dataset(&recs, Normalization::Use(&stats), 8).unwrap();
        assert_eq!(same, stats);
        assert_ne!(stats, stats2);
        assert!(applied.values.iter().all(|v| v.is_finite()));
        assert!(build_dataset(&recs, Normalization::Fit, 0).is_err());
    }

    #[test]
    fn tensor_dir_round_trip_and_truncation() {
        let recs = vec![record(vec![], vec![pt(0, 1.0, 2.0), pt(60, 1.5, 2.5)])];
        let (tensor, _) = build_dataset(&recs, Normalization::Fit, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tensor.save(dir.path()).unwrap();
        assert_eq!(FeatureTensor::load(dir.path()).unwrap(), tensor);

        let data = std::fs::read(dir.path().join("data.bin")).unwrap();
        std::fs::write(dir.path().join("data.bin"), &data[..data.len() - 4]).unwrap();
        assert!(matches!(FeatureTensor::load(dir.path()), Err(Error::Corrupt { .. })));
    }
}
