//! Per-client time series: CSV ingestion, train/val/test splitting, min-max
//! scaling, lookback windowing, feature correlations, and a synthetic
//! generator for heterogeneous clients.
//!
//! Feature layout of every row, in order: energy, time-of-day index (0-95 at
//! 15-minute cadence), day-of-week index (Monday = 0), dry-bulb temperature,
//! wind speed, total floor space, external wall area, external window area.
//! The last three are static per client.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURES: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURES] = [
    "energy",
    "time_of_day",
    "day_of_week",
    "temperature",
    "wind_speed",
    "floor_space",
    "wall_area",
    "window_area",
];
pub const STATIC_FEATURES: [usize; 3] = [5, 6, 7];
pub const TIMEVARYING_FEATURES: [usize; 2] = [3, 4];

/// Minutes between consecutive rows.
pub const CADENCE_MIN: i64 = 15;
pub const STEPS_PER_DAY: usize = 96;

/// Static building attributes carried in the JSON sidecar next to each CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticMeta {
    pub floor_space: f64,
    pub wall_area: f64,
    pub window_area: f64,
}

/// One client's validated series: strictly increasing 15-minute timestamps
/// and the fixed 8-feature row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub client_id: String,
    pub start: NaiveDateTime,
    pub rows: Vec<[f64; FEATURES]>,
}

fn time_indices(ts: NaiveDateTime) -> (f64, f64) {
    let tod = (ts.hour() as i64 * 60 + ts.minute() as i64) / CADENCE_MIN;
    let dow = ts.weekday().num_days_from_monday();
    (tod as f64, dow as f64)
}

impl RawSeries {
    /// Build a series from raw measurements, deriving the time-of-day and
    /// day-of-week indices from the timestamps.
    pub fn assemble(
        client_id: impl Into<String>,
        start: NaiveDateTime,
        energy: &[f64],
        temperature: &[f64],
        wind_speed: &[f64],
        statics: &StaticMeta,
    ) -> Result<RawSeries> {
        let client_id = client_id.into();
        if energy.len() != temperature.len() || energy.len() != wind_speed.len() {
            return Err(Error::Data(format!(
                "client {client_id}: column lengths differ ({}, {}, {})",
                energy.len(),
                temperature.len(),
                wind_speed.len()
            )));
        }
        let mut rows = Vec::with_capacity(energy.len());
        for i in 0..energy.len() {
            let values = [
                energy[i],
                temperature[i],
                wind_speed[i],
                statics.floor_space,
                statics.wall_area,
                statics.window_area,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "client {client_id}: non-finite value at row {}",
                    i + 1
                )));
            }
            let ts = start + chrono::Duration::minutes(CADENCE_MIN * i as i64);
            let (tod, dow) = time_indices(ts);
            rows.push([
                energy[i],
                tod,
                dow,
                temperature[i],
                wind_speed[i],
                statics.floor_space,
                statics.wall_area,
                statics.window_area,
            ]);
        }
        Ok(RawSeries {
            client_id,
            start,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn timestamp(&self, row: usize) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(CADENCE_MIN * row as i64)
    }

    pub fn energy(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r[0])
    }

    pub fn feature(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[idx])
    }

    fn slice(&self, range: std::ops::Range<usize>, suffix: &str) -> RawSeries {
        RawSeries {
            client_id: format!("{}{suffix}", self.client_id),
            start: self.timestamp(range.start),
            rows: self.rows[range].to_vec(),
        }
    }
}

const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M:%S";

/// Read one client from `timestamp,energy,temperature,wind_speed` CSV plus
/// its static attributes. Validates cadence and finiteness.
pub fn ingest_csv(path: &Path, statics: &StaticMeta, client_id: &str) -> Result<RawSeries> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (c_ts, c_energy, c_temp, c_wind) = (
        col("timestamp")?,
        col("energy")?,
        col("temperature")?,
        col("wind_speed")?,
    );

    let mut start = None;
    let mut prev_ts: Option<NaiveDateTime> = None;
    let mut energy = Vec::new();
    let mut temperature = Vec::new();
    let mut wind = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let ts = NaiveDateTime::parse_from_str(&record[c_ts], TIMESTAMP_FMT)
            .map_err(|e| Error::Data(format!("{}: row {row}: bad timestamp: {e}", path.display())))?;
        if let Some(prev) = prev_ts {
            let got_min = (ts - prev).num_minutes();
            if got_min != CADENCE_MIN {
                return Err(Error::CadenceGap {
                    prev_row: row - 1,
                    row,
                    expected_min: CADENCE_MIN,
                    got_min,
                });
            }
        } else {
            start = Some(ts);
        }
        prev_ts = Some(ts);
        let parse = |idx: usize, name: &str| -> Result<f64> {
            let v: f64 = record[idx].parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {row}: `{name}` is not a number",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {row}: non-finite `{name}`",
                    path.display()
                )));
            }
            Ok(v)
        };
        energy.push(parse(c_energy, "energy")?);
        temperature.push(parse(c_temp, "temperature")?);
        wind.push(parse(c_wind, "wind_speed")?);
    }
    let start = start.ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?;
    RawSeries::assemble(client_id, start, &energy, &temperature, &wind, statics)
}

/// Read one client from a CSV and its `<stem>.json` sidecar.
pub fn ingest_client_files(csv_path: &Path) -> Result<RawSeries> {
    let stem = csv_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("bad CSV path {}", csv_path.display())))?
        .to_string();
    let sidecar = csv_path.with_extension("json");
    let meta: StaticMeta = serde_json::from_reader(std::fs::File::open(&sidecar).map_err(
        |e| Error::Data(format!("missing sidecar {}: {e}", sidecar.display())),
    )?)?;
    ingest_csv(csv_path, &meta, &stem)
}

/// Write one client out in the ingestion format; returns (csv, sidecar).
pub fn write_client_files(series: &RawSeries, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", series.client_id));
    let json_path = dir.join(format!("{}.json", series.client_id));

    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "timestamp,energy,temperature,wind_speed")?;
    for (i, row) in series.rows.iter().enumerate() {
        writeln!(
            file,
            "{},{},{},{}",
            series.timestamp(i).format(TIMESTAMP_FMT),
            row[0],
            row[3],
            row[4]
        )?;
    }
    let meta = StaticMeta {
        floor_space: series.rows.first().map_or(0.0, |r| r[5]),
        wall_area: series.rows.first().map_or(0.0, |r| r[6]),
        window_area: series.rows.first().map_or(0.0, |r| r[7]),
    };
    serde_json::to_writer_pretty(std::fs::File::create(&json_path)?, &meta)?;
    Ok((csv_path, json_path))
}

/// Which split the middle 10% chunk belongs to. The default keeps validation
/// in the middle; the alternative follows the literal test-before-validation
/// chronology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SplitOrder {
    #[default]
    TrainValTest,
    TrainTestVal,
}

/// Contiguous 80/10/10 split by row count (floor for the first two chunks,
/// remainder for the last). Returns (train, val, test) regardless of their
/// physical order.
pub fn split_series(
    s: &RawSeries,
    order: SplitOrder,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let n = s.len();
    let n_train = n * 8 / 10;
    let n_second = n / 10;
    let n_third = n - n_train - n_second;
    if n_train == 0 || n_second == 0 || n_third == 0 {
        return Err(Error::SeriesTooShort { len: n, need: 10 });
    }
    let train = s.slice(0..n_train, "");
    let second = s.slice(n_train..n_train + n_second, "");
    let third = s.slice(n_train + n_second..n, "");
    Ok(match order {
        SplitOrder::TrainValTest => (train, second, third),
        SplitOrder::TrainTestVal => (train, third, second),
    })
}

/// Per-feature min-max scaler fitted on train rows. Degenerate features
/// (max == min, e.g. the static columns of a single client) map to 0.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: [f64; FEATURES],
    pub max: [f64; FEATURES],
}

impl Scaler {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64; FEATURES]>) -> Result<Scaler> {
        let mut min = [f64::INFINITY; FEATURES];
        let mut max = [f64::NEG_INFINITY; FEATURES];
        let mut any = false;
        for row in rows {
            any = true;
            for f in 0..FEATURES {
                min[f] = min[f].min(row[f]);
                max[f] = max[f].max(row[f]);
            }
        }
        if !any {
            return Err(Error::EmptyInput("Scaler::fit"));
        }
        Ok(Scaler { min, max })
    }

    pub fn scale_feature(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn transform_row(&self, row: &[f64; FEATURES]) -> [f64; FEATURES] {
        std::array::from_fn(|f| self.scale_feature(f, row[f]))
    }

    pub fn inverse_energy(&self, scaled: f64) -> f64 {
        let (lo, hi) = (self.min[0], self.max[0]);
        if hi > lo {
            scaled * (hi - lo) + lo
        } else {
            lo
        }
    }
}

/// One training sample: a scaled lookback window and its target, with the
/// original-unit target kept for evaluation.
#[derive(Debug, Clone)]
pub struct Window {
    pub x: Tensor,
    pub y_scaled: f64,
    pub y_orig: f64,
    pub target_time: NaiveDateTime,
}

/// Stride-1 windows over one scaled segment: a length-N segment yields N - T
/// windows, the target being the energy one step past the window.
pub fn make_windows(segment: &RawSeries, scaler: &Scaler, lookback: usize) -> Result<Vec<Window>> {
    let n = segment.len();
    if n <= lookback {
        return Err(Error::SeriesTooShort {
            len: n,
            need: lookback + 1,
        });
    }
    let scaled: Vec<[f64; FEATURES]> = segment.rows.iter().map(|r| scaler.transform_row(r)).collect();
    let mut windows = Vec::with_capacity(n - lookback);
    for t in 0..n - lookback {
        let mut data = Vec::with_capacity(lookback * FEATURES);
        for row in &scaled[t..t + lookback] {
            data.extend_from_slice(row);
        }
        windows.push(Window {
            x: Tensor::new(vec![lookback, FEATURES], data)?,
            y_scaled: scaled[t + lookback][0],
            y_orig: segment.rows[t + lookback][0],
            target_time: segment.timestamp(t + lookback),
        });
    }
    Ok(windows)
}

/// Windowed train/val/test sets plus the scaler for one client.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: String,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub scaler: Scaler,
}

impl ClientDataset {
    pub fn split(&self, which: SplitKind) -> &[Window] {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Whether scaling factors come from each client's own train rows or from
/// the union of all clients' train rows (used for pooled training).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerScope {
    #[default]
    PerClient,
    Global,
}

pub fn build_dataset(
    raw: &RawSeries,
    lookback: usize,
    scaler: &Scaler,
    order: SplitOrder,
) -> Result<ClientDataset> {
    let (train, val, test) = split_series(raw, order)?;
    Ok(ClientDataset {
        client_id: raw.client_id.clone(),
        train: make_windows(&train, scaler, lookback)?,
        val: make_windows(&val, scaler, lookback)?,
        test: make_windows(&test, scaler, lookback)?,
        scaler: scaler.clone(),
    })
}

pub fn build_client_datasets(
    series: &[RawSeries],
    lookback: usize,
    scope: ScalerScope,
    order: SplitOrder,
) -> Result<Vec<ClientDataset>> {
    if series.is_empty() {
        return Err(Error::EmptyInput("build_client_datasets"));
    }
    match scope {
        ScalerScope::PerClient => series
            .iter()
            .map(|s| {
                let (train, _, _) = split_series(s, order)?;
                let scaler = Scaler::fit(train.rows.iter())?;
                build_dataset(s, lookback, &scaler, order)
            })
            .collect(),
        ScalerScope::Global => {
            let mut train_rows = Vec::new();
            for s in series {
                let (train, _, _) = split_series(s, order)?;
                train_rows.extend(train.rows);
            }
            let scaler = Scaler::fit(train_rows.iter())?;
            series
                .iter()
                .map(|s| build_dataset(s, lookback, &scaler, order))
                .collect()
        }
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            op: "pearson",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("pearson"));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(cov / (var_a * var_b).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrEntry {
    pub feature: String,
    /// None when the correlation is undefined (degenerate variance).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    /// Per-client mean energy against each static feature, across clients.
    pub static_features: Vec<CorrEntry>,
    /// Per-client correlation with energy, averaged across clients.
    pub timevarying_features: Vec<CorrEntry>,
}

pub fn correlation_report(
    clients: &[RawSeries],
    static_features: &[usize],
    timevarying_features: &[usize],
) -> Result<CorrelationReport> {
    if clients.is_empty() {
        return Err(Error::EmptyInput("correlation_report"));
    }
    let mean_energy: Vec<f64> = clients
        .iter()
        .map(|c| c.energy().sum::<f64>() / c.len() as f64)
        .collect();

    let static_entries = static_features
        .iter()
        .map(|&f| {
            let values: Vec<f64> = clients.iter().map(|c| c.rows[0][f]).collect();
            let value = if clients.len() < 2 {
                None
            } else {
                pearson(&mean_energy, &values).ok()
            };
            CorrEntry {
                feature: FEATURE_NAMES[f].into(),
                value,
            }
        })
        .collect();

    let tv_entries = timevarying_features
        .iter()
        .map(|&f| {
            let rs: Vec<f64> = clients
                .iter()
                .filter_map(|c| {
                    let energy: Vec<f64> = c.energy().collect();
                    let feat: Vec<f64> = c.feature(f).collect();
                    pearson(&feat, &energy).ok()
                })
                .collect();
            let value = if rs.is_empty() {
                None
            } else {
                Some(rs.iter().sum::<f64>() / rs.len() as f64)
            };
            CorrEntry {
                feature: FEATURE_NAMES[f].into(),
                value,
            }
        })
        .collect();

    Ok(CorrelationReport {
        static_features: static_entries,
        timevarying_features: tv_entries,
    })
}

/// Synthetic heterogeneous clients: per-client base magnitudes on a
/// logarithmic ladder across `scale_spread`, a daily/weekly consumption
/// pattern shifted by a per-client phase, operating-hours gating whose depth
/// follows the magnitude ladder, weather from one shared smooth process, and
/// static features tied to the base magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clients: usize,
    /// Rows per client (15-minute cadence).
    pub length: usize,
    /// Ratio between the largest and smallest client base magnitude (>= 1).
    pub scale_spread: f64,
    /// Depth of the operating-hours gating, in [0, 1].
    pub variance_profile: f64,
    /// Relative amplitude of the additive noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clients: 4,
            length: 2016,
            scale_spread: 100.0,
            variance_profile: 0.8,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::Config {
                field: "data.n_clients".into(),
                msg: "need at least one client".into(),
            });
        }
        if self.scale_spread < 1.0 {
            return Err(Error::Config {
                field: "data.scale_spread".into(),
                msg: "scale spread must be >= 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.variance_profile) {
            return Err(Error::Config {
                field: "data.variance_profile".into(),
                msg: "variance profile must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

const BASE_UNIT_KWH: f64 = 50.0;
const OPEN_START: usize = 32; // 08:00
const OPEN_END: usize = 72; // 18:00
const RAMP_STEPS: usize = 4; // one hour of ramp-up/down around opening hours
const WEEKEND_FACTOR: f64 = 0.75;

/// Occupancy factor: closed level outside opening hours, 1 inside, with a
/// linear one-hour ramp on both sides.
fn gate_factor(tod: usize, workday: bool, depth: f64) -> f64 {
    let closed = 1.0 - 0.9 * depth;
    if !workday {
        return closed;
    }
    let ramp = if (OPEN_START..OPEN_END).contains(&tod) {
        1.0
    } else if (OPEN_START - RAMP_STEPS..OPEN_START).contains(&tod) {
        (tod - (OPEN_START - RAMP_STEPS)) as f64 / RAMP_STEPS as f64
    } else if (OPEN_END..OPEN_END + RAMP_STEPS).contains(&tod) {
        (OPEN_END + RAMP_STEPS - tod) as f64 / RAMP_STEPS as f64
    } else {
        0.0
    };
    closed + (1.0 - closed) * ramp
}

fn synth_start() -> NaiveDateTime {
    // A Monday, so day-of-week indices start at 0.
    chrono::NaiveDate::from_ymd_opt(2018, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

pub fn synth_clients(cfg: &SynthConfig) -> Result<Vec<RawSeries>> {
    cfg.validate()?;
    let start = synth_start();

    // Weather is one shared process on stream 0.
    let mut weather_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    weather_rng.set_stream(0);
    let mut temp_walk: f64 = 0.0;
    let mut wind_walk: f64 = 0.0;
    let mut temperature = Vec::with_capacity(cfg.length);
    let mut wind = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let tod = (t % STEPS_PER_DAY) as f64;
        temp_walk += weather_rng.gen_range(-0.15..0.15);
        temp_walk = temp_walk.clamp(-8.0, 8.0);
        let diurnal = 6.0 * (std::f64::consts::TAU * (tod - 36.0) / STEPS_PER_DAY as f64).sin();
        temperature.push(12.0 + diurnal + temp_walk);
        wind_walk += weather_rng.gen_range(-0.2..0.2);
        wind_walk = wind_walk.clamp(-3.5, 3.5);
        wind.push(4.0 + wind_walk);
    }

    let mut out = Vec::with_capacity(cfg.n_clients);
    for i in 0..cfg.n_clients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);

        // Deterministic magnitude ladder; the gating depth follows it so
        // larger buildings also behave differently, not just bigger. With a
        // spread of 1 every client sits at the same rung.
        let ladder = if cfg.n_clients > 1 && cfg.scale_spread > 1.0 {
            i as f64 / (cfg.n_clients - 1) as f64
        } else {
            0.5
        };
        let base = BASE_UNIT_KWH * cfg.scale_spread.powf(ladder);
        let depth = cfg.variance_profile * (0.4 + 0.6 * ladder);
        let phase = rng.gen_range(0..STEPS_PER_DAY);

        let jitter = |rng: &mut ChaCha8Rng, amp: f64| {
            1.0 + amp * cfg.noise_level.min(1.0) * rng.gen_range(-1.0..1.0)
        };
        let statics = StaticMeta {
            floor_space: 150.0 * base * jitter(&mut rng, 0.8),
            wall_area: 60.0 * base.powf(0.7) * jitter(&mut rng, 1.0),
            window_area: 18.0 * base.powf(0.7) * jitter(&mut rng, 1.0),
        };

        let mut energy = Vec::with_capacity(cfg.length);
        for t in 0..cfg.length {
            let shifted = t + phase;
            let tod = shifted % STEPS_PER_DAY;
            let dow = (shifted / STEPS_PER_DAY) % 7;
            let workday = dow < 5;
            let shape = 0.55
                + 0.45 * (std::f64::consts::TAU * tod as f64 / STEPS_PER_DAY as f64
                    - std::f64::consts::FRAC_PI_2)
                    .sin();
            let gate = gate_factor(tod, workday, depth);
            let week = if workday { 1.0 } else { WEEKEND_FACTOR };
            let noise = base * cfg.noise_level * rng.gen_range(-1.0..1.0);
            energy.push((base * shape * gate * week + noise).max(0.0));
        }

        out.push(RawSeries::assemble(
            format!("client_{i:02}"),
            start,
            &energy,
            &temperature,
            &wind,
            &statics,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_series(n: usize) -> RawSeries {
        let energy: Vec<f64> = (0..n).map(|i| 10.0 + (i as f64 * 0.37).sin()).collect();
        let temp: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let wind: Vec<f64> = (0..n).map(|i| 3.0 + (i % 5) as f64).collect();
        RawSeries::assemble(
            "toy",
            synth_start(),
            &energy,
            &temp,
            &wind,
            &StaticMeta {
                floor_space: 100.0,
                wall_area: 40.0,
                window_area: 12.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn time_indices_cover_one_day_starting_monday() {
        let s = toy_series(96);
        let tods: Vec<f64> = s.feature(1).collect();
        assert_eq!(tods, (0..96).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(s.rows[0][2], 0.0); // 2018-01-01 is a Monday
        let next_day = toy_series(97);
        assert_eq!(next_day.rows[96][2], 1.0);
    }

    #[test]
    fn split_examples() {
        let s = toy_series(100);
        let (train, val, test) = split_series(&s, SplitOrder::TrainValTest).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));

        let s = toy_series(105);
        let (train, val, test) = split_series(&s, SplitOrder::TrainValTest).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (84, 10, 11));

        // Alternative chronology: the middle chunk is the test set.
        let (train2, val2, test2) = split_series(&s, SplitOrder::TrainTestVal).unwrap();
        assert_eq!(train2.rows, train.rows);
        assert_eq!(test2.rows, val.rows);
        assert_eq!(val2.rows, test.rows);

        assert!(matches!(
            split_series(&toy_series(9), SplitOrder::TrainValTest),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn split_is_a_contiguous_partition() {
        let s = toy_series(123);
        let (train, val, test) = split_series(&s, SplitOrder::TrainValTest).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), s.len());
        let rebuilt: Vec<_> = train
            .rows
            .iter()
            .chain(&val.rows)
            .chain(&test.rows)
            .cloned()
            .collect();
        assert_eq!(rebuilt, s.rows);
        assert_eq!(val.start, s.timestamp(train.len()));
    }

    #[test]
    fn scaler_examples() {
        let rows: Vec<[f64; FEATURES]> = [2.0, 4.0, 6.0]
            .iter()
            .map(|&e| {
                let mut r = [0.0; FEATURES];
                r[0] = e;
                r[3] = 7.0; // constant feature
                r
            })
            .collect();
        let scaler = Scaler::fit(rows.iter()).unwrap();
        let scaled: Vec<f64> = rows.iter().map(|r| scaler.transform_row(r)[0]).collect();
        assert_eq!(scaled, vec![0.0, 0.5, 1.0]);
        // Degenerate feature maps to 0.
        assert_eq!(scaler.transform_row(&rows[0])[3], 0.0);
        // Out-of-range test value keeps the train factors.
        assert_eq!(scaler.scale_feature(0, 8.0), 1.5);
        // Inverse on the energy feature.
        assert_eq!(scaler.inverse_energy(0.5), 4.0);
    }

    #[test]
    fn scaling_round_trip_is_identity_on_train() {
        let s = toy_series(200);
        let scaler = Scaler::fit(s.rows.iter()).unwrap();
        for row in &s.rows {
            let back = scaler.inverse_energy(scaler.scale_feature(0, row[0]));
            assert!((back - row[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn window_counts_and_targets() {
        let s = toy_series(100);
        let scaler = Scaler::fit(s.rows.iter()).unwrap();
        assert_eq!(make_windows(&s, &scaler, 12).unwrap().len(), 88);

        let s13 = toy_series(13);
        let w = make_windows(&s13, &scaler, 12).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].y_orig, s13.rows[12][0]);
        assert_eq!(w[0].y_scaled, scaler.scale_feature(0, s13.rows[12][0]));

        assert!(matches!(
            make_windows(&toy_series(10), &scaler, 12),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn windows_never_cross_split_boundaries() {
        let s = toy_series(140);
        let datasets = build_client_datasets(
            std::slice::from_ref(&s),
            12,
            ScalerScope::PerClient,
            SplitOrder::default(),
        )
        .unwrap();
        let d = &datasets[0];
        // 140 rows -> 112/14/14; windows 100/2/2, and every target stays
        // inside its own segment.
        assert_eq!(d.train.len(), 100);
        assert_eq!(d.val.len(), 2);
        assert_eq!(d.test.len(), 2);
        assert_eq!(d.train[0].target_time, s.timestamp(12));
        assert_eq!(d.val[0].target_time, s.timestamp(112 + 12));
        assert_eq!(d.test[0].target_time, s.timestamp(126 + 12));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        // Hand-computed: r = 15 / sqrt(6 * 38) = 0.993399...
        let b = [2.0, 4.0, 7.0];
        assert!((pearson(&a, &b).unwrap() - 0.9933992677987828).abs() < 1e-12);

        assert!(matches!(
            pearson(&a, &[5.0, 5.0, 5.0]),
            Err(Error::ZeroVariance)
        ));
    }

    #[test]
    fn correlation_report_static_and_degenerate_handling() {
        // Mean energy exactly proportional to floor space -> r = 1.
        let clients: Vec<RawSeries> = (1..=4)
            .map(|k| {
                let level = k as f64 * 10.0;
                let energy = vec![level; 50];
                let temp: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
                let wind = vec![2.0; 50];
                RawSeries::assemble(
                    format!("c{k}"),
                    synth_start(),
                    &energy,
                    &temp,
                    &wind,
                    &StaticMeta {
                        floor_space: level * 3.0,
                        wall_area: 5.0,
                        window_area: 1.0,
                    },
                )
                .unwrap()
            })
            .collect();
        let report = correlation_report(&clients, &STATIC_FEATURES, &TIMEVARYING_FEATURES).unwrap();
        let floor = &report.static_features[0];
        assert!((floor.value.unwrap() - 1.0).abs() < 1e-9);
        // wall_area is constant across clients -> flagged, not fatal.
        assert!(report.static_features[1].value.is_none());
        // Energy is constant per client -> time-varying r undefined -> flagged.
        assert!(report.timevarying_features[0].value.is_none());

        // Fewer than two clients: static rows flagged.
        let single = correlation_report(&clients[..1], &STATIC_FEATURES, &TIMEVARYING_FEATURES)
            .unwrap();
        assert!(single.static_features.iter().all(|e| e.value.is_none()));
    }

    #[test]
    fn correlation_report_averages_and_independence() {
        let mut cfg = SynthConfig {
            n_clients: 2,
            length: 2000,
            scale_spread: 1.0,
            ..SynthConfig::default()
        };
        cfg.noise_level = 0.0;
        let clients = synth_clients(&cfg).unwrap();

        // Two identical clients (up to phase): the averaged time-varying r
        // equals each single-client r.
        let both = correlation_report(&clients, &[], &TIMEVARYING_FEATURES).unwrap();
        let first = correlation_report(&clients[..1], &[], &TIMEVARYING_FEATURES).unwrap();
        let second = correlation_report(&clients[1..], &[], &TIMEVARYING_FEATURES).unwrap();
        let avg = (first.timevarying_features[0].value.unwrap()
            + second.timevarying_features[0].value.unwrap())
            / 2.0;
        assert!((both.timevarying_features[0].value.unwrap() - avg).abs() < 1e-12);

        // Wind speed does not drive synthetic energy: |r| stays small on a
        // long seeded series.
        let cfg = SynthConfig {
            n_clients: 3,
            length: 6000,
            noise_level: 0.05,
            seed: 7,
            ..SynthConfig::default()
        };
        let clients = synth_clients(&cfg).unwrap();
        let report = correlation_report(&clients, &[], &[4]).unwrap();
        assert!(report.timevarying_features[0].value.unwrap().abs() < 0.1);
    }

    #[test]
    fn synth_spread_one_and_zero_noise_gives_identical_clients_up_to_phase() {
        let cfg = SynthConfig {
            n_clients: 3,
            length: 672 * 2, // whole weeks, so sorted values are phase-free
            scale_spread: 1.0,
            noise_level: 0.0,
            seed: 3,
            ..SynthConfig::default()
        };
        let clients = synth_clients(&cfg).unwrap();
        let sorted = |s: &RawSeries| {
            let mut v: Vec<f64> = s.energy().collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let reference = sorted(&clients[0]);
        for c in &clients[1..] {
            assert_eq!(sorted(c), reference);
        }
        // Statics are identical when the spread is 1 and noise is 0.
        assert_eq!(clients[0].rows[0][5], clients[1].rows[0][5]);
    }

    #[test]
    fn synth_spread_shows_up_in_mean_energy() {
        let cfg = SynthConfig {
            scale_spread: 100.0,
            seed: 1,
            ..SynthConfig::default()
        };
        let clients = synth_clients(&cfg).unwrap();
        let means: Vec<f64> = clients
            .iter()
            .map(|c| c.energy().sum::<f64>() / c.len() as f64)
            .collect();
        let max = means.iter().cloned().fold(f64::MIN, f64::max);
        let min = means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min >= 50.0, "spread of means {:.1}", max / min);
    }

    #[test]
    fn synth_round_trips_through_csv_ingestion() {
        let cfg = SynthConfig {
            n_clients: 2,
            length: 300,
            ..SynthConfig::default()
        };
        let clients = synth_clients(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for c in &clients {
            let (csv_path, _) = write_client_files(c, dir.path()).unwrap();
            let back = ingest_client_files(&csv_path).unwrap();
            assert_eq!(back.client_id, c.client_id);
            assert_eq!(back.start, c.start);
            assert_eq!(back.rows, c.rows);
        }
    }

    #[test]
    fn ingest_rejects_gaps_missing_columns_and_non_finite_values() {
        let dir = tempfile::tempdir().unwrap();
        let meta = StaticMeta {
            floor_space: 1.0,
            wall_area: 1.0,
            window_area: 1.0,
        };

        let gap = dir.path().join("gap.csv");
        std::fs::write(
            &gap,
            "timestamp,energy,temperature,wind_speed\n\
             2018-01-01T00:00:00,1,10,3\n\
             2018-01-01T00:30:00,2,10,3\n",
        )
        .unwrap();
        match ingest_csv(&gap, &meta, "gap") {
            Err(Error::CadenceGap { prev_row, row, got_min, .. }) => {
                assert_eq!((prev_row, row, got_min), (1, 2, 30));
            }
            other => panic!("expected cadence error, got {other:?}"),
        }

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "timestamp,energy\n2018-01-01T00:00:00,1\n").unwrap();
        assert!(matches!(ingest_csv(&missing, &meta, "m"), Err(Error::Data(_))));

        let nan = dir.path().join("nan.csv");
        std::fs::write(
            &nan,
            "timestamp,energy,temperature,wind_speed\n2018-01-01T00:00:00,NaN,10,3\n",
        )
        .unwrap();
        assert!(matches!(ingest_csv(&nan, &meta, "n"), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn pearson_is_symmetric_and_scale_invariant(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
            alpha in 0.01f64..50.0,
            beta in -100.0f64..100.0,
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let (Ok(r), Ok(r_sym)) = (pearson(&a, &b), pearson(&b, &a)) else {
                return Ok(()); // degenerate draw
            };
            prop_assert!((r - r_sym).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x + beta).collect();
            let r_scaled = pearson(&scaled, &b).unwrap();
            prop_assert!((r - r_scaled).abs() < 1e-9);
        }

        #[test]
        fn split_sizes_partition_any_length(n in 10usize..3000) {
            let s = toy_series(n);
            let (train, val, test) = split_series(&s, SplitOrder::TrainValTest).unwrap();
            prop_assert_eq!(train.len(), n * 8 / 10);
            prop_assert_eq!(val.len(), n / 10);
            prop_assert_eq!(train.len() + val.len() + test.len(), n);
        }
    }
}
