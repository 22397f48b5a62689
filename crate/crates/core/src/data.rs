//! File ingestion, normalisation, gap handling and windowing.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use gwnet_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{GwError, Result};
use crate::layers::{augment, augment_all, pooled_cells, weather_input, AugmentedCoord, CoordNorm, GeoTransform, StPoint, ZStat};

pub const WEEK_DAYS: i64 = 7;

/// One piezometer record on a weekly calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub sensor_id: String,
    pub lon: f64,
    pub lat: f64,
    pub elevation: f64,
    pub dates: Vec<NaiveDate>,
    /// Gap-filled levels in meters.
    pub values: Vec<f64>,
    /// `false` exactly where the raw record was missing.
    pub observed: Vec<bool>,
}

impl SensorSeries {
    /// Builds a series from raw readings, filling gaps with the previous
    /// reading and leading gaps with the first reading.
    pub fn from_raw(
        sensor_id: impl Into<String>,
        lon: f64,
        lat: f64,
        elevation: f64,
        dates: Vec<NaiveDate>,
        raw: &[Option<f64>],
    ) -> Result<Self> {
        let sensor_id = sensor_id.into();
        let first = raw
            .iter()
            .flatten()
            .next()
            .copied()
            .ok_or_else(|| GwError::invalid(format!("sensor `{sensor_id}` has no observations")))?;
        let mut last = first;
        let mut values = Vec::with_capacity(raw.len());
        let mut observed = Vec::with_capacity(raw.len());
        for r in raw {
            match r {
                Some(v) => {
                    last = *v;
                    values.push(*v);
                    observed.push(true);
                }
                None => {
                    values.push(last);
                    observed.push(false);
                }
            }
        }
        Ok(Self {
            sensor_id,
            lon,
            lat,
            elevation,
            dates,
            values,
            observed,
        })
    }

    pub fn missing_fraction(&self) -> f64 {
        self.observed.iter().filter(|o| !**o).count() as f64 / self.observed.len().max(1) as f64
    }
}

#[derive(Debug, Deserialize)]
struct SensorRow {
    date: NaiveDate,
    sensor_id: String,
    lon: f64,
    lat: f64,
    elevation: f64,
    value: Option<f64>,
}

pub fn load_sensors(path: &Path) -> Result<Vec<SensorSeries>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| GwError::format(path, e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| GwError::format(path, e.to_string()))?
        .clone();
    let expected = ["date", "sensor_id", "lon", "lat", "elevation", "value"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(GwError::format(
            path,
            format!("header must be `{}`", expected.join(",")),
        ));
    }
    struct Acc {
        lon: f64,
        lat: f64,
        elevation: f64,
        rows: Vec<(NaiveDate, Option<f64>, usize)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Acc> = HashMap::new();
    for (i, rec) in rdr.deserialize::<SensorRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| GwError::format(path, format!("line {line}: {e}")))?;
        let acc = by_id.entry(row.sensor_id.clone()).or_insert_with(|| {
            order.push(row.sensor_id.clone());
            Acc {
                lon: row.lon,
                lat: row.lat,
                elevation: row.elevation,
                rows: Vec::new(),
            }
        });
        acc.rows.push((row.date, row.value, line));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut acc = by_id.remove(&id).expect("id recorded on insert");
        acc.rows.sort_by_key(|r| r.0);
        let mut bad = Vec::new();
        for w in acc.rows.windows(2) {
            let gap = (w[1].0 - w[0].0).num_days();
            if gap == 0 {
                return Err(GwError::format(
                    path,
                    format!("duplicate ({}, {id}) on lines {} and {}", w[0].0, w[0].2, w[1].2),
                ));
            }
            if gap != WEEK_DAYS {
                bad.push(format!("line {} ({} -> {})", w[1].2, w[0].0, w[1].0));
            }
        }
        if !bad.is_empty() {
            return Err(GwError::format(
                path,
                format!("sensor `{id}` has non-weekly gaps at {}", bad.join(", ")),
            ));
        }
        let dates = acc.rows.iter().map(|r| r.0).collect();
        let raw: Vec<Option<f64>> = acc.rows.iter().map(|r| r.1).collect();
        out.push(SensorSeries::from_raw(id, acc.lon, acc.lat, acc.elevation, dates, &raw)?);
    }
    if out.is_empty() {
        return Err(GwError::format(path, "no sensor rows"));
    }
    Ok(out)
}

/// Writes raw readings; unobserved entries are left blank.
pub fn write_sensors(path: &Path, series: &[SensorSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| GwError::format(path, e.to_string()))?;
    let err = |e: csv::Error| GwError::format(path, e.to_string());
    w.write_record(["date", "sensor_id", "lon", "lat", "elevation", "value"])
        .map_err(err)?;
    for s in series {
        for i in 0..s.dates.len() {
            let value = if s.observed[i] {
                format!("{}", s.values[i])
            } else {
                String::new()
            };
            w.write_record([
                s.dates[i].to_string(),
                s.sensor_id.clone(),
                format!("{}", s.lon),
                format!("{}", s.lat),
                format!("{}", s.elevation),
                value,
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| GwError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridHeader {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    geo_transform: [f64; 4],
    #[serde(default)]
    channel_names: Vec<String>,
    #[serde(default)]
    dates: Vec<NaiveDate>,
}

/// A stack of gridded frames: `frames × channels × height × width`,
/// row-major. Used for weather videos, elevation rasters and truth fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub geo: GeoTransform,
    pub channel_names: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub data: Vec<f64>,
}

pub type WeatherVideo = GridStack;

impl GridStack {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn plane(&self, f: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let start = f * self.frame_len() + c * n;
        &self.data[start..start + n]
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.frames * self.frame_len();
        if self.data.len() != expected {
            return Err(GwError::invalid(format!(
                "grid holds {} values, dimensions require {expected}",
                self.data.len()
            )));
        }
        if !self.dates.is_empty() && self.dates.len() != self.frames {
            return Err(GwError::invalid(format!(
                "{} dates for {} frames",
                self.dates.len(),
                self.frames
            )));
        }
        Ok(())
    }

    /// Bilinear sample of channel `c` of frame `f` at a location, clamped to
    /// the outermost pixel centres.
    pub fn sample(&self, f: usize, c: usize, lon: f64, lat: f64) -> f64 {
        let plane = self.plane(f, c);
        let (r, col) = self.geo.fractional(lon, lat);
        let r = r.clamp(0.0, (self.height - 1) as f64);
        let col = col.clamp(0.0, (self.width - 1) as f64);
        let (r0, c0) = (r.floor() as usize, col.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.height - 1), (c0 + 1).min(self.width - 1));
        let (fr, fc) = (r - r0 as f64, col - c0 as f64);
        let at = |rr: usize, cc: usize| plane[rr * self.width + cc];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1))
            + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    }

    /// Outer extent `(lon_min, lon_max, lat_min, lat_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let lon_a = self.geo.lon0;
        let lon_b = self.geo.lon0 + self.width as f64 * self.geo.dlon;
        let lat_a = self.geo.lat0;
        let lat_b = self.geo.lat0 + self.height as f64 * self.geo.dlat;
        (lon_a.min(lon_b), lon_a.max(lon_b), lat_a.min(lat_b), lat_a.max(lat_b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let header = GridHeader {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            geo_transform: self.geo.to_array(),
            channel_names: self.channel_names.clone(),
            dates: self.dates.clone(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| GwError::invalid(e.to_string()))?;
        out.push(b'\n');
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GwError::format(path, "missing header line"))?;
        let header: GridHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| GwError::format(path, format!("bad header: {e}")))?;
        let payload = &bytes[nl + 1..];
        let count = header.frames * header.channels * header.height * header.width;
        if payload.len() != count * 8 {
            return Err(GwError::format(
                path,
                format!(
                    "payload has {} bytes, header requires {}",
                    payload.len(),
                    count * 8
                ),
            ));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let g = Self {
            frames: header.frames,
            channels: header.channels,
            height: header.height,
            width: header.width,
            geo: GeoTransform::from_array(header.geo_transform),
            channel_names: header.channel_names,
            dates: header.dates,
            data,
        };
        g.check().map_err(|e| GwError::format(path, e.to_string()))?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| GwError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GwError::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

pub fn load_weather(path: &Path) -> Result<WeatherVideo> {
    GridStack::read(path)
}

/// Recharge-zone polygons in degrees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zones {
    pub polygons: Vec<Vec<[f64; 2]>>,
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

impl Zones {
    pub fn validate(&self) -> Result<()> {
        for (i, ring) in self.polygons.iter().enumerate() {
            if ring.len() < 3 {
                return Err(GwError::invalid(format!(
                    "zone polygon {i} has {} vertices, at least 3 required",
                    ring.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GwError::io(path, e))?;
        let z: Zones = serde_json::from_str(&text).map_err(|e| GwError::format(path, e.to_string()))?;
        z.validate().map_err(|e| GwError::format(path, e.to_string()))?;
        Ok(z)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| GwError::invalid(e.to_string()))?;
        fs::write(path, text).map_err(|e| GwError::io(path, e))
    }

    /// Inside any ring (even-odd rule) or within `buffer` degrees of its
    /// boundary.
    pub fn contains(&self, lon: f64, lat: f64, buffer: f64) -> bool {
        let p = [lon, lat];
        self.polygons.iter().any(|ring| {
            let n = ring.len();
            let mut inside = false;
            let mut near = false;
            for i in 0..n {
                let (a, b) = (ring[i], ring[(i + 1) % n]);
                if (a[1] > lat) != (b[1] > lat) {
                    let x = a[0] + (lat - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                    if lon < x {
                        inside = !inside;
                    }
                }
                if seg_dist(p, a, b) <= buffer {
                    near = true;
                }
            }
            inside || near
        })
    }
}

pub fn point_in_zone(p: &StPoint, zones: &Zones, buffer_deg: f64) -> bool {
    zones.contains(p.lon, p.lat, buffer_deg)
}

/// z-score statistics fitted on the training period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub gwl: ZStat,
    pub weather: Vec<ZStat>,
    pub coords: CoordNorm,
}

/// All raw inputs of one experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sensors: Vec<SensorSeries>,
    pub weather: WeatherVideo,
    pub elevation: GridStack,
    pub zones: Zones,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let d = Self {
            sensors: load_sensors(&dir.join("sensors.csv"))?,
            weather: load_weather(&dir.join("weather.bin"))?,
            elevation: GridStack::read(&dir.join("elevation.bin"))?,
            zones: Zones::load(&dir.join("zones.json"))?,
        };
        d.validate()?;
        Ok(d)
    }

    /// Writes the four input files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GwError::io(dir, e))?;
        write_sensors(&dir.join("sensors.csv"), &self.sensors)?;
        self.weather.write(&dir.join("weather.bin"))?;
        self.elevation.write(&dir.join("elevation.bin"))?;
        self.zones.write(&dir.join("zones.json"))
    }

    pub fn weeks(&self) -> usize {
        self.sensors[0].dates.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.sensors[0].dates
    }

    pub fn validate(&self) -> Result<()> {
        let dates = self.dates();
        for s in &self.sensors {
            if s.dates != dates {
                return Err(GwError::invalid(format!(
                    "sensor `{}` is not on the common weekly calendar",
                    s.sensor_id
                )));
            }
        }
        self.weather.check()?;
        if self.weather.frames != dates.len() || (!self.weather.dates.is_empty() && self.weather.dates != dates) {
            return Err(GwError::invalid("weather frames do not align with sensor weeks"));
        }
        self.elevation.check()?;
        if self.elevation.frames != 1 || self.elevation.channels != 1 {
            return Err(GwError::invalid("elevation raster must have one frame and one channel"));
        }
        self.zones.validate()
    }

    pub fn elevation_at(&self, lon: f64, lat: f64) -> f64 {
        self.elevation.sample(0, 0, lon, lat)
    }

    /// Elevation of every weather pixel, sampled from the raster.
    pub fn weather_pixel_elevation(&self) -> Vec<f64> {
        let w = &self.weather;
        let mut out = Vec::with_capacity(w.plane_len());
        for r in 0..w.height {
            for c in 0..w.width {
                let (lon, lat) = w.geo.center(r, c);
                out.push(self.elevation_at(lon, lat));
            }
        }
        out
    }

    /// Statistics from weeks `0..=split_week`: levels over observed entries,
    /// weather per channel, coordinates over sensor locations.
    pub fn fit_norm(&self, split_week: usize) -> Result<NormStats> {
        if split_week >= self.weeks() {
            return Err(GwError::invalid(format!(
                "split week {split_week} beyond {} weeks",
                self.weeks()
            )));
        }
        let gwl = ZStat::fit(
            "gwl",
            self.sensors.iter().flat_map(|s| {
                (0..=split_week)
                    .filter(|&i| s.observed[i])
                    .map(move |i| s.values[i])
            }),
        )?;
        let names = &self.weather.channel_names;
        let mut weather = Vec::with_capacity(self.weather.channels);
        for c in 0..self.weather.channels {
            let name = names.get(c).cloned().unwrap_or_else(|| format!("weather[{c}]"));
            weather.push(ZStat::fit(
                &name,
                (0..=split_week).flat_map(|f| self.weather.plane(f, c).iter().copied()),
            )?);
        }
        let coords = CoordNorm {
            lon: ZStat::fit("lon", self.sensors.iter().map(|s| s.lon))?,
            lat: ZStat::fit("lat", self.sensors.iter().map(|s| s.lat))?,
            elevation: ZStat::fit("elevation", self.sensors.iter().map(|s| s.elevation))?,
        };
        Ok(NormStats {
            gwl,
            weather,
            coords,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Test,
}

/// A prediction target week together with the partition it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub target: usize,
    pub partition: Partition,
}

/// Every target week with `t` weeks of history, in order.
pub fn make_windows(weeks: usize, t: usize, split_week: usize) -> Vec<Window> {
    (t..weeks)
        .map(|target| Window {
            target,
            partition: if target <= split_week {
                Partition::Train
            } else {
                Partition::Test
            },
        })
        .collect()
}

/// Splits windows by target week. The test side must hold at least `t + 1`
/// weeks.
pub fn temporal_split(weeks: usize, t: usize, split_week: usize) -> Result<(Vec<Window>, Vec<Window>)> {
    let test_len = weeks.saturating_sub(split_week + 1);
    if test_len < t + 1 {
        return Err(GwError::invalid(format!(
            "test period of {test_len} weeks is shorter than {} weeks",
            t + 1
        )));
    }
    let (train, test) = make_windows(weeks, t, split_week)
        .into_iter()
        .partition(|w| w.partition == Partition::Train);
    Ok((train, test))
}

/// Week index of the last training target for a split date (inclusive).
pub fn split_week_for_date(dates: &[NaiveDate], split: NaiveDate) -> Result<usize> {
    dates
        .iter()
        .rposition(|d| *d <= split)
        .ok_or_else(|| GwError::invalid(format!("split date {split} precedes the data")))
}

/// Model-ready context for one prediction.
#[derive(Debug, Clone)]
pub struct ModelInput<'a> {
    /// `T·M` lag points, lag-major (oldest lag first).
    pub lag_coords: Vec<AugmentedCoord>,
    pub lag_values: Vec<f64>,
    /// `T + 1` frames, each `[C + 5, H, W]`.
    pub frames: Vec<&'a Tensor>,
    /// Pooled-cell coordinates of all frames, frame-major.
    pub cell_coords: Vec<AugmentedCoord>,
}

/// A dataset normalised and indexed for training and evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub t_lags: usize,
    pub split_week: usize,
    pub norm: NormStats,
    pub dates: Vec<NaiveDate>,
    pub doys: Vec<u32>,
    pub sensor_ids: Vec<String>,
    pub sensor_locations: Vec<(f64, f64, f64)>,
    /// `[week][sensor]` gap-filled levels, meters and z-scores.
    pub values_m: Vec<Vec<f64>>,
    pub values_z: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub sensor_coords: Vec<Vec<AugmentedCoord>>,
    pub weather_inputs: Vec<Tensor>,
    pub cell_coords: Vec<Vec<AugmentedCoord>>,
    pub windows: Vec<Window>,
    pub elevation: GridStack,
    pub zones: Zones,
}

impl Prepared {
    pub fn new(data: &Dataset, t_lags: usize, split_week: usize) -> Result<Self> {
        data.validate()?;
        temporal_split(data.weeks(), t_lags, split_week)?;
        let norm = data.fit_norm(split_week)?;
        let weeks = data.weeks();
        let dates = data.dates().to_vec();
        let doys: Vec<u32> = dates.iter().map(chrono::Datelike::ordinal).collect();
        let m = data.sensors.len();
        let mut values_m = vec![vec![0.0; m]; weeks];
        let mut values_z = vec![vec![0.0; m]; weeks];
        let mut observed = vec![vec![false; m]; weeks];
        for (j, s) in data.sensors.iter().enumerate() {
            for i in 0..weeks {
                values_m[i][j] = s.values[i];
                values_z[i][j] = norm.gwl.apply(s.values[i]);
                observed[i][j] = s.observed[i];
            }
        }
        let sensor_locations: Vec<_> = data.sensors.iter().map(|s| (s.lon, s.lat, s.elevation)).collect();
        let mut sensor_coords = Vec::with_capacity(weeks);
        for &doy in &doys {
            let pts: Vec<StPoint> = sensor_locations
                .iter()
                .map(|&(lon, lat, elevation)| StPoint { lon, lat, elevation, doy })
                .collect();
            sensor_coords.push(augment_all(&pts, &norm.coords)?);
        }
        let w = &data.weather;
        let pix_elev = data.weather_pixel_elevation();
        let mut weather_inputs = Vec::with_capacity(weeks);
        let mut cell_coords = Vec::with_capacity(weeks);
        for f in 0..weeks {
            let mut z = w.frame(f).to_vec();
            for c in 0..w.channels {
                let st = norm.weather[c];
                z[c * w.plane_len()..(c + 1) * w.plane_len()]
                    .iter_mut()
                    .for_each(|v| *v = st.apply(*v));
            }
            weather_inputs.push(weather_input(
                &z, w.channels, w.height, w.width, &w.geo, &pix_elev, doys[f], &norm.coords,
            )?);
            let cells = pooled_cells(&w.geo, w.height, w.width, &pix_elev, doys[f]);
            cell_coords.push(augment_all(&cells, &norm.coords)?);
        }
        Ok(Self {
            t_lags,
            split_week,
            norm,
            doys,
            sensor_ids: data.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
            sensor_locations,
            values_m,
            values_z,
            observed,
            sensor_coords,
            weather_inputs,
            cell_coords,
            windows: make_windows(weeks, t_lags, split_week),
            elevation: data.elevation.clone(),
            zones: data.zones.clone(),
            dates,
        })
    }

    pub fn weeks(&self) -> usize {
        self.dates.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_locations.len()
    }

    pub fn train_windows(&self) -> Vec<Window> {
        self.windows.iter().copied().filter(|w| w.partition == Partition::Train).collect()
    }

    pub fn test_windows(&self) -> Vec<Window> {
        self.windows.iter().copied().filter(|w| w.partition == Partition::Test).collect()
    }

    /// Context for predicting `target` with the given lag levels
    /// (`[lag][sensor]`, z-scores, oldest first).
    pub fn input_with_lags(&self, target: usize, lags_z: &[Vec<f64>]) -> Result<ModelInput<'_>> {
        let t = self.t_lags;
        if target < t || target >= self.weeks() {
            return Err(GwError::invalid(format!("target week {target} has no full history")));
        }
        if lags_z.len() != t {
            return Err(GwError::invalid(format!("{} lag rows, expected {t}", lags_z.len())));
        }
        let mut lag_coords = Vec::with_capacity(t * self.n_sensors());
        let mut lag_values = Vec::with_capacity(t * self.n_sensors());
        for (l, week) in (target - t..target).enumerate() {
            lag_coords.extend_from_slice(&self.sensor_coords[week]);
            lag_values.extend_from_slice(&lags_z[l]);
        }
        let frames = (target - t..=target).map(|f| &self.weather_inputs[f]).collect();
        let cell_coords = (target - t..=target)
            .flat_map(|f| self.cell_coords[f].iter().copied())
            .collect();
        Ok(ModelInput {
            lag_coords,
            lag_values,
            frames,
            cell_coords,
        })
    }

    /// Context using the recorded (gap-filled) lag levels.
    pub fn input(&self, target: usize) -> Result<ModelInput<'_>> {
        let t = self.t_lags;
        let lags: Vec<Vec<f64>> = (target.saturating_sub(t)..target).map(|w| self.values_z[w].clone()).collect();
        self.input_with_lags(target, &lags)
    }

    /// Sensor locations as queries at `week`.
    pub fn sensor_queries(&self, week: usize) -> Vec<AugmentedCoord> {
        self.sensor_coords[week].clone()
    }

    pub fn elevation_at(&self, lon: f64, lat: f64) -> f64 {
        self.elevation.sample(0, 0, lon, lat)
    }

    pub fn point(&self, lon: f64, lat: f64, week: usize) -> StPoint {
        StPoint {
            lon,
            lat,
            elevation: self.elevation_at(lon, lat),
            doy: self.doys[week],
        }
    }

    pub fn augment_points(&self, points: &[StPoint]) -> Result<Vec<AugmentedCoord>> {
        points.iter().map(|p| augment(p, &self.norm.coords)).collect()
    }

    /// Outer extent of the elevation raster.
    pub fn roi(&self) -> (f64, f64, f64, f64) {
        self.elevation.bounds()
    }
}

/// Writes a small text file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| GwError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| GwError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| GwError::io(path, e))
}
