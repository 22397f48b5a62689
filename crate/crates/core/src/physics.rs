//! Synthetic aquifer: an explicit finite-difference solver for
//! `∂h/∂t = D ∇²h + R` with fixed-head borders, and a dataset generator
//! whose true components are known.

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GridStack, SensorSeries, Zones};
use crate::error::{GwError, Result};
use crate::layers::GeoTransform;
use crate::losses::METERS_PER_DEGREE;
use crate::rng::{stream, Stream};

/// Interior five-point Laplacian by direct double loop; border entries are
/// zero. Rows step by `dy`, columns by `dx`.
pub fn laplacian_cells(h: &[f64], rows: usize, cols: usize, dx: f64, dy: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 1..rows.saturating_sub(1) {
        for c in 1..cols.saturating_sub(1) {
            let i = r * cols + c;
            let d2x = (h[i + 1] - 2.0 * h[i] + h[i - 1]) / (dx * dx);
            let d2y = (h[i + cols] - 2.0 * h[i] + h[i - cols]) / (dy * dy);
            out[i] = d2x + d2y;
        }
    }
    out
}

/// Spatial recipe of the source/sink term; the weekly field is
/// `zone·wet·storm + diffuse·wet·storm − wells·(dry + base) + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forcing {
    pub zone_pattern: Vec<f64>,
    pub well_pattern: Vec<f64>,
    pub recharge_amplitude: f64,
    pub diffuse_amplitude: f64,
    pub abstraction_amplitude: f64,
    pub abstraction_base: f64,
    pub offset: f64,
    /// Per-week seasonal wetness in `[0, 1]` and storm multiplier.
    pub wet: Vec<f64>,
    pub dry: Vec<f64>,
    pub storm: Vec<f64>,
}

impl Forcing {
    /// Positive (rain-driven) part of the forcing at `week`.
    pub fn rain(&self, week: usize) -> Vec<f64> {
        let k = self.wet[week] * self.storm[week];
        self.zone_pattern
            .iter()
            .map(|z| (self.recharge_amplitude * z + self.diffuse_amplitude) * k)
            .collect()
    }

    pub fn field(&self, week: usize) -> Vec<f64> {
        let rain = self.rain(week);
        let a = self.abstraction_amplitude * (self.dry[week] + self.abstraction_base);
        rain.iter()
            .zip(&self.well_pattern)
            .map(|(r, w)| r - a * w + self.offset)
            .collect()
    }

    pub fn weeks(&self) -> usize {
        self.wet.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aquifer {
    pub rows: usize,
    pub cols: usize,
    pub dx: f64,
    pub dy: f64,
    pub d_field: Vec<f64>,
    /// Full grid of heads; only the border entries are used as fixed heads.
    pub boundary: Vec<f64>,
    pub initial_h: Vec<f64>,
    pub forcing: Forcing,
}

impl Aquifer {
    /// Checks positivity and the explicit-step stability bound
    /// `D (1/dx² + 1/dy²) ≤ ½` at every cell (one-week step).
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.d_field.len() != n || self.boundary.len() != n || self.initial_h.len() != n {
            return Err(GwError::invalid("aquifer fields do not match the grid"));
        }
        let k = 1.0 / (self.dx * self.dx) + 1.0 / (self.dy * self.dy);
        let mut worst: Option<(usize, f64)> = None;
        for (i, d) in self.d_field.iter().enumerate() {
            if *d < 0.0 {
                return Err(GwError::invalid(format!("negative diffusivity at cell {i}")));
            }
            let v = d * k;
            if v > 0.5 && worst.is_none_or(|(_, w)| v > w) {
                worst = Some((i, v));
            }
        }
        if let Some((i, v)) = worst {
            return Err(GwError::Cfl {
                row: i / self.cols,
                col: i % self.cols,
                value: v,
            });
        }
        Ok(())
    }

    fn is_border(&self, i: usize) -> bool {
        let (r, c) = (i / self.cols, i % self.cols);
        r == 0 || c == 0 || r + 1 == self.rows || c + 1 == self.cols
    }

    /// Diffusion increment and source term that move `h_prev` to `week`.
    /// Both are zero on the border.
    pub fn component_truth(&self, h_prev: &[f64], week: usize) -> (Vec<f64>, Vec<f64>) {
        let lap = laplacian_cells(h_prev, self.rows, self.cols, self.dx, self.dy);
        let mut delta: Vec<f64> = lap.iter().zip(&self.d_field).map(|(l, d)| d * l).collect();
        let mut rech = self.forcing.field(week);
        for i in 0..delta.len() {
            if self.is_border(i) {
                delta[i] = 0.0;
                rech[i] = 0.0;
            }
        }
        (delta, rech)
    }

    /// One explicit Euler week: `h + D ∇²h + R(week)` inside, fixed heads on
    /// the border.
    pub fn step(&self, h_prev: &[f64], week: usize) -> Vec<f64> {
        let (delta, rech) = self.component_truth(h_prev, week);
        (0..h_prev.len())
            .map(|i| {
                if self.is_border(i) {
                    self.boundary[i]
                } else {
                    h_prev[i] + delta[i] + rech[i]
                }
            })
            .collect()
    }

    /// Steps with the zero forcing (used for solver property checks).
    pub fn step_unforced(&self, h_prev: &[f64]) -> Vec<f64> {
        let lap = laplacian_cells(h_prev, self.rows, self.cols, self.dx, self.dy);
        (0..h_prev.len())
            .map(|i| {
                if self.is_border(i) {
                    self.boundary[i]
                } else {
                    h_prev[i] + self.d_field[i] * lap[i]
                }
            })
            .collect()
    }
}

/// Settings of the synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub weeks: usize,
    pub spinup_weeks: usize,
    pub n_sensors: usize,
    pub noise_sd: f64,
    pub missing_rate: f64,
    pub mean_gap_weeks: f64,
    pub weather_rows: usize,
    pub weather_cols: usize,
    pub center_lon: f64,
    pub center_lat: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub start_date: NaiveDate,
    pub recharge_amplitude: f64,
    pub diffuse_amplitude: f64,
    pub abstraction_amplitude: f64,
    pub n_wells: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            spacing_m: 2000.0,
            weeks: 1200,
            spinup_weeks: 520,
            n_sensors: 28,
            noise_sd: 0.02,
            missing_rate: 0.23,
            mean_gap_weeks: 8.0,
            weather_rows: 8,
            weather_cols: 8,
            center_lon: 7.3,
            center_lat: 44.8,
            d_min: 1e5,
            d_max: 8e5,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            recharge_amplitude: 0.12,
            diffuse_amplitude: 0.03,
            abstraction_amplitude: 0.10,
            n_wells: 6,
        }
    }
}

/// Generated data plus the per-week truth stack (channels `delta_gw`,
/// `recharge`, `diffusivity`, `head` on the aquifer grid).
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: GridStack,
    pub aquifer: Aquifer,
    pub sensor_cells: Vec<(usize, usize)>,
}

pub const TRUTH_DELTA: usize = 0;
pub const TRUTH_RECHARGE: usize = 1;
pub const TRUTH_DIFFUSIVITY: usize = 2;
pub const TRUTH_HEAD: usize = 3;

fn gaussian(r: f64, c: f64, r0: f64, c0: f64, s: f64) -> f64 {
    (-((r - r0).powi(2) + (c - c0).powi(2)) / (2.0 * s * s)).exp()
}

impl SimConfig {
    pub fn geo(&self) -> GeoTransform {
        let dlat = self.spacing_m / METERS_PER_DEGREE;
        let dlon = self.spacing_m / (METERS_PER_DEGREE * self.center_lat.to_radians().cos());
        GeoTransform {
            lon0: self.center_lon - 0.5 * self.cols as f64 * dlon,
            lat0: self.center_lat - 0.5 * self.rows as f64 * dlat,
            dlon,
            dlat,
        }
    }

    pub fn dates(&self, weeks: usize) -> Vec<NaiveDate> {
        (0..weeks)
            .map(|w| self.start_date + Duration::weeks(w as i64))
            .collect()
    }

    /// Radially symmetric diffusivity bump centred on the grid.
    pub fn d_field(&self) -> Vec<f64> {
        let (rc, cc) = ((self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0);
        let s = 0.3 * self.rows.min(self.cols) as f64;
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.d_min + (self.d_max - self.d_min) * gaussian(r as f64, c as f64, rc, cc, s));
            }
        }
        out
    }

    /// Planar regional head surface, meters.
    fn base_head(&self) -> Vec<f64> {
        let km = self.spacing_m / 1000.0;
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(250.0 + 0.35 * c as f64 * km - 0.25 * r as f64 * km);
            }
        }
        out
    }

    fn seasonal(&self, rng: &mut ChaCha8Rng, total: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let start = self.start_date - Duration::weeks(self.spinup_weeks as i64);
        let noise = Normal::new(0.0, 0.45).expect("valid sd");
        let mut wet = Vec::with_capacity(total);
        let mut dry = Vec::with_capacity(total);
        let mut storm = Vec::with_capacity(total);
        for w in 0..total {
            let date = start + Duration::weeks(w as i64);
            let a = 2.0 * std::f64::consts::PI * date.ordinal() as f64 / 365.25;
            let s = (a - 0.6).sin();
            wet.push(s.max(0.0));
            dry.push((-s).max(0.0));
            storm.push((noise.sample(rng) - 0.5 * 0.45f64.powi(2)).exp());
        }
        (wet, dry, storm)
    }

    /// Builds the aquifer, including the spin-up weeks at the front of the
    /// forcing series.
    pub fn aquifer(&self, rng: &mut ChaCha8Rng) -> Result<Aquifer> {
        let (rows, cols) = (self.rows, self.cols);
        let total = self.spinup_weeks + self.weeks;
        let (wet, dry, storm) = self.seasonal(rng, total);
        let s = 0.14 * rows.min(cols) as f64;
        let mut zone = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (rf, cf) = (r as f64, c as f64);
                let nw = gaussian(rf, cf, 0.78 * rows as f64, 0.2 * cols as f64, s);
                let se = gaussian(rf, cf, 0.22 * rows as f64, 0.8 * cols as f64, s);
                zone.push(nw + se);
            }
        }
        let mut wells = vec![0.0; rows * cols];
        for _ in 0..self.n_wells {
            let r0 = rng.random_range(0.3..0.7) * rows as f64;
            let c0 = rng.random_range(0.15..0.85) * cols as f64;
            for r in 0..rows {
                for c in 0..cols {
                    wells[r * cols + c] += gaussian(r as f64, c as f64, r0, c0, 1.5);
                }
            }
        }
        let mut forcing = Forcing {
            zone_pattern: zone,
            well_pattern: wells,
            recharge_amplitude: self.recharge_amplitude,
            diffuse_amplitude: self.diffuse_amplitude,
            abstraction_amplitude: self.abstraction_amplitude,
            abstraction_base: 0.0,
            offset: 0.0,
            wet,
            dry,
            storm,
        };
        // zero net forcing over space and time
        let mut sum = 0.0;
        for w in 0..total {
            sum += forcing.field(w).iter().sum::<f64>();
        }
        forcing.offset = -sum / (total * rows * cols) as f64;
        let base = self.base_head();
        let aq = Aquifer {
            rows,
            cols,
            dx: self.spacing_m,
            dy: self.spacing_m,
            d_field: self.d_field(),
            boundary: base.clone(),
            initial_h: base,
            forcing,
        };
        aq.validate()?;
        Ok(aq)
    }

    /// Runs the solver and emits the dataset files' contents.
    pub fn synthesize(&self, seed: u64) -> Result<Synthetic> {
        if self.weeks < 200 {
            return Err(GwError::invalid(format!("{} weeks is too short, at least 200 required", self.weeks)));
        }
        if self.rows % self.weather_rows != 0 || self.cols % self.weather_cols != 0 {
            return Err(GwError::invalid("weather grid must tile the aquifer grid"));
        }
        let mut rng = stream(seed, Stream::Data);
        let aq = self.aquifer(&mut rng)?;
        let (rows, cols) = (self.rows, self.cols);
        let mut cells = Vec::new();
        while cells.len() < self.n_sensors {
            let cell = (rng.random_range(2..rows - 2), rng.random_range(2..cols - 2));
            if !cells.contains(&cell) {
                cells.push(cell);
            }
        }
        let (dataset, truth, aquifer) = synthesize_with(self, aq, &cells, &mut rng)?;
        Ok(Synthetic {
            dataset,
            truth,
            aquifer,
            sensor_cells: cells,
        })
    }
}

fn elevation_field(cfg: &SimConfig, base: &[f64]) -> Vec<f64> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 / rows as f64, c as f64 / cols as f64);
            let relief = 12.0 + 8.0 * (3.0 * x).sin() * (2.0 * y + 0.5).cos() + 10.0 * y;
            out.push(base[r * cols + c] + relief);
        }
    }
    out
}

/// Two-state gap process with the requested long-run missing fraction and
/// geometric gap lengths.
fn missing_mask(n: usize, rate: f64, mean_gap: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![true; n];
    }
    let mean_obs = mean_gap * (1.0 - rate) / rate;
    let (p_start, p_end) = (1.0 / mean_obs, 1.0 / mean_gap);
    let mut in_gap = rng.random::<f64>() < rate;
    let mut observed = Vec::with_capacity(n);
    for _ in 0..n {
        observed.push(!in_gap);
        let u: f64 = rng.random();
        in_gap = if in_gap { u >= p_end } else { u < p_start };
    }
    if !observed.iter().any(|o| *o) {
        let i = rng.random_range(0..n);
        observed[i] = true;
    }
    observed
}

/// Merges horizontal runs of zone cells into rectangles (cell edges).
fn zone_rectangles(mask: &[bool], rows: usize, cols: usize, geo: &GeoTransform) -> Zones {
    let mut polygons = Vec::new();
    for r in 0..rows {
        let mut c = 0;
        while c < cols {
            if !mask[r * cols + c] {
                c += 1;
                continue;
            }
            let start = c;
            while c < cols && mask[r * cols + c] {
                c += 1;
            }
            let lon_a = geo.lon0 + start as f64 * geo.dlon;
            let lon_b = geo.lon0 + c as f64 * geo.dlon;
            let lat_a = geo.lat0 + r as f64 * geo.dlat;
            let lat_b = geo.lat0 + (r + 1) as f64 * geo.dlat;
            polygons.push(vec![[lon_a, lat_a], [lon_b, lat_a], [lon_b, lat_b], [lon_a, lat_b]]);
        }
    }
    Zones { polygons }
}

fn synthesize_with(
    cfg: &SimConfig,
    aq: Aquifer,
    sensor_cells: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, GridStack, Aquifer)> {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let n = rows * cols;
    let geo = cfg.geo();
    let weeks = cfg.weeks;
    let dates = cfg.dates(weeks);
    let mut h = aq.initial_h.clone();
    for w in 0..cfg.spinup_weeks {
        h = aq.step(&h, w);
    }
    let mut truth = Vec::with_capacity(weeks * 4 * n);
    let mut heads = Vec::with_capacity(weeks);
    let mut mean_forcing = vec![0.0; n];
    for w in 0..weeks {
        let fw = cfg.spinup_weeks + w;
        let (delta, rech) = aq.component_truth(&h, fw);
        h = aq.step(&h, fw);
        truth.extend_from_slice(&delta);
        truth.extend_from_slice(&rech);
        truth.extend_from_slice(&aq.d_field);
        truth.extend_from_slice(&h);
        for (m, f) in mean_forcing.iter_mut().zip(aq.forcing.field(fw)) {
            *m += f / weeks as f64;
        }
        heads.push(h.clone());
    }
    let truth = GridStack {
        frames: weeks,
        channels: 4,
        height: rows,
        width: cols,
        geo,
        channel_names: vec!["delta_gw".into(), "recharge".into(), "diffusivity".into(), "head".into()],
        dates: dates.clone(),
        data: truth,
    };

    let elevation = elevation_field(cfg, &aq.boundary);
    let elev_grid = GridStack {
        frames: 1,
        channels: 1,
        height: rows,
        width: cols,
        geo,
        channel_names: vec!["elevation".into()],
        dates: vec![],
        data: elevation.clone(),
    };

    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).map_err(|e| GwError::invalid(e.to_string()))?;
    let mut sensors = Vec::with_capacity(sensor_cells.len());
    for (k, &(r, c)) in sensor_cells.iter().enumerate() {
        if r >= rows || c >= cols {
            return Err(GwError::invalid(format!("sensor {k} at ({r}, {c}) lies off the grid")));
        }
        let mask = missing_mask(weeks, cfg.missing_rate, cfg.mean_gap_weeks, rng);
        let raw: Vec<Option<f64>> = (0..weeks)
            .map(|w| {
                let e = if cfg.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
                mask[w].then_some(heads[w][r * cols + c] + e)
            })
            .collect();
        let (lon, lat) = geo.center(r, c);
        sensors.push(SensorSeries::from_raw(
            format!("S{:02}", k + 1),
            lon,
            lat,
            elevation[r * cols + c],
            dates.clone(),
            &raw,
        )?);
    }

    let weather = weather_video(cfg, &aq, &elevation, &dates, rng)?;
    let zone_mask: Vec<bool> = mean_forcing.iter().map(|m| *m > 0.0).collect();
    let zones = zone_rectangles(&zone_mask, rows, cols, &geo);
    Ok((
        Dataset {
            sensors,
            weather,
            elevation: elev_grid,
            zones,
        },
        truth,
        aq,
    ))
}

fn block_mean(field: &[f64], cols: usize, br: usize, bc: usize, fr: usize, fc: usize) -> f64 {
    let mut s = 0.0;
    for r in br * fr..(br + 1) * fr {
        for c in bc * fc..(bc + 1) * fc {
            s += field[r * cols + c];
        }
    }
    s / (fr * fc) as f64
}

/// Channels: precipitation (the rain part of the forcing), temperature,
/// evaporation, snowmelt; block-averaged onto the coarse weather grid.
fn weather_video(
    cfg: &SimConfig,
    aq: &Aquifer,
    elevation: &[f64],
    dates: &[NaiveDate],
    rng: &mut ChaCha8Rng,
) -> Result<GridStack> {
    let (wr, wc) = (cfg.weather_rows, cfg.weather_cols);
    let (fr, fc) = (cfg.rows / wr, cfg.cols / wc);
    let base = cfg.geo();
    let geo = GeoTransform {
        lon0: base.lon0,
        lat0: base.lat0,
        dlon: base.dlon * fc as f64,
        dlat: base.dlat * fr as f64,
    };
    let mut elev_blocks = Vec::with_capacity(wr * wc);
    for r in 0..wr {
        for c in 0..wc {
            elev_blocks.push(block_mean(elevation, cfg.cols, r, c, fr, fc));
        }
    }
    let elev_mean = elev_blocks.iter().sum::<f64>() / elev_blocks.len() as f64;
    let tnoise = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = wr * wc;
    let mut data = Vec::with_capacity(dates.len() * 4 * plane);
    for (w, date) in dates.iter().enumerate() {
        let fw = cfg.spinup_weeks + w;
        let rain = aq.forcing.rain(fw);
        let a = 2.0 * std::f64::consts::PI * date.ordinal() as f64 / 365.25;
        let t_anom = tnoise.sample(rng);
        for r in 0..wr {
            for c in 0..wc {
                data.push(block_mean(&rain, cfg.cols, r, c, fr, fc));
            }
        }
        for e in &elev_blocks {
            data.push(12.0 - 10.0 * a.cos() - 0.0065 * (e - elev_mean) + t_anom);
        }
        let evap = 0.02 * (aq.forcing.dry[fw] + 0.3);
        for e in &elev_blocks {
            data.push(evap * (1.0 - 0.001 * (e - elev_mean)));
        }
        let spring = (-((date.ordinal() as f64 - 100.0) / 20.0).powi(2)).exp();
        for e in &elev_blocks {
            data.push(0.01 * spring * aq.forcing.storm[fw] * (1.0 + (e - elev_mean) / 50.0).max(0.0));
        }
    }
    let g = GridStack {
        frames: dates.len(),
        channels: 4,
        height: wr,
        width: wc,
        geo,
        channel_names: vec![
            "precipitation".into(),
            "temperature".into(),
            "evaporation".into(),
            "snowmelt".into(),
        ],
        dates: dates.to_vec(),
        data,
    };
    g.check()?;
    Ok(g)
}
