//! Embeddings and the small building blocks shared by every model variant.

use std::f64::consts::PI;

use gwnet_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GwError, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
/// Width of an augmented coordinate.
pub const COORD_DIM: usize = 5;

/// A location in space and season.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StPoint {
    pub lon: f64,
    pub lat: f64,
    pub elevation: f64,
    /// Day of year in `1..=366`.
    pub doy: u32,
}

/// Mean and standard deviation of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStat {
    pub mean: f64,
    pub std: f64,
}

impl ZStat {
    pub fn fit(name: &str, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Err(GwError::invalid(format!("no values to fit `{name}`")));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(GwError::ZeroVariance(name.to_string()));
        }
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Statistics used to z-score point coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordNorm {
    pub lon: ZStat,
    pub lat: ZStat,
    pub elevation: ZStat,
}

/// `[lon_z, lat_z, elev_z, sin(2π doy/366), cos(2π doy/366)]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedCoord(pub [f64; COORD_DIM]);

pub fn doy_encoding(doy: u32) -> Result<(f64, f64)> {
    if !(1..=366).contains(&doy) {
        return Err(GwError::invalid(format!("day of year {doy} outside 1..=366")));
    }
    let a = 2.0 * PI * doy as f64 / 366.0;
    Ok((a.sin(), a.cos()))
}

pub fn augment(p: &StPoint, norm: &CoordNorm) -> Result<AugmentedCoord> {
    let (s, c) = doy_encoding(p.doy)?;
    Ok(AugmentedCoord([
        norm.lon.apply(p.lon),
        norm.lat.apply(p.lat),
        norm.elevation.apply(p.elevation),
        s,
        c,
    ]))
}

pub fn augment_all(points: &[StPoint], norm: &CoordNorm) -> Result<Vec<AugmentedCoord>> {
    points.iter().map(|p| augment(p, norm)).collect()
}

/// Packs coordinates into an `n × 5` tensor.
pub fn coord_tensor(coords: &[AugmentedCoord]) -> Tensor {
    let data = coords.iter().flat_map(|c| c.0).collect();
    Tensor::new(vec![coords.len(), COORD_DIM], data).expect("n x 5 layout")
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Dense affine map `x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and biases drawn from `U(-1/√in, 1/√in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, bound))?,
        )?;
        let b = store.add(
            format!("{name}.bias"),
            Tensor::new(vec![fan_out], uniform(rng, fan_out, bound))?,
        )?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(x.matmul(w)?.add(b)?)
    }
}

/// Per-channel normalisation over the sequence (row) axis, no affine terms.
pub fn instance_norm<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let mu = x.mean_axis(0)?;
    let xc = x.sub(mu)?;
    let var = xc.square().mean_axis(0)?;
    Ok(xc.div(var.add_scalar(NORM_EPS).sqrt())?)
}

pub fn leaky_relu<'g>(x: Var<'g>) -> Var<'g> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// Feature-wise affine modulation conditioned on point coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Film {
    pub lin: Linear,
    pub dim: usize,
}

impl Film {
    /// The bias starts at `(γ, β) = (1, 0)`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let lin = Linear::new(store, name, COORD_DIM, 2 * dim, rng)?;
        let mut bias = vec![0.0; 2 * dim];
        bias[..dim].fill(1.0);
        store.set_data(lin.b, &bias)?;
        Ok(Self { lin, dim })
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        cond: Var<'g>,
    ) -> Result<Var<'g>> {
        let (xs, cs) = (x.shape(), cond.shape());
        if xs[0] != cs[0] {
            return Err(GwError::invalid(format!(
                "film: {} conditioning rows for {} feature rows",
                cs[0], xs[0]
            )));
        }
        let gb = self.lin.forward(g, store, cond)?;
        let gamma = gb.slice(1, 0, self.dim)?;
        let beta = gb.slice(1, self.dim, 2 * self.dim)?;
        Ok(gamma.mul(x)?.add(beta)?)
    }
}

/// Indices that survive key-value dropout. Each position is dropped with
/// probability `rate`; if all would go, one uniformly chosen position stays.
pub fn kv_keep_indices(n: usize, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GwError::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 || n == 0 {
        return Ok((0..n).collect());
    }
    let kept: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() >= rate).collect();
    if kept.is_empty() {
        return Ok(vec![rng.random_range(0..n)]);
    }
    Ok(kept)
}

/// Removes dropped positions from both streams (no rescaling).
pub fn dropout_kv<'g>(
    keys: Var<'g>,
    values: Var<'g>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, Var<'g>, Vec<usize>)> {
    let n = keys.shape()[0];
    if values.shape()[0] != n {
        return Err(GwError::invalid(format!(
            "dropout_kv: {n} keys but {} values",
            values.shape()[0]
        )));
    }
    let kept = kv_keep_indices(n, rate, training, rng)?;
    if kept.len() == n {
        return Ok((keys, values, kept));
    }
    Ok((keys.index_rows(&kept)?, values.index_rows(&kept)?, kept))
}

/// Coordinate embedding, `5 → d`.
#[derive(Debug, Clone, Copy)]
pub struct StCEmb(pub Linear);

impl StCEmb {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self(Linear::new(store, name, COORD_DIM, dim, rng)?))
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, coords: Var<'g>) -> Result<Var<'g>> {
        if coords.shape()[0] == 0 {
            return Err(GwError::invalid("st_cemb: empty coordinate set"));
        }
        self.0.forward(g, store, coords)
    }
}

/// Value embedding of a level reading, `[h_z ‖ coord] (6) → d`.
#[derive(Debug, Clone, Copy)]
pub struct StVEmbAuto(pub Linear);

impl StVEmbAuto {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self(Linear::new(store, name, COORD_DIM + 1, dim, rng)?))
    }

    /// Builds the `n × 6` input from level values and coordinates.
    pub fn input_tensor(values_z: &[f64], coords: &[AugmentedCoord]) -> Result<Tensor> {
        if values_z.len() != coords.len() {
            return Err(GwError::invalid("st_vemb_auto: values and coordinates differ in length"));
        }
        let mut data = Vec::with_capacity(values_z.len() * (COORD_DIM + 1));
        for (v, c) in values_z.iter().zip(coords) {
            if !v.is_finite() {
                return Err(GwError::invalid(format!("st_vemb_auto: non-finite level {v}")));
            }
            data.push(*v);
            data.extend_from_slice(&c.0);
        }
        Ok(Tensor::new(vec![values_z.len(), COORD_DIM + 1], data)?)
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, input: Var<'g>) -> Result<Var<'g>> {
        self.0.forward(g, store, input)
    }
}

/// Convolutional embedding of one weather frame.
#[derive(Debug, Clone, Copy)]
pub struct StVEmbWeather {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub dim: usize,
}

impl StVEmbWeather {
    /// `in_channels` counts the weather channels plus the 5 coordinate planes.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * 9;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![dim, in_channels, 3, 3], uniform(rng, dim * fan_in, bound))?,
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::new(vec![dim], uniform(rng, dim, bound))?)?;
        Ok(Self {
            w,
            b,
            in_channels,
            dim,
        })
    }

    /// `frame` is `[in_channels, H, W]`; the result is `(⌊H/2⌋·⌊W/2⌋) × d`
    /// in row-major cell order.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, frame: Var<'g>) -> Result<Var<'g>> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(GwError::invalid(format!(
                "st_vemb_weather: expected [{}, H, W] input, got {s:?}",
                self.in_channels
            )));
        }
        if s[1] < 2 || s[2] < 2 {
            return Err(GwError::invalid(format!(
                "st_vemb_weather: grid {}x{} smaller than the pooling window",
                s[1], s[2]
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let pooled = leaky_relu(frame.conv2d_same(w, Some(b))?).avg_pool2()?;
        let cells = (s[1] / 2) * (s[2] / 2);
        Ok(pooled.reshape(vec![self.dim, cells])?.t()?)
    }
}

/// Regular grid geometry: pixel `(row, col)` has its centre at
/// `(lon0 + (col + ½)·dlon, lat0 + (row + ½)·dlat)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub lon0: f64,
    pub lat0: f64,
    pub dlon: f64,
    pub dlat: f64,
}

impl GeoTransform {
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lon0 + (col as f64 + 0.5) * self.dlon,
            self.lat0 + (row as f64 + 0.5) * self.dlat,
        )
    }

    /// Fractional pixel-centre coordinates `(row, col)` of a location.
    pub fn fractional(&self, lon: f64, lat: f64) -> (f64, f64) {
        ((lat - self.lat0) / self.dlat - 0.5, (lon - self.lon0) / self.dlon - 0.5)
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            lon0: a[0],
            lat0: a[1],
            dlon: a[2],
            dlat: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.lon0, self.lat0, self.dlon, self.dlat]
    }
}

/// Centroids of the 2×2 pooled cells of an `h × w` grid. `elevation` holds
/// one value per pixel (row-major); each cell gets the mean over its block.
pub fn pooled_cells(
    geo: &GeoTransform,
    h: usize,
    w: usize,
    elevation: &[f64],
    doy: u32,
) -> Vec<StPoint> {
    let mut out = Vec::with_capacity((h / 2) * (w / 2));
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            let (mut lon, mut lat, mut el) = (0.0, 0.0, 0.0);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (r, c) = (2 * oy + dy, 2 * ox + dx);
                let (lo, la) = geo.center(r, c);
                lon += lo;
                lat += la;
                el += elevation[r * w + c];
            }
            out.push(StPoint {
                lon: lon / 4.0,
                lat: lat / 4.0,
                elevation: el / 4.0,
                doy,
            });
        }
    }
    out
}

/// Stacks weather channels (already normalised, `[C, H, W]`) with the five
/// per-pixel coordinate planes for the frame's day of year.
pub fn weather_input(
    channels: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geo: &GeoTransform,
    elevation: &[f64],
    doy: u32,
    norm: &CoordNorm,
) -> Result<Tensor> {
    if channels.len() != c * h * w || elevation.len() != h * w {
        return Err(GwError::invalid("weather_input: buffer sizes do not match the grid"));
    }
    let mut data = Vec::with_capacity((c + COORD_DIM) * h * w);
    data.extend_from_slice(channels);
    let mut planes = vec![vec![0.0; h * w]; COORD_DIM];
    for r in 0..h {
        for col in 0..w {
            let (lon, lat) = geo.center(r, col);
            let a = augment(
                &StPoint {
                    lon,
                    lat,
                    elevation: elevation[r * w + col],
                    doy,
                },
                norm,
            )?;
            for (k, plane) in planes.iter_mut().enumerate() {
                plane[r * w + col] = a.0[k];
            }
        }
    }
    for p in planes {
        data.extend(p);
    }
    Ok(Tensor::new(vec![c + COORD_DIM, h, w], data)?)
}
