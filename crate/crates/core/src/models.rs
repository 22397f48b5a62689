//! Model variants: the attention baseline and the physics-guided family.

use gwnet_autodiff::{Graph, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{KvDropout, Stai, Stsa};
use crate::data::{ModelInput, NormStats, Prepared};
use crate::error::{GwError, Result};
use crate::layers::{coord_tensor, instance_norm, leaky_relu, AugmentedCoord, Film, Linear, StCEmb, StVEmbAuto, StVEmbWeather, COORD_DIM};
use crate::losses::ControlGrid;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "STAINet")]
    Stainet,
    #[serde(rename = "IB")]
    Ib,
    #[serde(rename = "ILB")]
    Ilb,
    #[serde(rename = "ILRB")]
    Ilrb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Stainet, Variant::Ib, Variant::Ilb, Variant::Ilrb];

    pub fn is_physics(self) -> bool {
        self != Variant::Stainet
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Stainet => "STAINet",
            Variant::Ib => "IB",
            Variant::Ilb => "ILB",
            Variant::Ilrb => "ILRB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| GwError::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub t_lags: usize,
    pub kv_dropout: f64,
    pub trunk_depth: usize,
    pub weather_channels: usize,
    /// Diffusivity scale in m²/week applied after the softplus.
    pub d_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ilb,
            d_model: 32,
            n_heads: 8,
            t_lags: 4,
            kv_dropout: 0.15,
            trunk_depth: 4,
            weather_channels: 4,
            d_scale: 1e5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AutoBranch {
    vemb: StVEmbAuto,
    key_cemb: StCEmb,
    stsa_in: Stsa,
    query_cemb: StCEmb,
    stai: Stai,
    film_stai: Film,
    stsa_out: Stsa,
    film_out: Film,
}

#[derive(Debug, Clone, Copy)]
struct WeatherBranch {
    conv: StVEmbWeather,
    key_cemb: StCEmb,
    query_cemb: StCEmb,
    stai: Stai,
    film: Film,
}

#[derive(Debug, Clone, Copy)]
struct DBlock {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Debug, Clone)]
enum Head {
    Fused {
        fuse: Linear,
        trunk: Vec<Stsa>,
        out: Linear,
    },
    Physics {
        lag: Linear,
        residual: Linear,
        d_block: DBlock,
        delta: [Stsa; 2],
        divergence: Linear,
    },
}

/// Key-side encodings of one input window, shared by every query set.
pub struct Encoded<'g> {
    pub auto_keys: Var<'g>,
    pub auto_values: Var<'g>,
    pub weather_keys: Var<'g>,
    pub weather_values: Var<'g>,
}

/// Query-side outputs. Levels and components are z-scaled; `d_hat` is in
/// m²/week.
pub struct Outputs<'g> {
    pub h: Var<'g>,
    pub lag: Option<Var<'g>>,
    pub delta: Option<Var<'g>>,
    pub residual: Option<Var<'g>>,
    pub d_hat: Option<Var<'g>>,
}

/// Predictions in physical units, one entry per query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub h: Vec<f64>,
    pub lag: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub residual: Option<Vec<f64>>,
    pub diffusivity: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    auto: AutoBranch,
    weather: WeatherBranch,
    head: Head,
}

fn col<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let n = v.numel();
    Ok(v.reshape(vec![n, 1])?)
}

impl Model {
    /// Builds a model with parameters drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (d, h) = (config.d_model, config.n_heads);
        let auto = AutoBranch {
            vemb: StVEmbAuto::new(&mut s, "auto.vemb", d, rng)?,
            key_cemb: StCEmb::new(&mut s, "auto.key_cemb", d, rng)?,
            stsa_in: Stsa::new(&mut s, "auto.stsa_in", d, h, rng)?,
            query_cemb: StCEmb::new(&mut s, "auto.query_cemb", d, rng)?,
            stai: Stai::new(&mut s, "auto.stai", d, h, rng)?,
            film_stai: Film::new(&mut s, "auto.film_stai", d, rng)?,
            stsa_out: Stsa::new(&mut s, "auto.stsa_out", d, h, rng)?,
            film_out: Film::new(&mut s, "auto.film_out", d, rng)?,
        };
        let weather = WeatherBranch {
            conv: StVEmbWeather::new(&mut s, "weather.vemb", config.weather_channels + COORD_DIM, d, rng)?,
            key_cemb: StCEmb::new(&mut s, "weather.key_cemb", d, rng)?,
            query_cemb: StCEmb::new(&mut s, "weather.query_cemb", d, rng)?,
            stai: Stai::new(&mut s, "weather.stai", d, h, rng)?,
            film: Film::new(&mut s, "weather.film", d, rng)?,
        };
        let head = if config.variant.is_physics() {
            Head::Physics {
                lag: Linear::new(&mut s, "head.lag", d, 1, rng)?,
                residual: Linear::new(&mut s, "head.residual", d, 1, rng)?,
                d_block: DBlock {
                    l1: Linear::new(&mut s, "d_block.l1", 3, d, rng)?,
                    l2: Linear::new(&mut s, "d_block.l2", d, d, rng)?,
                    l3: Linear::new(&mut s, "d_block.l3", d, 1, rng)?,
                },
                delta: [
                    Stsa::new(&mut s, "delta.stsa1", d, h, rng)?,
                    Stsa::new(&mut s, "delta.stsa2", d, h, rng)?,
                ],
                divergence: Linear::new(&mut s, "delta.divergence", d, 1, rng)?,
            }
        } else {
            let trunk = (0..config.trunk_depth)
                .map(|i| Stsa::new(&mut s, &format!("trunk.stsa{i}"), d, h, rng))
                .collect::<Result<_>>()?;
            Head::Fused {
                fuse: Linear::new(&mut s, "head.fuse", 2 * d, d, rng)?,
                trunk,
                out: Linear::new(&mut s, "head.out", d, 1, rng)?,
            }
        };
        Ok(Self {
            config,
            params: s,
            auto,
            weather,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Trainable scalars per top-level block (first two name components).
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            let key: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some(e) => e.1 += t.numel(),
                None => out.push((key, t.numel())),
            }
        }
        out
    }

    /// Weights of the embedding layers as `in × out` matrices.
    pub fn embedding_weights<'g>(&self, g: &'g Graph) -> Result<Vec<Var<'g>>> {
        let p = &self.params;
        let mut out = Vec::new();
        for lin in [
            self.auto.vemb.0,
            self.auto.key_cemb.0,
            self.auto.query_cemb.0,
            self.weather.key_cemb.0,
            self.weather.query_cemb.0,
        ] {
            out.push(g.param(p, lin.w));
        }
        let c = self.weather.conv;
        let w = g.param(p, c.w).reshape(vec![c.dim, c.in_channels * 9])?.t()?;
        out.push(w);
        Ok(out)
    }

    /// Encodes the lagged levels and weather frames. `dropout` enables the
    /// training-time key-value dropout of the first self-attention module.
    pub fn encode<'g>(
        &self,
        g: &'g Graph,
        input: &ModelInput<'_>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded<'g>> {
        let p = &self.params;
        if input.lag_coords.is_empty() {
            return Err(GwError::invalid("encode: no lagged sensor points"));
        }
        let a = &self.auto;
        let lag_coords = g.constant(coord_tensor(&input.lag_coords));
        let vin = g.constant(StVEmbAuto::input_tensor(&input.lag_values, &input.lag_coords)?);
        let values = a.vemb.forward(g, p, vin)?;
        let auto_values = match dropout {
            Some(rng) => {
                let mut d = KvDropout {
                    rate: self.config.kv_dropout,
                    rng,
                };
                a.stsa_in.forward(g, p, values, Some(&mut d))?
            }
            None => a.stsa_in.forward(g, p, values, None)?,
        };
        let auto_keys = a.key_cemb.forward(g, p, lag_coords)?;

        let w = &self.weather;
        let mut cells = Vec::with_capacity(input.frames.len());
        for f in &input.frames {
            cells.push(w.conv.forward(g, p, g.constant((*f).clone()))?);
        }
        let weather_values = Var::concat(&cells, 0)?;
        if weather_values.shape()[0] != input.cell_coords.len() {
            return Err(GwError::invalid(format!(
                "encode: {} weather cells but {} cell coordinates",
                weather_values.shape()[0],
                input.cell_coords.len()
            )));
        }
        let weather_keys = w.key_cemb.forward(g, p, g.constant(coord_tensor(&input.cell_coords)))?;
        Ok(Encoded {
            auto_keys,
            auto_values,
            weather_keys,
            weather_values,
        })
    }

    /// Autoregressive-branch hidden state at the queries.
    fn auto_query<'g>(&self, g: &'g Graph, enc: &Encoded<'g>, q: Var<'g>) -> Result<Var<'g>> {
        let (p, a) = (&self.params, &self.auto);
        let qe = a.query_cemb.forward(g, p, q)?;
        let h = a.stai.forward(g, p, qe, enc.auto_keys, enc.auto_values)?;
        let h = a.film_stai.forward(g, p, h, q)?;
        let h = a.stsa_out.forward(g, p, h, None)?;
        a.film_out.forward(g, p, h, q)
    }

    fn weather_query<'g>(&self, g: &'g Graph, enc: &Encoded<'g>, q: Var<'g>) -> Result<Var<'g>> {
        let (p, w) = (&self.params, &self.weather);
        let qe = w.query_cemb.forward(g, p, q)?;
        let h = w.stai.forward(g, p, qe, enc.weather_keys, enc.weather_values)?;
        w.film.forward(g, p, h, q)
    }

    /// Positive diffusivity per query from `(lon_z, lat_z, elev_z)` only.
    fn diffusivity<'g>(&self, g: &'g Graph, block: &DBlock, q: Var<'g>) -> Result<Var<'g>> {
        let p = &self.params;
        let x = q.slice(1, 0, 3)?;
        let x = leaky_relu(instance_norm(block.l1.forward(g, p, x)?)?);
        let x = leaky_relu(instance_norm(block.l2.forward(g, p, x)?)?);
        Ok(block.l3.forward(g, p, x)?.softplus().mul_scalar(self.config.d_scale))
    }

    /// Evaluates the query side for a set of points.
    pub fn decode<'g>(
        &self,
        g: &'g Graph,
        enc: &Encoded<'g>,
        queries: &[AugmentedCoord],
    ) -> Result<Outputs<'g>> {
        if queries.is_empty() {
            return Err(GwError::invalid("decode: empty query set"));
        }
        let p = &self.params;
        let q = g.constant(coord_tensor(queries));
        let auto = self.auto_query(g, enc, q)?;
        let weather = self.weather_query(g, enc, q)?;
        match &self.head {
            Head::Fused { fuse, trunk, out } => {
                let mut x = fuse.forward(g, p, Var::concat(&[auto, weather], 1)?)?;
                for s in trunk {
                    x = s.forward(g, p, x, None)?;
                }
                Ok(Outputs {
                    h: out.forward(g, p, x)?,
                    lag: None,
                    delta: None,
                    residual: None,
                    d_hat: None,
                })
            }
            Head::Physics {
                lag,
                residual,
                d_block,
                delta,
                divergence,
            } => {
                let lag_z = lag.forward(g, p, auto)?;
                let res_z = residual.forward(g, p, weather)?;
                let d_hat = self.diffusivity(g, d_block, q)?;
                let mut x = auto;
                for s in delta {
                    x = s.forward(g, p, x, None)?;
                }
                // divergence in z per m², scaled so that D̂ · div is O(1)
                let div = divergence
                    .forward(g, p, x)?
                    .mul_scalar(1.0 / self.config.d_scale);
                let delta_z = d_hat.mul(div)?;
                let h = lag_z.add(delta_z)?.add(res_z)?;
                Ok(Outputs {
                    h,
                    lag: Some(lag_z),
                    delta: Some(delta_z),
                    residual: Some(res_z),
                    d_hat: Some(d_hat),
                })
            }
        }
    }

    /// Inference-mode forward pass in physical units.
    pub fn predict(
        &self,
        input: &ModelInput<'_>,
        queries: &[AugmentedCoord],
        norm: &NormStats,
    ) -> Result<PredictionBundle> {
        let g = Graph::new();
        let enc = self.encode(&g, input, None)?;
        let out = self.decode(&g, &enc, queries)?;
        Ok(to_bundle(&out, norm))
    }

    /// Replaces the diffusivity scale after construction.
    pub fn set_d_scale(&mut self, d_scale: f64) {
        self.config.d_scale = d_scale;
    }

    pub fn load_params(&mut self, named: &[NamedTensor]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(GwError::invalid(format!(
                "checkpoint holds {} tensors, model has {}",
                named.len(),
                self.params.len()
            )));
        }
        for nt in named {
            let id = self
                .params
                .id(&nt.name)
                .ok_or_else(|| GwError::invalid(format!("unknown parameter `{}`", nt.name)))?;
            if self.params.tensor(id).shape() != nt.shape.as_slice() {
                return Err(GwError::invalid(format!(
                    "parameter `{}` has shape {:?}, checkpoint {:?}",
                    nt.name,
                    self.params.tensor(id).shape(),
                    nt.shape
                )));
            }
            self.params.set_data(id, &nt.data)?;
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }
}

fn values(v: &Var<'_>) -> Vec<f64> {
    v.value()
}

/// Converts z-scaled outputs to meters: levels via `σ·z + μ`, increments
/// via `σ` alone. For physics variants `h` is the sum of the converted
/// components.
pub fn to_bundle(out: &Outputs<'_>, norm: &NormStats) -> PredictionBundle {
    let s = norm.gwl;
    match (&out.lag, &out.delta, &out.residual, &out.d_hat) {
        (Some(l), Some(d), Some(r), Some(dh)) => {
            let lag: Vec<f64> = values(l).into_iter().map(|z| s.invert(z)).collect();
            let delta: Vec<f64> = values(d).into_iter().map(|z| z * s.std).collect();
            let residual: Vec<f64> = values(r).into_iter().map(|z| z * s.std).collect();
            let h = (0..lag.len()).map(|i| lag[i] + delta[i] + residual[i]).collect();
            PredictionBundle {
                h,
                lag: Some(lag),
                delta: Some(delta),
                residual: Some(residual),
                diffusivity: Some(values(dh)),
            }
        }
        _ => PredictionBundle {
            h: values(&out.h).into_iter().map(|z| s.invert(z)).collect(),
            lag: None,
            delta: None,
            residual: None,
            diffusivity: None,
        },
    }
}

/// The level output in meters as a graph node, `σ·h_z + μ`.
pub fn h_meters<'g>(h_z: Var<'g>, norm: &NormStats) -> Var<'g> {
    h_z.mul_scalar(norm.gwl.std).add_scalar(norm.gwl.mean)
}

pub fn as_column<'g>(v: Var<'g>) -> Result<Var<'g>> {
    col(v)
}

/// One named parameter tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.data.clone())?)
    }
}

/// Regular grid over the data extent at roughly `km` spacing.
pub fn map_grid(prepared: &Prepared, km: f64) -> Result<ControlGrid> {
    if !(km > 0.0) {
        return Err(GwError::invalid(format!("resolution {km} km must be positive")));
    }
    let b = prepared.roi();
    let lat_c = 0.5 * (b.2 + b.3);
    let width_km = (b.1 - b.0) * crate::losses::METERS_PER_DEGREE * lat_c.to_radians().cos() / 1000.0;
    let height_km = (b.3 - b.2) * crate::losses::METERS_PER_DEGREE / 1000.0;
    let cols = ((width_km / km).round() as usize).max(1);
    let rows = ((height_km / km).round() as usize).max(1);
    ControlGrid::over(b, rows, cols)
}

/// Joint prediction at every node of `grid` (row-major) for week `target`.
pub fn predict_dense_map(
    model: &Model,
    prepared: &Prepared,
    target: usize,
    grid: &ControlGrid,
) -> Result<PredictionBundle> {
    let (lon_min, lon_max, lat_min, lat_max) = prepared.roi();
    let tol = 1e-9;
    let outside = grid.lon_min < lon_min - tol
        || grid.lat_min < lat_min - tol
        || grid.lon_min + grid.cols as f64 * grid.dlon > lon_max + tol
        || grid.lat_min + grid.rows as f64 * grid.dlat > lat_max + tol;
    if outside {
        return Err(GwError::invalid("map grid extends beyond the region of interest"));
    }
    let input = prepared.input(target)?;
    let points = grid.points(|lon, lat| prepared.elevation_at(lon, lat), prepared.doys[target]);
    let queries = prepared.augment_points(&points)?;
    model.predict(&input, &queries, &prepared.norm)
}
