//! Skill metrics, rollout prediction, seasonal-trend decomposition and the
//! report files built on them.

use std::fmt::Write as _;
use std::path::Path;

use gwnet_autodiff::Graph;
use serde::{Deserialize, Serialize};

use crate::data::{write_text, GridStack, Prepared};
use crate::error::{GwError, Result};
use crate::layers::StPoint;
use crate::losses::ControlGrid;
use crate::models::{to_bundle, Model, PredictionBundle};
use crate::physics::{TRUTH_DELTA, TRUTH_DIFFUSIVITY, TRUTH_RECHARGE};

/// Skill of one series. NSE and KGE are `None` when the truth is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub nbias: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub nse: Option<f64>,
    pub kge: Option<f64>,
}

impl MetricSet {
    /// Placeholder for a series with fewer than two observations.
    pub fn undefined() -> Self {
        Self {
            nbias: f64::NAN,
            rmse: f64::NAN,
            mape: f64::NAN,
            nse: None,
            kge: None,
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

/// Pearson correlation; `None` for fewer than two points or a constant
/// column.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Metrics over observed entries only.
pub fn metrics(h_true: &[f64], h_hat: &[f64], observed: &[bool]) -> Result<MetricSet> {
    if h_true.len() != h_hat.len() || h_true.len() != observed.len() {
        return Err(GwError::invalid("metrics: series lengths differ"));
    }
    let (t, p): (Vec<f64>, Vec<f64>) = h_true
        .iter()
        .zip(h_hat)
        .zip(observed)
        .filter(|(_, o)| **o)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    if t.len() < 2 {
        return Err(GwError::invalid(format!("metrics: {} observed entries, need 2", t.len())));
    }
    let n = t.len() as f64;
    let err: Vec<f64> = p.iter().zip(&t).map(|(a, b)| a - b).collect();
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let bias = err.iter().sum::<f64>() / n;
    let nbias = if range > 0.0 { bias / range } else { f64::NAN };
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mape = 100.0 * err.iter().zip(&t).map(|(e, h)| (e / h).abs()).sum::<f64>() / n;
    let var_t = variance(&t);
    let (nse, kge) = if var_t > 0.0 {
        let nse = 1.0 - err.iter().map(|e| e * e).sum::<f64>() / (var_t * n);
        let rho = pearson(&t, &p).unwrap_or(0.0);
        let alpha = variance(&p).sqrt() / var_t.sqrt();
        let beta = mean(&p) / mean(&t);
        let kge = 1.0 - ((rho - 1.0).powi(2) + (alpha - 1.0).powi(2) + (beta - 1.0).powi(2)).sqrt();
        (Some(nse), Some(kge))
    } else {
        (None, None)
    };
    Ok(MetricSet {
        nbias,
        rmse,
        mape,
        nse,
        kge,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Per-metric medians across sensors, skipping undefined entries.
pub fn medians(sets: &[MetricSet]) -> MetricSet {
    let col = |f: &dyn Fn(&MetricSet) -> Option<f64>| median(&sets.iter().filter_map(f).collect::<Vec<_>>());
    MetricSet {
        nbias: col(&|m| Some(m.nbias)).unwrap_or(f64::NAN),
        rmse: col(&|m| Some(m.rmse)).unwrap_or(f64::NAN),
        mape: col(&|m| Some(m.mape)).unwrap_or(f64::NAN),
        nse: col(&|m| m.nse),
        kge: col(&|m| m.kge),
    }
}

/// Interval at which recorded levels replace the model's own predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Steps(usize),
    Infinite,
}

impl Horizon {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "∞" => Ok(Horizon::Infinite),
            t => {
                let n: usize = t
                    .parse()
                    .map_err(|_| GwError::invalid(format!("horizon `{s}` is not a count or `inf`")))?;
                if n == 0 {
                    return Err(GwError::invalid("horizon must be at least 1"));
                }
                Ok(Horizon::Steps(n))
            }
        }
    }

    pub fn label(self) -> String {
        match self {
            Horizon::Steps(n) => n.to_string(),
            Horizon::Infinite => "inf".into(),
        }
    }
}

/// Sensor predictions for consecutive target weeks.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub weeks: Vec<usize>,
    /// `[step][sensor]`, meters.
    pub predictions: Vec<PredictionBundle>,
}

impl Rollout {
    /// Predicted level of sensor `j` over the rollout.
    pub fn series(&self, j: usize) -> Vec<f64> {
        self.predictions.iter().map(|b| b.h[j]).collect()
    }
}

/// Prediction at the sensors for `target` with explicit lag rows, returning
/// the bundle and the level in z-units.
fn predict_sensors(model: &Model, prepared: &Prepared, target: usize, lags: &[Vec<f64>]) -> Result<(PredictionBundle, Vec<f64>)> {
    let input = prepared.input_with_lags(target, lags)?;
    let g = Graph::new();
    let enc = model.encode(&g, &input, None)?;
    let out = model.decode(&g, &enc, &prepared.sensor_queries(target))?;
    Ok((to_bundle(&out, &prepared.norm), out.h.value()))
}

/// Predicts targets `start..end`. Recorded levels seed the lags at `start`
/// and again every `horizon` steps; in between, predicted levels stand in
/// for the recorded ones.
pub fn rollout(model: &Model, prepared: &Prepared, start: usize, end: usize, horizon: Horizon) -> Result<Rollout> {
    if let Horizon::Steps(0) = horizon {
        return Err(GwError::invalid("horizon must be at least 1"));
    }
    let t = prepared.t_lags;
    if start < t || end > prepared.weeks() || start >= end {
        return Err(GwError::invalid(format!("rollout range {start}..{end} is not valid")));
    }
    let mut history = prepared.values_z.clone();
    let mut reseed = start;
    let mut out = Rollout {
        weeks: Vec::with_capacity(end - start),
        predictions: Vec::with_capacity(end - start),
    };
    for (k, target) in (start..end).enumerate() {
        if let Horizon::Steps(h) = horizon {
            if k % h == 0 {
                reseed = target;
            }
        }
        let lags: Vec<Vec<f64>> = (target - t..target)
            .map(|w| {
                if w >= reseed {
                    history[w].clone()
                } else {
                    prepared.values_z[w].clone()
                }
            })
            .collect();
        let (bundle, hz) = predict_sensors(model, prepared, target, &lags)?;
        history[target] = hz;
        out.weeks.push(target);
        out.predictions.push(bundle);
    }
    Ok(out)
}

/// The level recorded just before `start`, held for every later week.
pub fn persistence(prepared: &Prepared, start: usize, end: usize) -> Result<Rollout> {
    if start == 0 || start >= end || end > prepared.weeks() {
        return Err(GwError::invalid(format!("persistence range {start}..{end} is not valid")));
    }
    let last = prepared.values_m[start - 1].clone();
    Ok(Rollout {
        weeks: (start..end).collect(),
        predictions: (start..end)
            .map(|_| PredictionBundle {
                h: last.clone(),
                lag: None,
                delta: None,
                residual: None,
                diffusivity: None,
            })
            .collect(),
    })
}

/// Per-sensor metrics of a rollout against the recorded levels.
pub fn rollout_metrics(prepared: &Prepared, r: &Rollout) -> Result<Vec<MetricSet>> {
    (0..prepared.n_sensors())
        .map(|j| {
            let truth: Vec<f64> = r.weeks.iter().map(|&w| prepared.values_m[w][j]).collect();
            let obs: Vec<bool> = r.weeks.iter().map(|&w| prepared.observed[w][j]).collect();
            // A sensor silent for the whole span has no skill to report.
            if obs.iter().filter(|o| **o).count() < 2 {
                return Ok(MetricSet::undefined());
            }
            metrics(&truth, &r.series(j), &obs)
        })
        .collect()
}

/// Mean and standard deviation over observed sensors of the absolute
/// percentage error, per rollout week.
pub fn weekly_mape(prepared: &Prepared, r: &Rollout) -> Vec<(usize, f64, f64)> {
    r.weeks
        .iter()
        .zip(&r.predictions)
        .filter_map(|(&w, b)| {
            let e: Vec<f64> = (0..prepared.n_sensors())
                .filter(|&j| prepared.observed[w][j])
                .map(|j| 100.0 * ((b.h[j] - prepared.values_m[w][j]) / prepared.values_m[w][j]).abs())
                .collect();
            (!e.is_empty()).then(|| (w, mean(&e), variance(&e).sqrt()))
        })
        .collect()
}

/// `Y = T + S + R` with the residual closing the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct StlDecomposition {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
    pub period: usize,
}

/// Local linear fit at `x0` from `(xs, ys)` with tricube weights over the
/// `q` nearest points.
fn loess_at(xs: &[f64], ys: &[f64], x0: f64, q: usize) -> f64 {
    let n = xs.len();
    let q = q.min(n);
    let mut d: Vec<f64> = xs.iter().map(|x| (x - x0).abs()).collect();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    // widen slightly so the q-th neighbour keeps a small weight
    let h = (sorted[q - 1] * 1.000_001).max(1e-12);
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let u = d[i] / h;
        d[i] = if u < 1.0 { (1.0 - u.powi(3)).powi(3) } else { 0.0 };
        let w = d[i];
        sw += w;
        sx += w * xs[i];
        sy += w * ys[i];
        sxx += w * xs[i] * xs[i];
        sxy += w * xs[i] * ys[i];
    }
    let mx = sx / sw;
    let var = sxx / sw - mx * mx;
    if var <= 1e-12 * (1.0 + mx * mx) {
        return sy / sw;
    }
    let slope = (sxy / sw - mx * sy / sw) / var;
    sy / sw + slope * (x0 - mx)
}

fn loess(ys: &[f64], q: usize) -> Vec<f64> {
    let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
    xs.iter().map(|&x| loess_at(&xs, ys, x, q)).collect()
}

/// Window of the per-phase smoother, in cycles.
pub const STL_SEASONAL_WINDOW: usize = 7;

/// Single-pass decomposition: LOESS trend over the next odd window of at
/// least 1.5 periods, LOESS of each cycle-subseries of the detrended series,
/// seasonal centred so every full cycle sums to zero.
pub fn stl_decompose(y: &[f64], period: usize) -> Result<StlDecomposition> {
    if period < 2 || y.len() < 3 * period {
        return Err(GwError::invalid(format!(
            "series of {} points is shorter than three periods of {period}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GwError::invalid("series has non-finite entries"));
    }
    let n = y.len();
    let mut q = (3 * period).div_ceil(2);
    if q % 2 == 0 {
        q += 1;
    }
    let trend = loess(y, q);
    let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, b)| a - b).collect();
    let mut raw = vec![0.0; n];
    for phase in 0..period {
        let idx: Vec<usize> = (phase..n).step_by(period).collect();
        let sub: Vec<f64> = idx.iter().map(|&i| detrended[i]).collect();
        for (i, v) in idx.iter().zip(loess(&sub, STL_SEASONAL_WINDOW)) {
            raw[*i] = v;
        }
    }
    let mut seasonal = raw.clone();
    let full = n / period;
    for c in 0..full {
        let m = mean(&raw[c * period..(c + 1) * period]);
        seasonal[c * period..(c + 1) * period].iter_mut().for_each(|v| *v -= m);
    }
    if full * period < n {
        let m = mean(&raw[n - period..]);
        seasonal[full * period..].iter_mut().for_each(|v| *v -= m);
    }
    let residual = (0..n).map(|i| y[i] - trend[i] - seasonal[i]).collect();
    Ok(StlDecomposition {
        trend,
        seasonal,
        residual,
        period,
    })
}

/// Trend and seasonal strengths; a flag marks a zero-variance denominator
/// (strength then reported as 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strengths {
    pub trend: f64,
    pub seasonal: f64,
    pub trend_degenerate: bool,
    pub seasonal_degenerate: bool,
}

pub fn strengths(dec: &StlDecomposition) -> Strengths {
    let var_r = variance(&dec.residual);
    let one = |c: &[f64]| -> (f64, bool) {
        let s: Vec<f64> = c.iter().zip(&dec.residual).map(|(a, b)| a + b).collect();
        let v = variance(&s);
        if v == 0.0 {
            (0.0, true)
        } else {
            ((1.0 - var_r / v).max(0.0), false)
        }
    };
    let (trend, td) = one(&dec.trend);
    let (seasonal, sd) = one(&dec.seasonal);
    Strengths {
        trend,
        seasonal,
        trend_degenerate: td,
        seasonal_degenerate: sd,
    }
}

/// Linear interpolation across unobserved spans; ends take the nearest
/// observed value.
pub fn interpolate_gaps(values: &[f64], observed: &[bool]) -> Result<Vec<f64>> {
    let obs: Vec<usize> = (0..values.len()).filter(|&i| observed[i]).collect();
    let (&first, &last) = match (obs.first(), obs.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(GwError::invalid("series has no observed entries")),
    };
    let mut out = values.to_vec();
    out[..first].iter_mut().for_each(|v| *v = values[first]);
    out[last + 1..].iter_mut().for_each(|v| *v = values[last]);
    for w in obs.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a + 1..b {
            let f = (i - a) as f64 / (b - a) as f64;
            out[i] = values[a] + f * (values[b] - values[a]);
        }
    }
    Ok(out)
}

/// Per-sensor inputs of the error analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorAnalysis {
    pub sensor_id: String,
    pub metrics: MetricSet,
    pub missing_fraction: f64,
    pub strengths: Strengths,
}

/// Writes one CSV per (metric, covariate) pair, `correlations.csv` with the
/// Pearson r of each, and `weekly_mape.csv`.
pub fn analysis_report(
    dir: &Path,
    sensors: &[SensorAnalysis],
    weekly: &[(String, f64, f64)],
) -> Result<Vec<(String, Option<f64>)>> {
    type Pick = fn(&SensorAnalysis) -> Option<f64>;
    let pairs: [(&str, Pick, Pick); 5] = [
        ("mape_vs_missing", |s| Some(s.metrics.mape), |s| Some(s.missing_fraction)),
        ("mape_vs_trend_strength", |s| Some(s.metrics.mape), |s| Some(s.strengths.trend)),
        ("kge_vs_trend_strength", |s| s.metrics.kge, |s| Some(s.strengths.trend)),
        ("mape_vs_seasonal_strength", |s| Some(s.metrics.mape), |s| Some(s.strengths.seasonal)),
        ("kge_vs_seasonal_strength", |s| s.metrics.kge, |s| Some(s.strengths.seasonal)),
    ];
    let mut corr = String::from("analysis,n,pearson_r,note\n");
    let mut out = Vec::new();
    for (name, metric, cov) in pairs {
        let mut csv = String::from("sensor_id,metric,covariate\n");
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for s in sensors {
            if let (Some(m), Some(c)) = (metric(s), cov(s)) {
                writeln!(csv, "{},{m},{c}", s.sensor_id).expect("string write");
                xs.push(m);
                ys.push(c);
            }
        }
        write_text(&dir.join(format!("{name}.csv")), &csv)?;
        let (r, note) = if xs.len() < 3 {
            (None, "fewer than 3 sensors")
        } else {
            match pearson(&xs, &ys) {
                Some(r) => (Some(r), ""),
                None => (None, "constant column"),
            }
        };
        let r_text = r.map_or(String::new(), |r| r.to_string());
        writeln!(corr, "{name},{},{r_text},{note}", xs.len()).expect("string write");
        out.push((name.to_string(), r));
    }
    write_text(&dir.join("correlations.csv"), &corr)?;
    let mut wk = String::from("date,mean_mape,sd_mape\n");
    for (d, m, s) in weekly {
        writeln!(wk, "{d},{m},{s}").expect("string write");
    }
    write_text(&dir.join("weekly_mape.csv"), &wk)?;
    Ok(out)
}

/// Component fields on the interior cells of the truth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentFields {
    pub diffusivity: Vec<f64>,
    /// `[week][cell]`, meters per week.
    pub recharge: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub r_diffusivity: Option<f64>,
    pub r_mean_recharge: Option<f64>,
    pub delta_sign_agreement: f64,
    pub weeks: usize,
    pub cells: usize,
}

pub fn interior_cells(truth: &GridStack) -> Vec<usize> {
    let (h, w) = (truth.height, truth.width);
    (1..h.saturating_sub(1))
        .flat_map(|r| (1..w.saturating_sub(1)).map(move |c| r * w + c))
        .collect()
}

/// Query locations for component validation with the truth cell under each.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSites {
    pub lonlat: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
}

impl ComponentSites {
    /// Every interior truth cell at its centre.
    pub fn all_cells(truth: &GridStack) -> Self {
        let cells = interior_cells(truth);
        let lonlat = cells.iter().map(|&i| truth.geo.center(i / truth.width, i % truth.width)).collect();
        Self { lonlat, cells }
    }

    /// Nodes of `grid` that fall on interior truth cells.
    pub fn on_grid(truth: &GridStack, grid: &ControlGrid) -> Self {
        let mut out = Self {
            lonlat: Vec::new(),
            cells: Vec::new(),
        };
        for (lon, lat) in grid.nodes() {
            let (fc, fr) = truth.geo.fractional(lon, lat);
            let (r, c) = (fr.floor(), fc.floor());
            if r < 1.0 || c < 1.0 || r >= (truth.height - 1) as f64 || c >= (truth.width - 1) as f64 {
                continue;
            }
            out.lonlat.push((lon, lat));
            out.cells.push(r as usize * truth.width + c as usize);
        }
        out
    }
}

/// The known fields at `weeks`, as a stand-in for model output.
pub fn truth_fields(truth: &GridStack, sites: &ComponentSites, weeks: &[usize]) -> ComponentFields {
    let pick = |f: usize, c: usize| -> Vec<f64> {
        let p = truth.plane(f, c);
        sites.cells.iter().map(|&i| p[i]).collect()
    };
    ComponentFields {
        diffusivity: pick(weeks.first().copied().unwrap_or(0), TRUTH_DIFFUSIVITY),
        recharge: weeks.iter().map(|&w| pick(w, TRUTH_RECHARGE)).collect(),
        delta: weeks.iter().map(|&w| pick(w, TRUTH_DELTA)).collect(),
    }
}

/// Model components at the sites for each week, all sites queried jointly.
pub fn model_fields(model: &Model, prepared: &Prepared, sites: &ComponentSites, weeks: &[usize]) -> Result<ComponentFields> {
    if !model.variant().is_physics() {
        return Err(GwError::invalid("component validation needs a physics variant"));
    }
    let mut out = ComponentFields {
        diffusivity: Vec::new(),
        recharge: Vec::new(),
        delta: Vec::new(),
    };
    for &w in weeks {
        let pts: Vec<StPoint> = sites.lonlat.iter().map(|&(lon, lat)| prepared.point(lon, lat, w)).collect();
        let q = prepared.augment_points(&pts)?;
        let b = model.predict(&prepared.input(w)?, &q, &prepared.norm)?;
        if out.diffusivity.is_empty() {
            out.diffusivity = b.diffusivity.clone().unwrap_or_default();
        }
        out.recharge.push(b.residual.unwrap_or_default());
        out.delta.push(b.delta.unwrap_or_default());
    }
    Ok(out)
}

fn time_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, Vec::len);
    (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
}

/// Spatial agreement of predicted and known components.
pub fn component_validation(pred: &ComponentFields, truth: &ComponentFields) -> Result<ComponentReport> {
    if pred.diffusivity.len() != truth.diffusivity.len() || pred.recharge.len() != truth.recharge.len() {
        return Err(GwError::invalid("component fields do not line up"));
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for (p, t) in pred.delta.iter().zip(&truth.delta) {
        for (a, b) in p.iter().zip(t) {
            total += 1;
            if a.signum() == b.signum() {
                agree += 1;
            }
        }
    }
    Ok(ComponentReport {
        r_diffusivity: pearson(&pred.diffusivity, &truth.diffusivity),
        r_mean_recharge: pearson(&time_mean(&pred.recharge), &time_mean(&truth.recharge)),
        delta_sign_agreement: if total > 0 { agree as f64 / total as f64 } else { f64::NAN },
        weeks: pred.recharge.len(),
        cells: pred.diffusivity.len(),
    })
}

/// Binary greyscale image, north up, min–max stretched.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(GwError::invalid("pgm: value count does not match the grid"));
    }
    let lo = values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in (0..rows).rev() {
        for c in 0..cols {
            let v = values[r * cols + c];
            let g = if v.is_finite() { ((v - lo) / span * 255.0).round() } else { 0.0 };
            bytes.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| GwError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| GwError::io(path, e))
}
