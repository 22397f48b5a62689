//! Loss terms and their weighted composite.

use gwnet_autodiff::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GwError, Result};
use crate::layers::StPoint;
use crate::models::Variant;

/// Meters per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;

fn flat<'g>(v: Var<'g>) -> Result<Var<'g>> {
    let n = v.numel();
    Ok(v.reshape(vec![n])?)
}

/// Mean over observed entries of `|ĥ − h| / |h|`.
fn masked_mape<'g>(
    g: &'g Graph,
    term: &'static str,
    h_hat: Var<'g>,
    h_true: &[f64],
    observed: &[bool],
) -> Result<Var<'g>> {
    let h_hat = flat(h_hat)?;
    if h_hat.numel() != h_true.len() || h_true.len() != observed.len() {
        return Err(GwError::invalid(format!(
            "{term}: {} predictions, {} targets, {} mask entries",
            h_hat.numel(),
            h_true.len(),
            observed.len()
        )));
    }
    let n_obs = observed.iter().filter(|o| **o).count();
    if n_obs == 0 {
        return Err(GwError::NoObserved { term });
    }
    let mut weights = Vec::with_capacity(h_true.len());
    for (h, o) in h_true.iter().zip(observed) {
        if *o && h.abs() < f64::MIN_POSITIVE {
            return Err(GwError::invalid(format!("{term}: target level is zero")));
        }
        weights.push(if *o { 1.0 / (h.abs() * n_obs as f64) } else { 0.0 });
    }
    let n = h_true.len();
    let target = g.constant_from(vec![n], h_true.to_vec())?;
    let w = g.constant_from(vec![n], weights)?;
    Ok(h_hat.sub(target)?.abs().mul(w)?.sum())
}

pub fn l_data<'g>(g: &'g Graph, h_hat: Var<'g>, h_true: &[f64], observed: &[bool]) -> Result<Var<'g>> {
    masked_mape(g, "data", h_hat, h_true, observed)
}

/// Coherence of the lag estimate with the most recent recorded level.
pub fn l_coh<'g>(g: &'g Graph, lag_hat: Var<'g>, h_lag: &[f64], observed: &[bool]) -> Result<Var<'g>> {
    masked_mape(g, "coh", lag_hat, h_lag, observed)
}

/// `‖G − I‖²_F / k²` on the smaller Gram matrix of each `in × out` weight,
/// summed over layers; `k = min(in, out)`.
pub fn l_ortho<'g>(g: &'g Graph, weights: &[Var<'g>]) -> Result<Var<'g>> {
    let mut total: Option<Var<'g>> = None;
    for w in weights {
        let s = w.shape();
        if s.len() != 2 {
            return Err(GwError::invalid(format!("l_ortho: weight shape {s:?} is not a matrix")));
        }
        let (rows, cols) = (s[0], s[1]);
        let gram = if rows >= cols {
            w.t()?.matmul(*w)?
        } else {
            w.matmul(w.t()?)?
        };
        let k = rows.min(cols);
        let eye = g.constant(gwnet_autodiff::Tensor::eye(k));
        let term = gram.sub(eye)?.square().sum().mul_scalar(1.0 / (k * k) as f64);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| GwError::invalid("l_ortho: no weights"))
}

/// Five-point Laplacian on interior nodes of a `[rows, cols]` grid whose
/// rows step by `dy` meters and columns by `dx` meters. Result is
/// `[rows − 2, cols − 2]`.
pub fn fd_laplacian<'g>(grid: Var<'g>, dx: f64, dy: f64) -> Result<Var<'g>> {
    let s = grid.shape();
    if s.len() != 2 || s[0] < 3 || s[1] < 3 {
        return Err(GwError::invalid(format!("fd_laplacian: grid {s:?} smaller than 3x3")));
    }
    if !(dx > 0.0 && dy > 0.0) {
        return Err(GwError::invalid("fd_laplacian: spacing must be positive"));
    }
    let (r, c) = (s[0], s[1]);
    let mid_rows = grid.slice(0, 1, r - 1)?;
    let centre = mid_rows.slice(1, 1, c - 1)?;
    let west = mid_rows.slice(1, 0, c - 2)?;
    let east = mid_rows.slice(1, 2, c)?;
    let mid_cols = grid.slice(1, 1, c - 1)?;
    let south = mid_cols.slice(0, 0, r - 2)?;
    let north = mid_cols.slice(0, 2, r)?;
    let two_c = centre.mul_scalar(2.0);
    let d2x = east.add(west)?.sub(two_c)?.mul_scalar(1.0 / (dx * dx));
    let d2y = north.add(south)?.sub(two_c)?.mul_scalar(1.0 / (dy * dy));
    Ok(d2x.add(d2y)?)
}

fn interior<'g>(grid: Var<'g>) -> Result<Var<'g>> {
    let s = grid.shape();
    Ok(grid.slice(0, 1, s[0] - 1)?.slice(1, 1, s[1] - 1)?)
}

/// MSE over interior nodes of `Δ̂ − D̂ · ∇²(lag)` (one-week step).
pub fn l_diff<'g>(diffusion: Var<'g>, d_hat: Var<'g>, lag: Var<'g>, dx: f64, dy: f64) -> Result<Var<'g>> {
    let (a, b, c) = (diffusion.shape(), d_hat.shape(), lag.shape());
    if a != b || b != c {
        return Err(GwError::invalid(format!("l_diff: grid shapes {a:?}, {b:?}, {c:?} differ")));
    }
    let lap = fd_laplacian(lag, dx, dy)?;
    let target = interior(d_hat)?.mul(lap)?;
    Ok(interior(diffusion)?.sub(target)?.square().mean())
}

/// `(mean |R̂|, mean R̂²)`.
pub fn l_r_norms<'g>(residual: Var<'g>) -> (Var<'g>, Var<'g>) {
    (residual.abs().mean(), residual.square().mean())
}

/// Mean of `R̂` over points with `R̂ > 0` outside the recharge zones;
/// zero when there are none. `inside[i]` marks zone membership.
pub fn l_rch<'g>(g: &'g Graph, residual: Var<'g>, inside: &[bool]) -> Result<(Var<'g>, usize)> {
    let r = flat(residual)?;
    if r.numel() != inside.len() {
        return Err(GwError::invalid("l_rch: residual and zone mask lengths differ"));
    }
    let idx: Vec<usize> = r.with_value(|v| {
        v.iter()
            .zip(inside)
            .enumerate()
            .filter(|(_, (x, ins))| **x > 0.0 && !**ins)
            .map(|(i, _)| i)
            .collect()
    });
    if idx.is_empty() {
        return Ok((g.scalar(0.0), 0));
    }
    let n = idx.len();
    Ok((r.index_rows(&idx)?.mean(), n))
}

/// Table of term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_ortho: f64,
    pub alpha_coh: f64,
    pub alpha_diff: f64,
    pub alpha_r1: f64,
    pub alpha_r2: f64,
    pub alpha_rch: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ortho: 1e-3,
            alpha_coh: 1.0,
            alpha_diff: 2.5e-2,
            alpha_r1: 5e-4,
            alpha_r2: 1e-4,
            alpha_rch: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Data,
    Ortho,
    Coh,
    Diff,
    R1,
    R2,
    Rch,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::Data, Term::Ortho, Term::Coh, Term::Diff, Term::R1, Term::R2, Term::Rch];

    pub fn name(self) -> &'static str {
        match self {
            Term::Data => "data",
            Term::Ortho => "ortho",
            Term::Coh => "coh",
            Term::Diff => "diff",
            Term::R1 => "r1",
            Term::R2 => "r2",
            Term::Rch => "rch",
        }
    }

    pub fn is_active(self, variant: Variant) -> bool {
        match self {
            Term::Data | Term::Ortho => true,
            Term::Coh | Term::Diff | Term::R1 | Term::R2 => {
                matches!(variant, Variant::Ilb | Variant::Ilrb)
            }
            Term::Rch => variant == Variant::Ilrb,
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::Data => 1.0,
            Term::Ortho => w.alpha_ortho,
            Term::Coh => w.alpha_coh,
            Term::Diff => w.alpha_diff,
            Term::R1 => w.alpha_r1,
            Term::R2 => w.alpha_r2,
            Term::Rch => w.alpha_rch,
        }
    }
}

/// Term values for one step, with counts of contributing elements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub values: Vec<(Term, f64)>,
    pub counts: Vec<(Term, usize)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, t: Term) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == t).map(|(_, v)| *v)
    }
}

/// Unweighted term nodes of one step; inactive terms stay `None`.
#[derive(Default)]
pub struct LossTerms<'g> {
    pub terms: Vec<(Term, Var<'g>, usize)>,
}

impl<'g> LossTerms<'g> {
    pub fn set(&mut self, t: Term, v: Var<'g>, count: usize) {
        self.terms.retain(|(k, _, _)| *k != t);
        self.terms.push((t, v, count));
    }

    fn get(&self, t: Term) -> Option<&(Term, Var<'g>, usize)> {
        self.terms.iter().find(|(k, _, _)| *k == t)
    }
}

/// `data + Σ αᵢ·termᵢ` over the terms active for `variant`.
pub fn total_loss<'g>(
    g: &'g Graph,
    terms: &LossTerms<'g>,
    weights: &LossWeights,
    variant: Variant,
) -> Result<(Var<'g>, LossReport)> {
    let mut total = g.scalar(0.0);
    let mut report = LossReport::default();
    for t in Term::ALL {
        if !t.is_active(variant) {
            continue;
        }
        let (_, v, count) = terms.get(t).ok_or(GwError::MissingTerm(t.name()))?;
        total = total.add(v.mul_scalar(t.weight(weights)))?;
        report.values.push((t, v.item()));
        report.counts.push((t, *count));
    }
    report.total = total.item();
    Ok((total, report))
}

/// Regular lattice of query points covering a bounding box; row 0 is the
/// southern edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub rows: usize,
    pub cols: usize,
    pub lon_min: f64,
    pub lat_min: f64,
    pub dlon: f64,
    pub dlat: f64,
}

impl ControlGrid {
    pub fn over(bounds: (f64, f64, f64, f64), rows: usize, cols: usize) -> Result<Self> {
        let (lon_min, lon_max, lat_min, lat_max) = bounds;
        if rows == 0 || cols == 0 || !(lon_max > lon_min && lat_max > lat_min) {
            return Err(GwError::invalid("control grid needs a positive extent and size"));
        }
        Ok(Self {
            rows,
            cols,
            lon_min,
            lat_min,
            dlon: (lon_max - lon_min) / cols as f64,
            dlat: (lat_max - lat_min) / rows as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node centre `(lon, lat)`, row-major.
    pub fn node(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lon_min + (col as f64 + 0.5) * self.dlon,
            self.lat_min + (row as f64 + 0.5) * self.dlat,
        )
    }

    pub fn nodes(&self) -> Vec<(f64, f64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .map(|(r, c)| self.node(r, c))
            .collect()
    }

    /// Local metric spacing `(dx, dy)` in meters at the grid's centre latitude.
    pub fn spacing_m(&self) -> (f64, f64) {
        let lat_c = self.lat_min + 0.5 * self.rows as f64 * self.dlat;
        (
            METERS_PER_DEGREE * lat_c.to_radians().cos() * self.dlon,
            METERS_PER_DEGREE * self.dlat,
        )
    }

    pub fn is_interior(&self, row: usize, col: usize) -> bool {
        row > 0 && col > 0 && row + 1 < self.rows && col + 1 < self.cols
    }

    pub fn points(&self, elevation: impl Fn(f64, f64) -> f64, doy: u32) -> Vec<StPoint> {
        self.nodes()
            .into_iter()
            .map(|(lon, lat)| StPoint {
                lon,
                lat,
                elevation: elevation(lon, lat),
                doy,
            })
            .collect()
    }
}
