//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use gwnet::attention::{MultiHead, Stai};
use gwnet::data::Prepared;
use gwnet::layers::Linear;
use gwnet::losses::{total_loss, LossWeights};
use gwnet::models::{to_bundle, Model, ModelConfig, Variant};
use gwnet::physics::{SimConfig, Synthetic};
use gwnet::training::{window_terms, ControlPoints};
use gwnet_autodiff::{grad_pairs_params, rel_err, Graph, ParamStore, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

/// 16x16 aquifer, 4x4 weather grid, 10 sensors, 200 weeks.
pub fn small_sim() -> SimConfig {
    SimConfig {
        rows: 16,
        cols: 16,
        weeks: 200,
        spinup_weeks: 100,
        n_sensors: 10,
        weather_rows: 4,
        weather_cols: 4,
        ..SimConfig::default()
    }
}

pub fn small_synthetic(seed: u64) -> Synthetic {
    small_sim().synthesize(seed).expect("synthesis")
}

/// Small dataset split so the last 40 weeks are test targets.
pub fn small_prepared(seed: u64) -> Prepared {
    let syn = small_synthetic(seed);
    Prepared::new(&syn.dataset, 4, 159).expect("prepare")
}

pub fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 16,
        n_heads: 4,
        trunk_depth: 2,
        ..ModelConfig::default()
    }
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn naive_linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = store.tensor(l.w);
    let b = store.tensor(l.b).data();
    x.iter()
        .map(|row| {
            (0..l.fan_out)
                .map(|o| {
                    let mut s = b[o];
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.at2(i, o);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn naive_mha(store: &ParamStore, m: &MultiHead, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let (qp, kp, vp) = (
        naive_linear(store, &m.q, q),
        naive_linear(store, &m.k, k),
        naive_linear(store, &m.v, v),
    );
    let dk = m.d_model / m.heads;
    let mut cat = vec![vec![0.0; m.d_model]; q.len()];
    for h in 0..m.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..k.len()).map(|j| e[j] / z * vp[j][c]).sum();
            }
        }
    }
    naive_linear(store, &m.o, &cat)
}

pub fn naive_instance_norm(x: &Mat) -> Mat {
    let (n, d) = (x.len(), x[0].len());
    let mut out = x.clone();
    for c in 0..d {
        let mu = x.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = x.iter().map(|r| (r[c] - mu).powi(2)).sum::<f64>() / n as f64;
        for r in 0..n {
            out[r][c] = (x[r][c] - mu) / (var + 1e-5).sqrt();
        }
    }
    out
}

fn leaky(x: Mat) -> Mat {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.01 * v }).collect())
        .collect()
}

pub fn naive_stai(store: &ParamStore, s: &Stai, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let b = &s.0;
    let y1 = naive_instance_norm(&naive_mha(store, &b.mha, q, k, v));
    let m = leaky(naive_linear(store, &b.fc2, &leaky(naive_linear(store, &b.fc1, &y1))));
    let y2 = naive_instance_norm(&m);
    y2.iter().zip(&y1).map(|(a, c)| a.iter().zip(c).map(|(x, y)| x + y).collect()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &Mat) -> f64 {
    a.iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Six-point skill example with values from an independent spreadsheet
/// computation: (truth, prediction, [nbias, rmse, mape, nse, kge]).
pub fn six_point_example() -> ([f64; 6], [f64; 6], [f64; 5]) {
    (
        [200.0, 202.0, 201.0, 205.0, 203.0, 204.0],
        [201.0, 201.5, 202.0, 204.0, 203.5, 205.0],
        [
            1.0 / 15.0,
            0.8660254037844386,
            0.41155726091425965,
            0.7428571428571429,
            0.8024768574829196,
        ],
    )
}

/// Plain double-loop five-point Laplacian of the interior.
pub fn loop_laplacian(h: &Mat, dx: f64, dy: f64) -> Mat {
    let (r, c) = (h.len(), h[0].len());
    let mut out = vec![vec![0.0; c - 2]; r - 2];
    for i in 1..r - 1 {
        for j in 1..c - 1 {
            out[i - 1][j - 1] = (h[i][j + 1] - 2.0 * h[i][j] + h[i][j - 1]) / (dx * dx)
                + (h[i + 1][j] - 2.0 * h[i][j] + h[i - 1][j]) / (dy * dy);
        }
    }
    out
}

/// Below this magnitude a central difference at eps 1e-5 carries no signal:
/// loss roundoff (about 1e-17) over 2·eps leaves noise near 1e-11.
pub const SIGNAL_FLOOR: f64 = 1e-6;
/// Agreement required where the loss is flat along the coordinate, such as
/// attention key biases (softmax shift) or biases cancelled by instance norm.
pub const FLAT_TOL: f64 = 1e-10;
/// Difference quotients at eps and eps/4 agreeing to this relative level
/// mark a coordinate as clear of activation kinks. The screen never looks at
/// the tape gradient.
pub const KINK_SCREEN: f64 = 1e-5;

fn loss_of<'g>(
    g: &'g Graph,
    model: &Model,
    store: &ParamStore,
    prepared: &Prepared,
    control: &ControlPoints,
    target: usize,
) -> gwnet_autodiff::Result<Var<'g>> {
    let mut m = model.clone();
    m.params = store.clone();
    let invalid = |e: gwnet::error::GwError| TensorError::Invalid(e.to_string());
    let terms = window_terms(g, &m, prepared, control, target, None).map_err(invalid)?;
    Ok(total_loss(g, &terms, &LossWeights::default(), m.variant()).map_err(invalid)?.0)
}

/// Outcome of a full-model gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub coords: usize,
    /// Coordinates with a clear difference signal.
    pub live: usize,
    pub kinked: usize,
    pub worst_rel: f64,
    pub worst_flat: f64,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.kinked * 10 <= self.coords && self.live * 2 > self.coords && self.worst_rel < 1e-4 && self.worst_flat <= FLAT_TOL
    }
}

/// Tape gradients of the total loss against central differences at eps
/// 1e-5 on two coordinates of every parameter tensor plus 40 random ones.
pub fn model_grad_report(variant: Variant, prepared: &Prepared, control: &ControlPoints, seed: u64) -> GradReport {
    let eps = 1e-5;
    let model = Model::new(small_model(variant), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(variant as u64);
    let target = prepared.train_windows()[30].target;
    let ids: Vec<_> = model.params.iter().map(|(id, _, t)| (id, t.numel())).collect();
    let mut coords: Vec<_> = ids
        .iter()
        .flat_map(|(id, n)| [(*id, rng.random_range(0..*n)), (*id, rng.random_range(0..*n))])
        .collect();
    for _ in 0..40 {
        let (id, n) = ids[rng.random_range(0..ids.len())];
        coords.push((id, rng.random_range(0..n)));
    }
    let probe = |h: f64| {
        grad_pairs_params(
            &model.params,
            |g: &Graph, store| loss_of(g, &model, store, prepared, control, target),
            &coords,
            h,
        )
        .unwrap()
    };
    let (pairs, fine) = (probe(eps), probe(eps / 4.0));
    let mut r = GradReport {
        coords: pairs.len(),
        live: 0,
        kinked: 0,
        worst_rel: 0.0,
        worst_flat: 0.0,
    };
    for ((a, n), (_, n_fine)) in pairs.iter().zip(&fine) {
        if a.abs().max(n.abs()) < SIGNAL_FLOOR {
            r.worst_flat = r.worst_flat.max((a - n).abs());
        } else if rel_err(*n, *n_fine) > KINK_SCREEN {
            // The two difference quotients disagree: a kink lies within eps.
            r.kinked += 1;
        } else {
            r.worst_rel = r.worst_rel.max(rel_err(*a, *n));
            r.live += 1;
        }
    }
    r
}

/// Largest |h − (lag + Δ + R)| over the first `n` windows, in z-units and
/// in meters.
pub fn additive_residual(variant: Variant, prepared: &Prepared, seed: u64, n: usize) -> f64 {
    let model = Model::new(small_model(variant), seed).unwrap();
    let mut worst = 0.0f64;
    let mut windows = prepared.train_windows();
    windows.extend(prepared.test_windows());
    for w in windows.iter().take(n) {
        let g = Graph::new();
        let input = prepared.input(w.target).unwrap();
        let enc = model.encode(&g, &input, None).unwrap();
        let out = model.decode(&g, &enc, &prepared.sensor_queries(w.target)).unwrap();
        let (h, lag, delta, res) = (
            out.h.value(),
            out.lag.unwrap().value(),
            out.delta.unwrap().value(),
            out.residual.unwrap().value(),
        );
        for i in 0..h.len() {
            worst = worst.max((h[i] - (lag[i] + delta[i] + res[i])).abs());
        }
        let b = to_bundle(&out, &prepared.norm);
        let (bl, bd, br) = (b.lag.unwrap(), b.delta.unwrap(), b.residual.unwrap());
        for i in 0..b.h.len() {
            worst = worst.max((b.h[i] - (bl[i] + bd[i] + br[i])).abs());
        }
    }
    worst
}
