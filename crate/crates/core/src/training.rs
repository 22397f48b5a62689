//! Optimisation loop: per-window loss assembly, schedule, checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gwnet_autodiff::{AdamW, Graph, OptimizerState, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, Partition, Prepared, Window};
use crate::error::{GwError, Result};
use crate::layers::{AugmentedCoord, StPoint};
use crate::losses::{self, total_loss, ControlGrid, LossReport, LossTerms, LossWeights, Term};
use crate::models::{h_meters, Model, ModelConfig, NamedTensor, Variant};
use crate::rng::{epoch_stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_drop_epoch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub control_rows: usize,
    pub control_cols: usize,
    /// Random subset of training windows visited per epoch; `None` visits all.
    pub windows_per_epoch: Option<usize>,
    /// Checkpoint every n epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; off unless set.
    pub clip_grad_norm: Option<f64>,
    /// Tolerance around recharge-zone borders, degrees.
    pub zone_buffer_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Variant::Ilb)
    }
}

impl TrainConfig {
    /// Published epoch counts, full window sweeps.
    pub fn paper(variant: Variant) -> Self {
        let epochs = match variant {
            Variant::Stainet => 1000,
            Variant::Ib | Variant::Ilrb => 850,
            Variant::Ilb => 600,
        };
        Self {
            epochs,
            lr_initial: 2.5e-4,
            lr_final: 1e-4,
            lr_drop_epoch: 400,
            weight_decay: 2.5e-3,
            seed: 0,
            control_rows: 16,
            control_cols: 16,
            windows_per_epoch: None,
            checkpoint_every: 0,
            clip_grad_norm: None,
            zone_buffer_deg: 0.05,
        }
    }

    /// Scaled-down preset for single-core runs: a random window subset per
    /// epoch, a coarser control grid, and one epoch budget shared by every
    /// variant.
    pub fn desk(variant: Variant) -> Self {
        Self {
            epochs: 60,
            lr_initial: 1e-3,
            lr_final: 2.5e-4,
            lr_drop_epoch: 40,
            windows_per_epoch: Some(32),
            control_rows: 8,
            control_cols: 8,
            ..Self::paper(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GwError::invalid("epochs must be positive"));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(GwError::invalid(format!(
                "learning-rate drop epoch {} is not before the last epoch {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if self.control_rows < 3 || self.control_cols < 3 {
            return Err(GwError::invalid("control grid must be at least 3x3"));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(GwError::invalid("windows_per_epoch must be positive"));
        }
        Ok(())
    }
}

/// Step schedule; the drop applies at `lr_drop_epoch` itself.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_drop_epoch {
        config.lr_initial
    } else {
        config.lr_final
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over visited windows of each active term, unweighted.
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub norm: NormStats,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerSnapshot,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| GwError::format(path, e.to_string()))?;
        crate::data::write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GwError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GwError::format(path, e.to_string()))
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.model, self.seed)?;
        m.load_params(&self.params)?;
        Ok(m)
    }
}

/// Control-grid geometry with fixed node locations; only the day of year
/// varies between windows.
#[derive(Debug, Clone)]
pub struct ControlPoints {
    pub grid: ControlGrid,
    pub points: Vec<StPoint>,
    pub inside_zone: Vec<bool>,
}

impl ControlPoints {
    pub fn new(prepared: &Prepared, rows: usize, cols: usize, zone_buffer_deg: f64) -> Result<Self> {
        let grid = ControlGrid::over(prepared.roi(), rows, cols)?;
        let points = grid.points(|lon, lat| prepared.elevation_at(lon, lat), 1);
        let inside_zone = points
            .iter()
            .map(|p| prepared.zones.contains(p.lon, p.lat, zone_buffer_deg))
            .collect();
        Ok(Self {
            grid,
            points,
            inside_zone,
        })
    }

    pub fn queries(&self, prepared: &Prepared, week: usize) -> Result<Vec<AugmentedCoord>> {
        let doy = prepared.doys[week];
        let pts: Vec<StPoint> = self.points.iter().map(|p| StPoint { doy, ..*p }).collect();
        prepared.augment_points(&pts)
    }
}

/// Builds every active term for the window predicting `target`.
/// `dropout` switches on training-mode key-value dropout.
pub fn window_terms<'g>(
    g: &'g Graph,
    model: &Model,
    prepared: &Prepared,
    control: &ControlPoints,
    target: usize,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms<'g>> {
    let variant = model.variant();
    let input = prepared.input(target)?;
    let enc = model.encode(g, &input, dropout)?;
    let out = model.decode(g, &enc, &prepared.sensor_queries(target))?;
    let mut terms = LossTerms::default();
    let obs = &prepared.observed[target];
    let n_obs = obs.iter().filter(|o| **o).count();
    let h_m = h_meters(out.h, &prepared.norm);
    terms.set(Term::Data, losses::l_data(g, h_m, &prepared.values_m[target], obs)?, n_obs);
    let emb = model.embedding_weights(g)?;
    terms.set(Term::Ortho, losses::l_ortho(g, &emb)?, emb.len());
    if !Term::Coh.is_active(variant) {
        return Ok(terms);
    }
    let lag = out.lag.ok_or(GwError::MissingTerm("coh"))?;
    let prev_obs = &prepared.observed[target - 1];
    let lag_m = h_meters(lag, &prepared.norm);
    terms.set(
        Term::Coh,
        losses::l_coh(g, lag_m, &prepared.values_m[target - 1], prev_obs)?,
        prev_obs.iter().filter(|o| **o).count(),
    );
    let cg = model.decode(g, &enc, &control.queries(prepared, target)?)?;
    let shape = vec![control.grid.rows, control.grid.cols];
    let grid = |v: Option<Var<'g>>, name| -> Result<Var<'g>> {
        Ok(v.ok_or(GwError::MissingTerm(name))?.reshape(shape.clone())?)
    };
    let (delta, d_hat, lag_g, res) = (
        grid(cg.delta, "diff")?,
        grid(cg.d_hat, "diff")?,
        grid(cg.lag, "diff")?,
        grid(cg.residual, "r1")?,
    );
    let (dx, dy) = control.grid.spacing_m();
    let interior = (control.grid.rows - 2) * (control.grid.cols - 2);
    terms.set(Term::Diff, losses::l_diff(delta, d_hat, lag_g, dx, dy)?, interior);
    let (r1, r2) = losses::l_r_norms(res);
    terms.set(Term::R1, r1, control.grid.len());
    terms.set(Term::R2, r2, control.grid.len());
    if Term::Rch.is_active(variant) {
        let (rch, n) = losses::l_rch(g, res, &control.inside_zone)?;
        terms.set(Term::Rch, rch, n);
    }
    Ok(terms)
}

/// Loss of one window without dropout, for reporting.
pub fn window_loss(
    model: &Model,
    prepared: &Prepared,
    control: &ControlPoints,
    weights: &LossWeights,
    target: usize,
) -> Result<LossReport> {
    let g = Graph::new();
    let terms = window_terms(&g, model, prepared, control, target, None)?;
    Ok(total_loss(&g, &terms, weights, model.variant())?.1)
}

/// Model, optimiser and counters of a training run.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    seed: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let optimizer = AdamW::new(config.lr_initial, config.weight_decay);
        Ok(Self {
            model,
            seed: config.seed,
            config,
            weights,
            optimizer,
            epoch: 0,
        })
    }

    /// Restores a run; `epochs` may extend the original target.
    pub fn resume(ckpt: &Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let mut config = ckpt.train.clone();
        if let Some(e) = epochs {
            config.epochs = e;
        }
        config.validate()?;
        let model = ckpt.to_model()?;
        let mut optimizer = AdamW::new(config.lr_initial, config.weight_decay);
        if ckpt.optimizer.step > 0 {
            optimizer.set_state(OptimizerState {
                step: ckpt.optimizer.step,
                m: ckpt.optimizer.m.clone(),
                v: ckpt.optimizer.v.clone(),
            });
        }
        Ok(Self {
            model,
            config,
            weights: ckpt.weights,
            optimizer,
            epoch: ckpt.epoch,
            seed: ckpt.seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checkpoint(&self, norm: &NormStats) -> Checkpoint {
        let s = self.optimizer.state();
        Checkpoint {
            model: self.model.config,
            train: self.config.clone(),
            weights: self.weights,
            norm: norm.clone(),
            seed: self.seed,
            epoch: self.epoch,
            params: self.model.named_params(),
            optimizer: OptimizerSnapshot {
                step: s.step,
                m: s.m.clone(),
                v: s.v.clone(),
            },
        }
    }

    /// One optimisation step on the window predicting `target`.
    fn step(
        &mut self,
        prepared: &Prepared,
        control: &ControlPoints,
        target: usize,
        dropout: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        let g = Graph::new();
        let terms = window_terms(&g, &self.model, prepared, control, target, Some(dropout))?;
        let (total, report) = total_loss(&g, &terms, &self.weights, self.model.variant())?;
        for (t, v) in &report.values {
            if !v.is_finite() {
                return Err(GwError::NonFiniteLoss {
                    epoch: self.epoch,
                    window: target,
                    term: t.name().to_string(),
                });
            }
        }
        g.backward(total)?;
        self.model.params.accumulate_grads(&g)?;
        if let Some(c) = self.config.clip_grad_norm {
            let n = self.model.params.grad_norm();
            if n > c {
                self.model.params.scale_grads(c / n);
            }
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok(report)
    }

    /// Runs one epoch over `windows` (training partition only).
    pub fn run_epoch(&mut self, prepared: &Prepared, control: &ControlPoints, windows: &[Window]) -> Result<EpochRecord> {
        if let Some(w) = windows.iter().find(|w| w.partition != Partition::Train || w.target > prepared.split_week) {
            return Err(GwError::invalid(format!(
                "window with target week {} belongs to the test partition",
                w.target
            )));
        }
        if windows.is_empty() {
            return Err(GwError::invalid("no training windows"));
        }
        let start = Instant::now();
        let lr = lr_schedule(self.epoch, &self.config);
        self.optimizer.lr = lr;
        let mut order: Vec<usize> = windows.iter().map(|w| w.target).collect();
        let mut shuffle = epoch_stream(self.seed, Stream::Shuffle, self.epoch);
        order.shuffle(&mut shuffle);
        if let Some(k) = self.config.windows_per_epoch {
            order.truncate(k);
        }
        let mut dropout = epoch_stream(self.seed, Stream::Dropout, self.epoch);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for &target in &order {
            let report = self.step(prepared, control, target, &mut dropout)?;
            for (t, v) in &report.values {
                *sums.entry(t.name().to_string()).or_default() += v;
            }
            total += report.total;
        }
        let n = order.len() as f64;
        sums.values_mut().for_each(|v| *v /= n);
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            losses: sums,
            total: total / n,
            wall_ms: start.elapsed().as_millis(),
        };
        self.epoch += 1;
        Ok(record)
    }
}

/// Where `train` writes its artefacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    pub log: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
}

/// Trains until `trainer.config.epochs` epochs are complete, appending one
/// JSON line per epoch to the log and checkpointing at the configured
/// cadence and at the end. `on_epoch` sees every record.
pub fn train(
    trainer: &mut Trainer,
    prepared: &Prepared,
    outputs: TrainOutputs<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if trainer.model.config.t_lags != prepared.t_lags {
        return Err(GwError::invalid(format!(
            "model uses {} lags, data prepared with {}",
            trainer.model.config.t_lags, prepared.t_lags
        )));
    }
    let cfg = trainer.config.clone();
    let control = ControlPoints::new(prepared, cfg.control_rows, cfg.control_cols, cfg.zone_buffer_deg)?;
    let windows = prepared.train_windows();
    let mut log = match outputs.log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| GwError::io(parent, e))?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(trainer.epoch > 0)
                .write(true)
                .truncate(trainer.epoch == 0)
                .open(p)
                .map_err(|e| GwError::io(p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.epoch < cfg.epochs {
        let rec = trainer.run_epoch(prepared, &control, &windows)?;
        if let Some((p, f)) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| GwError::format(*p, e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| GwError::io(*p, e))?;
        }
        on_epoch(&rec);
        records.push(rec);
        let due = cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every == 0;
        if let Some(p) = outputs.checkpoint {
            if due || trainer.epoch == cfg.epochs {
                trainer.checkpoint(&prepared.norm).write(p)?;
            }
        }
    }
    Ok(records)
}
