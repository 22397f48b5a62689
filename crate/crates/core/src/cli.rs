//! Command-line front end: simulate, train, evaluate, map.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{write_text, Dataset, GridStack, Prepared};
use crate::error::{GwError, Result};
use crate::evaluation::{
    analysis_report, component_validation, interpolate_gaps, medians, model_fields, persistence, rollout,
    rollout_metrics, stl_decompose, strengths, truth_fields, weekly_mape, ComponentReport, ComponentSites, Horizon,
    MetricSet, SensorAnalysis,
};
use crate::layers::GeoTransform;
use crate::losses::ControlGrid;
use crate::models::{map_grid, predict_dense_map, Variant};
use crate::training::{train, Checkpoint, EpochRecord, TrainOutputs, Trainer};

#[derive(Debug, Parser)]
#[command(name = "gwnet", version, about = "Spatio-temporal attention models for groundwater levels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic aquifer dataset with known components.
    Simulate(CommonArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Roll out a trained model over the test period and write reports.
    Evaluate(EvalArgs),
    /// Predict gridded maps for one date.
    Map(MapArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Single horizon (weeks or `inf`) instead of the configured list.
    #[arg(long)]
    pub horizon: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub date: NaiveDate,
    #[arg(long = "resolution-km")]
    pub resolution_km: Option<f64>,
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = load_config(&a)?;
            let out = a.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
            let m = cmd_simulate(&cfg, &out, a.force)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train(a) => {
            let cfg = load_config(&a.common)?;
            let out = a
                .common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(cfg.model.variant.name()));
            cmd_train(&cfg, &out, a.checkpoint.as_deref(), true)?;
        }
        Command::Evaluate(a) => {
            let cfg = load_config(&a.common)?;
            let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
            let horizons = match &a.horizon {
                Some(h) => vec![Horizon::parse(h)?],
                None => cfg.eval.horizons()?,
            };
            let s = cmd_evaluate(&cfg, &a.checkpoint, &out, &horizons)?;
            for (label, m) in &s.medians {
                println!("{label:<24} rmse {:.4} mape {:.4}% kge {}", m.rmse, m.mape, fmt_opt(m.kge));
            }
        }
        Command::Map(a) => {
            let cfg = load_config(&a.common)?;
            let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("maps"));
            let km = a.resolution_km.unwrap_or(cfg.eval.map_resolution_km);
            let files = cmd_map(&cfg, &a.checkpoint, a.date, km, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| GwError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

pub const DATASET_FILES: [&str; 5] = ["sensors.csv", "weather.bin", "zones.json", "elevation.bin", "truth.bin"];

/// Synthesises a dataset into `out` and writes `manifest.json`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    if !force {
        if let Some(f) = DATASET_FILES
            .iter()
            .chain(["manifest.json"].iter())
            .map(|f| out.join(f))
            .find(|p| p.exists())
        {
            return Err(GwError::invalid(format!(
                "{} exists; pass --force to overwrite",
                f.display()
            )));
        }
    }
    let syn = cfg.simulate.synthesize(cfg.seed)?;
    syn.dataset.write(out)?;
    syn.truth.write(&out.join("truth.bin"))?;
    let files = DATASET_FILES
        .iter()
        .map(|f| {
            Ok(ManifestEntry {
                file: f.to_string(),
                sha256: sha256_file(&out.join(f))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest { seed: cfg.seed, files };
    let text = serde_json::to_string_pretty(&m).map_err(|e| GwError::invalid(e.to_string()))?;
    write_text(&out.join("manifest.json"), &text)?;
    Ok(m)
}

/// Loads the dataset and prepares windows with the configured split.
pub fn prepare(cfg: &RunConfig) -> Result<(Dataset, Prepared)> {
    let data = Dataset::load(&cfg.data.dir)?;
    let split = cfg.data.split_week(&data)?;
    let p = Prepared::new(&data, cfg.model.t_lags, split)?;
    Ok((data, p))
}

fn epoch_line(rec: &EpochRecord) -> String {
    let mut s = format!("{:>6} {:>9.2e}", rec.epoch, rec.lr);
    for (k, v) in &rec.losses {
        let _ = write!(s, " {k}={v:.5e}");
    }
    let _ = write!(s, " total={:.5e} {}ms", rec.total, rec.wall_ms);
    s
}

/// Trains (or resumes) and writes `checkpoint.json`, `train_log.jsonl` and
/// the effective `config.json` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, verbose: bool) -> Result<Checkpoint> {
    let (_, prepared) = prepare(cfg)?;
    let tc = cfg.train_config();
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            if ck.model.variant != cfg.model.variant {
                return Err(GwError::invalid(format!(
                    "checkpoint holds {}, config asks for {}",
                    ck.model.variant.name(),
                    cfg.model.variant.name()
                )));
            }
            Trainer::resume(&ck, Some(tc.epochs))?
        }
        None => Trainer::new(cfg.model, tc, cfg.loss_weights)?,
    };
    if cfg.model.variant == Variant::Stainet {
        eprintln!("warning: variant STAINet ignores the physics loss weights");
    }
    fs::create_dir_all(out).map_err(|e| GwError::io(out, e))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let ckpt_path = out.join("checkpoint.json");
    let log_path = out.join("train_log.jsonl");
    train(
        &mut trainer,
        &prepared,
        TrainOutputs {
            log: Some(&log_path),
            checkpoint: Some(&ckpt_path),
        },
        |rec| {
            if verbose {
                println!("{}", epoch_line(rec));
            }
        },
    )?;
    let ck = trainer.checkpoint(&prepared.norm);
    ck.write(&ckpt_path)?;
    Ok(ck)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn metric_fields(m: &MetricSet) -> String {
    format!("{},{},{},{},{}", m.nbias, m.rmse, m.mape, fmt_opt(m.nse), fmt_opt(m.kge))
}

/// What `cmd_evaluate` computed, besides the files it wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// `(label, medians)` per rollout, persistence and reconstruction.
    pub medians: Vec<(String, MetricSet)>,
    pub components: Option<ComponentReport>,
}

/// Rollouts at each horizon over the test period, the persistence baseline,
/// the full-series reconstruction, error analyses and, when `truth.bin` is
/// present, component validation.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path, horizons: &[Horizon]) -> Result<EvalSummary> {
    let ck = Checkpoint::read(checkpoint)?;
    if ck.model.variant != cfg.model.variant {
        return Err(GwError::invalid(format!(
            "checkpoint holds {}, config asks for {}",
            ck.model.variant.name(),
            cfg.model.variant.name()
        )));
    }
    let (data, prepared) = prepare(cfg)?;
    if ck.norm != prepared.norm {
        return Err(GwError::invalid("checkpoint was trained on different data or a different split"));
    }
    let model = ck.to_model()?;
    let variant = model.variant().name();
    let (start, end) = (prepared.split_week + 1, prepared.weeks());
    let mut metrics_csv = String::from("sensor_id,variant,horizon,nbias,rmse,mape,nse,kge\n");
    let mut medians_csv = String::from("variant,scope,horizon,nbias,rmse,mape,nse,kge\n");
    let mut summary = EvalSummary {
        medians: Vec::new(),
        components: None,
    };
    let mut analysed = None;
    for &h in horizons {
        let r = rollout(&model, &prepared, start, end, h)?;
        let per = rollout_metrics(&prepared, &r)?;
        for (id, m) in prepared.sensor_ids.iter().zip(&per) {
            writeln!(metrics_csv, "{id},{variant},{},{}", h.label(), metric_fields(m)).expect("string write");
        }
        let med = medians(&per);
        writeln!(medians_csv, "{variant},test,{},{}", h.label(), metric_fields(&med)).expect("string write");
        summary.medians.push((format!("{variant} test h={}", h.label()), med));
        if h == Horizon::Infinite || analysed.is_none() {
            analysed = Some((r, per));
        }
    }
    let pers = medians(&rollout_metrics(&prepared, &persistence(&prepared, start, end)?)?);
    writeln!(medians_csv, "persistence,test,inf,{}", metric_fields(&pers)).expect("string write");
    summary.medians.push(("persistence test".into(), pers));
    let rh = Horizon::Steps(cfg.eval.reconstruction_horizon.max(1));
    let rec = rollout(&model, &prepared, prepared.t_lags, end, rh)?;
    let rec_med = medians(&rollout_metrics(&prepared, &rec)?);
    writeln!(medians_csv, "{variant},full,{},{}", rh.label(), metric_fields(&rec_med)).expect("string write");
    summary.medians.push((format!("{variant} full h={}", rh.label()), rec_med));
    write_text(&out.join("metrics.csv"), &metrics_csv)?;
    write_text(&out.join("medians.csv"), &medians_csv)?;

    if let Some((r, per)) = analysed {
        let mut sensors = Vec::new();
        for (j, s) in data.sensors.iter().enumerate() {
            let filled = interpolate_gaps(&s.values, &s.observed)?;
            let dec = stl_decompose(&filled, 52)?;
            sensors.push(SensorAnalysis {
                sensor_id: s.sensor_id.clone(),
                metrics: per[j],
                missing_fraction: s.missing_fraction(),
                strengths: strengths(&dec),
            });
        }
        let weekly: Vec<(String, f64, f64)> = weekly_mape(&prepared, &r)
            .into_iter()
            .map(|(w, m, s)| (prepared.dates[w].to_string(), m, s))
            .collect();
        analysis_report(&out.join("analysis"), &sensors, &weekly)?;
    }

    let truth_path = cfg.data.dir.join("truth.bin");
    if !truth_path.exists() {
        println!("note: {} not found, component validation skipped", truth_path.display());
    } else if !model.variant().is_physics() {
        println!("note: {variant} has no physical components, component validation skipped");
    } else {
        let truth = GridStack::read(&truth_path)?;
        let grid = ControlGrid::over(prepared.roi(), ck.train.control_rows, ck.train.control_cols)?;
        let sites = ComponentSites::on_grid(&truth, &grid);
        let weeks: Vec<usize> = (start..end).step_by(cfg.eval.component_stride.max(1)).collect();
        let rep = component_validation(
            &model_fields(&model, &prepared, &sites, &weeks)?,
            &truth_fields(&truth, &sites, &weeks),
        )?;
        let text = serde_json::to_string_pretty(&rep).map_err(|e| GwError::invalid(e.to_string()))?;
        write_text(&out.join("components.json"), &text)?;
        summary.components = Some(rep);
    }
    Ok(summary)
}

/// Week whose 7-day span contains `date`.
pub fn week_of(dates: &[NaiveDate], date: NaiveDate) -> Result<usize> {
    let out_of_range = || {
        GwError::invalid(format!(
            "date {date} outside the data range {} to {}",
            dates.first().map_or(String::new(), |d| d.to_string()),
            dates.last().map_or(String::new(), |d| d.to_string())
        ))
    };
    let w = dates.iter().rposition(|d| *d <= date).ok_or_else(out_of_range)?;
    if (date - dates[w]).num_days() >= 7 {
        return Err(out_of_range());
    }
    Ok(w)
}

/// Writes `map_<name>.bin` and `map_<name>.pgm` for each predicted field.
pub fn cmd_map(cfg: &RunConfig, checkpoint: &Path, date: NaiveDate, km: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::read(checkpoint)?;
    let (_, prepared) = prepare(cfg)?;
    let week = week_of(&prepared.dates, date)?;
    if week < prepared.t_lags {
        return Err(GwError::invalid(format!("{date} lacks {} weeks of history", prepared.t_lags)));
    }
    let model = ck.to_model()?;
    let grid = map_grid(&prepared, km)?;
    fs::create_dir_all(out).map_err(|e| GwError::io(out, e))?;
    let b = predict_dense_map(&model, &prepared, week, &grid)?;
    let mut fields = vec![("h", b.h)];
    if let (Some(d), Some(r), Some(k)) = (b.delta, b.residual, b.diffusivity) {
        fields.extend([("delta_gw", d), ("recharge", r), ("diffusivity", k)]);
    }
    let geo = GeoTransform {
        lon0: grid.lon_min,
        lat0: grid.lat_min,
        dlon: grid.dlon,
        dlat: grid.dlat,
    };
    let mut written = Vec::new();
    for (name, values) in fields {
        let g = GridStack {
            frames: 1,
            channels: 1,
            height: grid.rows,
            width: grid.cols,
            geo,
            channel_names: vec![name.to_string()],
            dates: vec![prepared.dates[week]],
            data: values,
        };
        let bin = out.join(format!("map_{name}.bin"));
        g.write(&bin)?;
        let pgm = out.join(format!("map_{name}.pgm"));
        crate::evaluation::write_pgm(&pgm, grid.rows, grid.cols, &g.data)?;
        written.push(bin);
        written.push(pgm);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_flags() {
        let c = Cli::try_parse_from([
            "gwnet", "map", "--config", "c.json", "--out", "o", "--seed", "3", "--checkpoint", "k.json", "--date",
            "2020-05-04", "--resolution-km", "1.5",
        ])
        .unwrap();
        match c.command {
            Command::Map(m) => {
                assert_eq!(m.common.seed, Some(3));
                assert_eq!(m.resolution_km, Some(1.5));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["gwnet", "evaluate", "--checkpoint", "k", "--horizon", "inf"]).is_ok());
        assert!(Cli::try_parse_from(["gwnet", "simulate", "--force"]).is_ok());
    }

    #[test]
    fn week_lookup() {
        let d0 = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
        let dates: Vec<NaiveDate> = (0..5).map(|i| d0 + chrono::Duration::weeks(i)).collect();
        assert_eq!(week_of(&dates, d0 + chrono::Duration::days(9)).unwrap(), 1);
        assert!(week_of(&dates, d0 - chrono::Duration::days(1)).is_err());
        assert!(week_of(&dates, d0 + chrono::Duration::days(35)).is_err());
    }
}
