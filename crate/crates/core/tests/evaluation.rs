//! Metric oracles, rollout semantics, STL properties and reports.

mod common;

use common::{six_point_example, small_model, small_prepared, small_synthetic};
use gwnet::evaluation::{
    analysis_report, component_validation, interpolate_gaps, medians, metrics, pearson, persistence, rollout,
    rollout_metrics, stl_decompose,
    strengths, truth_fields, ComponentSites, Horizon, MetricSet, SensorAnalysis, StlDecomposition, Strengths,
};
use gwnet::models::{Model, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn six_point_example_reproduces_all_metrics() {
    let (h, h_hat, want) = six_point_example();
    let m = metrics(&h, &h_hat, &[true; 6]).unwrap();
    let got = [m.nbias, m.rmse, m.mape, m.nse.unwrap(), m.kge.unwrap()];
    for (name, (g, w)) in ["nbias", "rmse", "mape", "nse", "kge"].iter().zip(got.iter().zip(want)) {
        assert!((g - w).abs() <= 1e-10, "{name}: {g} vs {w}");
    }
}

#[test]
fn perfect_prediction_and_constant_offset() {
    let h: Vec<f64> = (0..11).map(|i| 200.0 + i as f64).collect();
    let m = metrics(&h, &h, &[true; 11]).unwrap();
    assert_eq!(
        m,
        MetricSet {
            nbias: 0.0,
            rmse: 0.0,
            mape: 0.0,
            nse: Some(1.0),
            kge: Some(1.0)
        }
    );
    let shifted: Vec<f64> = h.iter().map(|v| v + 1.0).collect();
    let m = metrics(&h, &shifted, &[true; 11]).unwrap();
    assert!((m.nbias - 0.1).abs() < 1e-12);
    assert!((m.rmse - 1.0).abs() < 1e-12);
}

#[test]
fn constant_truth_leaves_efficiencies_undefined() {
    let m = metrics(&[5.0; 4], &[5.0, 6.0, 5.0, 4.0], &[true; 4]).unwrap();
    assert!(m.nse.is_none() && m.kge.is_none());
    assert!(m.rmse > 0.0 && m.nbias.is_nan());
}

#[test]
fn masked_entries_are_ignored() {
    let h = [100.0, 101.0, 102.0, 103.0];
    let hat = [100.5, 1e6, 102.5, 103.5];
    let a = metrics(&h, &hat, &[true, false, true, true]).unwrap();
    let b = metrics(&[100.0, 102.0, 103.0], &[100.5, 102.5, 103.5], &[true; 3]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn translation_moves_nbias_only_by_the_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let h: Vec<f64> = (0..30).map(|_| rng.random_range(150.0..160.0)).collect();
        let hat: Vec<f64> = h.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let c = rng.random_range(-3.0..3.0);
        let moved: Vec<f64> = hat.iter().map(|v| v + c).collect();
        let (a, b) = (metrics(&h, &hat, &[true; 30]).unwrap(), metrics(&h, &moved, &[true; 30]).unwrap());
        let range = h.iter().copied().fold(f64::MIN, f64::max) - h.iter().copied().fold(f64::MAX, f64::min);
        assert!((b.nbias - a.nbias - c / range).abs() < 1e-12);
        assert!((pearson(&h, &hat).unwrap() - pearson(&h, &moved).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn pearson_examples() {
    let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
    assert!((r - 0.6f64.sqrt()).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
}

#[test]
fn independent_columns_rarely_correlate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 2000;
    let mut large = 0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..28).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..28).map(|_| rng.random()).collect();
        if pearson(&x, &y).unwrap().abs() >= 0.5 {
            large += 1;
        }
    }
    assert!(large * 100 <= trials, "{large} of {trials} exceeded 0.5");
}

fn decomposition(t: Vec<f64>, s: Vec<f64>, r: Vec<f64>) -> StlDecomposition {
    StlDecomposition {
        trend: t,
        seasonal: s,
        residual: r,
        period: 2,
    }
}

#[test]
fn strength_examples() {
    // Var(R) = 0.25, Var(T+R) = 1.5, Var(S+R) = 1.25 (population variances).
    let s = strengths(&decomposition(
        vec![1.0, 2.0, 3.0, 4.0],
        vec![1.0, -1.0, 1.0, -1.0],
        vec![0.5, -0.5, -0.5, 0.5],
    ));
    assert!((s.trend - (1.0 - 0.25 / 1.5)).abs() <= 1e-10);
    assert!((s.seasonal - (1.0 - 0.25 / 1.25)).abs() <= 1e-10);

    let s = strengths(&decomposition(vec![1.0, 3.0, 2.0], vec![0.5, -0.5, 0.0], vec![0.0; 3]));
    assert_eq!((s.trend, s.seasonal), (1.0, 1.0));

    let noise = vec![0.3, -0.1, 0.4, -0.6];
    let s = strengths(&decomposition(vec![7.0; 4], vec![0.0; 4], noise));
    assert!(s.trend.abs() < 1e-12);

    let s: Strengths = strengths(&decomposition(vec![2.0; 3], vec![0.0; 3], vec![0.0; 3]));
    assert!(s.trend_degenerate && s.seasonal_degenerate);
    assert_eq!((s.trend, s.seasonal), (0.0, 0.0));
}

#[test]
fn stl_properties() {
    let n = 520;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let messy: Vec<f64> = (0..n)
        .map(|i| 0.01 * i as f64 + (i as f64 * 0.12).sin() + rng.random_range(-0.5..0.5))
        .collect();
    let d = stl_decompose(&messy, 52).unwrap();
    for i in 0..n {
        assert!((d.trend[i] + d.seasonal[i] + d.residual[i] - messy[i]).abs() <= 1e-10);
    }
    for c in 0..n / 52 {
        let m: f64 = d.seasonal[c * 52..(c + 1) * 52].iter().sum::<f64>() / 52.0;
        assert!(m.abs() <= 1e-8);
    }

    let sine: Vec<f64> = (0..n).map(|i| 3.0 * (2.0 * std::f64::consts::PI * i as f64 / 52.0).sin()).collect();
    let s = strengths(&stl_decompose(&sine, 52).unwrap());
    assert!(s.seasonal >= 0.9, "seasonal strength {}", s.seasonal);

    let ramp: Vec<f64> = (0..n).map(|i| 0.05 * i as f64).collect();
    let d = stl_decompose(&ramp, 52).unwrap();
    let s = strengths(&d);
    assert!(s.trend >= 0.9, "trend strength {}", s.trend);
    assert!(d.seasonal.iter().all(|v| v.abs() < 1e-6));

    assert!(stl_decompose(&ramp[..100], 52).is_err());
}

#[test]
fn gaps_are_linearly_interpolated() {
    let v = [1.0, 9.0, 9.0, 4.0, 5.0, 9.0];
    let o = [true, false, false, true, true, false];
    assert_eq!(interpolate_gaps(&v, &o).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0]);
    assert!(interpolate_gaps(&v, &[false; 6]).is_err());
}

#[test]
fn horizon_one_rollout_equals_window_predictions() {
    let prepared = small_prepared(31);
    let model = Model::new(small_model(Variant::Ilb), 3).unwrap();
    let (start, end) = (prepared.split_week + 1, prepared.weeks());
    let r = rollout(&model, &prepared, start, end, Horizon::Steps(1)).unwrap();
    for (k, target) in (start..end).enumerate() {
        let direct = model
            .predict(&prepared.input(target).unwrap(), &prepared.sensor_queries(target), &prepared.norm)
            .unwrap();
        assert_eq!(r.predictions[k], direct, "week {target}");
    }
}

#[test]
fn reconstruction_with_horizon_26_covers_the_series() {
    let prepared = small_prepared(32);
    let model = Model::new(small_model(Variant::Stainet), 3).unwrap();
    let r = rollout(&model, &prepared, prepared.t_lags, prepared.weeks(), Horizon::Steps(26)).unwrap();
    assert_eq!(r.weeks.len(), prepared.weeks() - prepared.t_lags);
    assert!(r.predictions.iter().all(|b| b.h.iter().all(|v| v.is_finite())));
    // Reseeding restores the recorded lags, so step 26 matches a fresh window.
    let t = prepared.t_lags + 26;
    let fresh = model
        .predict(&prepared.input(t).unwrap(), &prepared.sensor_queries(t), &prepared.norm)
        .unwrap();
    assert_eq!(r.predictions[26], fresh);
    assert!(rollout(&model, &prepared, 10, 20, Horizon::Steps(0)).is_err());
}

#[test]
fn silent_sensors_are_left_out_of_medians() {
    let mut prepared = small_prepared(35);
    let (start, end) = (prepared.split_week + 1, prepared.weeks());
    for w in start..end {
        prepared.observed[w][0] = false;
    }
    let r = persistence(&prepared, start, end).unwrap();
    let per = rollout_metrics(&prepared, &r).unwrap();
    assert!(per[0].rmse.is_nan() && per[0].kge.is_none());
    assert_eq!(medians(&per), medians(&per[1..]));
}

#[test]
fn persistence_holds_the_last_record() {
    let prepared = small_prepared(33);
    let start = prepared.split_week + 1;
    let p = persistence(&prepared, start, prepared.weeks()).unwrap();
    assert!(p.predictions.iter().all(|b| b.h == prepared.values_m[start - 1]));
}

#[test]
fn oracle_fields_correlate_perfectly() {
    let syn = small_synthetic(34);
    let sites = ComponentSites::all_cells(&syn.truth);
    let weeks: Vec<usize> = (100..200).step_by(5).collect();
    let truth = truth_fields(&syn.truth, &sites, &weeks);
    let rep = component_validation(&truth, &truth).unwrap();
    assert!((rep.r_diffusivity.unwrap() - 1.0).abs() < 1e-12);
    assert!((rep.r_mean_recharge.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rep.delta_sign_agreement, 1.0);
}

fn analysis(id: &str, mape: f64, missing: f64) -> SensorAnalysis {
    SensorAnalysis {
        sensor_id: id.to_string(),
        metrics: MetricSet {
            nbias: 0.0,
            rmse: mape,
            mape,
            nse: Some(0.5),
            kge: Some(1.0 - mape),
        },
        missing_fraction: missing,
        strengths: Strengths {
            trend: missing,
            seasonal: 0.5 * missing,
            trend_degenerate: false,
            seasonal_degenerate: false,
        },
    }
}

#[test]
fn analysis_report_writes_tables_and_notes() {
    let dir = tempfile::tempdir().unwrap();
    let sensors: Vec<_> = (0..5).map(|i| analysis(&format!("s{i}"), 0.1 * i as f64, 0.05 * i as f64)).collect();
    let weekly = vec![("2020-01-06".to_string(), 0.2, 0.05)];
    let out = analysis_report(dir.path(), &sensors, &weekly).unwrap();
    let r = out.iter().find(|(n, _)| n == "mape_vs_missing").unwrap().1.unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    for f in ["mape_vs_missing.csv", "kge_vs_seasonal_strength.csv", "correlations.csv", "weekly_mape.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let small = tempfile::tempdir().unwrap();
    let out = analysis_report(small.path(), &sensors[..2], &[]).unwrap();
    assert!(out.iter().all(|(_, r)| r.is_none()));
    let text = std::fs::read_to_string(small.path().join("correlations.csv")).unwrap();
    assert!(text.contains("fewer than 3 sensors"));
}
