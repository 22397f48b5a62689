//! Training-loop behaviour on small synthetic sets.

mod common;

use common::{small_model, small_synthetic};
use gwnet::data::Prepared;
use gwnet::losses::{LossWeights, Term};
use gwnet::models::{NamedTensor, Variant};
use gwnet::training::{
    lr_schedule, train, window_loss, Checkpoint, ControlPoints, TrainConfig, TrainOutputs, Trainer,
};

/// Published learning rates with a short budget and a coarse control grid.
fn quick_config(epochs: usize, windows: Option<usize>) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_drop_epoch: epochs - 1,
        lr_final: 2.5e-4,
        windows_per_epoch: windows,
        control_rows: 6,
        control_cols: 6,
        seed: 3,
        ..TrainConfig::paper(Variant::Ilb)
    }
}

fn trainer(variant: Variant, cfg: TrainConfig) -> Trainer {
    Trainer::new(small_model(variant), cfg, LossWeights::default()).unwrap()
}

fn mean_data_loss(tr: &Trainer, p: &Prepared, control: &ControlPoints) -> f64 {
    let w = p.train_windows();
    let sum: f64 = w
        .iter()
        .map(|w| window_loss(&tr.model, p, control, &tr.weights, w.target).unwrap().get(Term::Data).unwrap())
        .sum();
    sum / w.len() as f64
}

fn params(tr: &Trainer) -> Vec<NamedTensor> {
    tr.model.named_params()
}

#[test]
fn lr_schedule_steps_at_drop_epoch() {
    let cfg = TrainConfig::paper(Variant::Ilb);
    assert_eq!(lr_schedule(0, &cfg), 2.5e-4);
    assert_eq!(lr_schedule(399, &cfg), 2.5e-4);
    assert_eq!(lr_schedule(400, &cfg), 1e-4);
}

#[test]
fn data_loss_falls_on_toy_set() {
    let syn = small_synthetic(4);
    // Targets 4..=23 are the 20 training windows.
    let p = Prepared::new(&syn.dataset, 4, 23).unwrap();
    assert_eq!(p.train_windows().len(), 20);
    let cfg = quick_config(5, None);
    assert_eq!(lr_schedule(0, &cfg), 2.5e-4);
    let mut tr = trainer(Variant::Ilb, cfg.clone());
    let control = ControlPoints::new(&p, cfg.control_rows, cfg.control_cols, cfg.zone_buffer_deg).unwrap();
    let mut history = vec![mean_data_loss(&tr, &p, &control)];
    for _ in 0..5 {
        tr.run_epoch(&p, &control, &p.train_windows()).unwrap();
        history.push(mean_data_loss(&tr, &p, &control));
    }
    let drops = history.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 4, "data loss history {history:?}");
}

#[test]
fn overfits_single_window() {
    let p = common::small_prepared(6);
    let window = p.train_windows()[40];
    let cfg = quick_config(500, None);
    let mut tr = trainer(Variant::Ilb, cfg.clone());
    let control = ControlPoints::new(&p, cfg.control_rows, cfg.control_cols, cfg.zone_buffer_deg).unwrap();
    let start = window_loss(&tr.model, &p, &control, &tr.weights, window.target).unwrap();
    for _ in 0..500 {
        tr.run_epoch(&p, &control, &[window]).unwrap();
    }
    let end = window_loss(&tr.model, &p, &control, &tr.weights, window.target).unwrap();
    let (a, b) = (start.get(Term::Data).unwrap(), end.get(Term::Data).unwrap());
    assert!(b < 1e-3, "data loss {a} -> {b}");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let p = common::small_prepared(7);
    let run = || {
        let mut tr = trainer(Variant::Ilrb, quick_config(3, Some(6)));
        train(&mut tr, &p, TrainOutputs::default(), |_| {}).unwrap();
        params(&tr)
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let bits = |t: &NamedTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y), "{}", x.name);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let p = common::small_prepared(8);
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("ckpt.json");
    let mut straight = trainer(Variant::Ilb, quick_config(4, Some(5)));
    train(&mut straight, &p, TrainOutputs::default(), |_| {}).unwrap();

    let mut first = trainer(Variant::Ilb, quick_config(4, Some(5)));
    first.config.epochs = 2;
    first.config.lr_drop_epoch = 1;
    // Same schedule as the straight run for the first two epochs.
    first.config.lr_final = first.config.lr_initial;
    train(&mut first, &p, TrainOutputs::default(), |_| {}).unwrap();
    let mut ckpt = first.checkpoint(&p.norm);
    ckpt.train = quick_config(4, Some(5));
    ckpt.write(&ckpt_path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::read(&ckpt_path).unwrap(), None).unwrap();
    assert_eq!(resumed.epoch, 2);
    train(&mut resumed, &p, TrainOutputs::default(), |_| {}).unwrap();
    assert_eq!(params(&straight), params(&resumed));
}

#[test]
fn unobserved_targets_do_not_affect_losses() {
    let mut p = common::small_prepared(9);
    let control = ControlPoints::new(&p, 6, 6, 0.05).unwrap();
    let tr = trainer(Variant::Ilrb, quick_config(2, None));
    let target = (p.t_lags + 1..=p.split_week)
        .find(|&t| p.observed[t].contains(&false) && p.observed[t - 1].contains(&false))
        .expect("a week with gaps at the target and the week before");
    let before = window_loss(&tr.model, &p, &control, &tr.weights, target).unwrap();
    for week in [target, target - 1] {
        for s in 0..p.observed[week].len() {
            if !p.observed[week][s] {
                p.values_m[week][s] += 37.5;
            }
        }
    }
    let after = window_loss(&tr.model, &p, &control, &tr.weights, target).unwrap();
    assert_eq!(before, after);
}

#[test]
fn test_period_never_reaches_training() {
    let p = common::small_prepared(10);
    let mut poisoned = p.clone();
    for week in p.split_week + 1..p.weeks() {
        poisoned.values_m[week].iter_mut().for_each(|v| *v = f64::NAN);
        poisoned.values_z[week].iter_mut().for_each(|v| *v = f64::NAN);
    }
    let run = |data: &Prepared| {
        let mut tr = trainer(Variant::Ilb, quick_config(2, Some(8)));
        train(&mut tr, data, TrainOutputs::default(), |_| {}).unwrap();
        params(&tr)
    };
    assert_eq!(run(&p), run(&poisoned));

    let control = ControlPoints::new(&p, 6, 6, 0.05).unwrap();
    let mut tr = trainer(Variant::Ilb, quick_config(2, None));
    assert!(tr.run_epoch(&p, &control, &p.test_windows()[..1]).is_err());
}

#[test]
fn physics_variant_epochs_cost_more_than_stainet() {
    let p = common::small_prepared(11);
    let control = ControlPoints::new(&p, 8, 8, 0.05).unwrap();
    let windows = &p.train_windows()[..12];
    let mut plain = trainer(Variant::Stainet, quick_config(4, None));
    let mut ilb = trainer(Variant::Ilb, quick_config(4, None));
    // Interleaved epochs and the fastest of each, so load from concurrent
    // tests hits both alike.
    let (mut t_plain, mut t_ilb) = (u128::MAX, u128::MAX);
    for _ in 0..3 {
        t_plain = t_plain.min(plain.run_epoch(&p, &control, windows).unwrap().wall_ms);
        t_ilb = t_ilb.min(ilb.run_epoch(&p, &control, windows).unwrap().wall_ms);
    }
    assert!(t_ilb > t_plain, "ILB {t_ilb} ms vs STAINet {t_plain} ms");
}
