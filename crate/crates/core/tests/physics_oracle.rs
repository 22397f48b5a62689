//! Solver properties, component identity and dataset synthesis.

mod common;

use common::small_sim;
use gwnet::error::GwError;
use gwnet::losses::fd_laplacian;
use gwnet::physics::{laplacian_cells, Aquifer, Forcing, SimConfig, TRUTH_DELTA, TRUTH_DIFFUSIVITY, TRUTH_HEAD, TRUTH_RECHARGE};
use gwnet_autodiff::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet_forcing(n: usize, weeks: usize) -> Forcing {
    Forcing {
        zone_pattern: vec![0.0; n],
        well_pattern: vec![0.0; n],
        recharge_amplitude: 0.0,
        diffuse_amplitude: 0.0,
        abstraction_amplitude: 0.0,
        abstraction_base: 0.0,
        offset: 0.0,
        wet: vec![0.0; weeks],
        dry: vec![0.0; weeks],
        storm: vec![1.0; weeks],
    }
}

fn uniform(rows: usize, cols: usize, dx: f64, d: f64, h: Vec<f64>, boundary: Vec<f64>) -> Aquifer {
    let n = rows * cols;
    Aquifer {
        rows,
        cols,
        dx,
        dy: dx,
        d_field: vec![d; n],
        boundary,
        initial_h: h,
        forcing: quiet_forcing(n, 10),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn cfl_violation_names_the_worst_cell() {
    let mut aq = uniform(5, 5, 1000.0, 1e5, vec![0.0; 25], vec![0.0; 25]);
    aq.validate().unwrap();
    aq.d_field[2 * 5 + 3] = 3e5;
    aq.d_field[4] = 2.6e5;
    match aq.validate() {
        Err(GwError::Cfl { row, col, .. }) => assert_eq!((row, col), (2, 3)),
        other => panic!("expected CFL error, got {other:?}"),
    }
}

#[test]
fn trivial_states_are_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h: Vec<f64> = (0..36).map(|_| rng.random_range(90.0..110.0)).collect();
    let frozen = uniform(6, 6, 2000.0, 0.0, h.clone(), h.clone());
    assert_eq!(frozen.step(&h, 0), h);
    let flat = vec![150.0; 36];
    let still = uniform(6, 6, 2000.0, 5e5, flat.clone(), flat.clone());
    assert_eq!(still.step(&flat, 3), flat);
}

#[test]
fn stable_for_ten_thousand_steps_at_the_cfl_limit() {
    let (rows, cols, dx) = (12, 12, 2000.0);
    let d = 0.5 / (2.0 / (dx * dx));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut h: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-100.0..100.0)).collect();
    let aq = uniform(rows, cols, dx, d, h.clone(), h.clone());
    aq.validate().unwrap();
    let bound = max_abs(&h);
    for _ in 0..10_000 {
        h = aq.step_unforced(&h);
        assert!(max_abs(&h) <= bound + 1e-9);
    }
}

#[test]
fn unforced_state_relaxes_to_the_harmonic_solution() {
    let (rows, cols, dx) = (10, 10, 2000.0);
    let mut boundary = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            boundary[r * cols + c] = 100.0 + 2.0 * r as f64 - c as f64;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut h: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(50.0..150.0)).collect();
    let aq = uniform(rows, cols, dx, 4e5, h.clone(), boundary.clone());
    let mut last_change = f64::INFINITY;
    for _ in 0..4000 {
        let next = aq.step_unforced(&h);
        last_change = next.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        h = next;
    }
    assert!(last_change < 1e-9, "still changing by {last_change}");
    // The linear boundary profile is itself harmonic.
    let dev = h.iter().zip(&boundary).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-6, "off the harmonic solution by {dev}");
}

#[test]
fn bump_decays_and_mass_change_equals_boundary_flux() {
    let (rows, cols, dx) = (9, 9, 1000.0);
    let d = 1e5;
    let mut h = vec![0.0; rows * cols];
    h[4 * cols + 4] = 10.0;
    let aq = uniform(rows, cols, dx, d, h.clone(), vec![0.0; rows * cols]);
    let interior = |v: &[f64]| -> f64 {
        (1..rows - 1).flat_map(|r| (1..cols - 1).map(move |c| (r, c))).map(|(r, c)| v[r * cols + c]).sum()
    };
    let mut peak = h[4 * cols + 4];
    for _ in 0..40 {
        let next = aq.step_unforced(&h);
        // Flux through the border: each border-adjacent interior cell
        // exchanges D/dx² (h_border − h_cell) with every border neighbour.
        let k = d / (dx * dx);
        let mut flux = 0.0;
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
                    if nr == 0 || nc == 0 || nr == rows - 1 || nc == cols - 1 {
                        flux += k * (h[nr * cols + nc] - h[r * cols + c]);
                    }
                }
            }
        }
        let change = interior(&next) - interior(&h);
        assert!((change - flux).abs() < 1e-12, "mass change {change} vs flux {flux}");
        assert!(next[4 * cols + 4] < peak);
        peak = next[4 * cols + 4];
        h = next;
    }
}

#[test]
fn component_identity_and_cross_oracle() {
    let syn = small_sim().synthesize(4).unwrap();
    let aq = &syn.aquifer;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = aq.rows * aq.cols;
    let mut h: Vec<f64> = aq.initial_h.clone();
    let mut worst = 0.0f64;
    for week in 0..50 {
        let (delta, rech) = aq.component_truth(&h, week);
        let next = aq.step(&h, week);
        for r in 1..aq.rows - 1 {
            for c in 1..aq.cols - 1 {
                let i = r * aq.cols + c;
                worst = worst.max((next[i] - (h[i] + delta[i] + rech[i])).abs());
            }
        }
        h = next;
    }
    assert!(worst < 1e-12, "identity residual {worst:e}");

    // Δ matches D·∇²h built with the autodiff stencil.
    let (delta, _) = aq.component_truth(&h, 0);
    let g = Graph::new();
    let lap = fd_laplacian(g.constant_from(vec![aq.rows, aq.cols], h.clone()).unwrap(), aq.dx, aq.dy)
        .unwrap()
        .value();
    for r in 1..aq.rows - 1 {
        for c in 1..aq.cols - 1 {
            let want = aq.d_field[r * aq.cols + c] * lap[(r - 1) * (aq.cols - 2) + (c - 1)];
            assert!((delta[r * aq.cols + c] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    // Independent stencils agree on random grids.
    for _ in 0..20 {
        let (rows, cols) = (rng.random_range(3..14), rng.random_range(3..14));
        let (dx, dy) = (rng.random_range(500.0..4000.0), rng.random_range(500.0..4000.0));
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..300.0)).collect();
        let a = laplacian_cells(&v, rows, cols, dx, dy);
        let b = fd_laplacian(g.constant_from(vec![rows, cols], v).unwrap(), dx, dy).unwrap().value();
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                assert!((a[r * cols + c] - b[(r - 1) * (cols - 2) + (c - 1)]).abs() <= 1e-12);
            }
        }
    }
    assert_eq!(syn.truth.plane(0, TRUTH_DIFFUSIVITY), &aq.d_field[..]);
    assert_eq!(syn.truth.plane(0, TRUTH_DELTA).len(), n);
}

#[test]
fn refined_grid_reproduces_the_coarse_solution() {
    // Unit square, κ = 1, fixed time κT = 0.0125. The coarse step uses
    // κΔt = 0.1·dx²; the fine grid halves dx and quarters Δt.
    let run = |n: usize, step: f64, steps: usize| -> Vec<f64> {
        let dx = 1.0 / (n - 1) as f64;
        let h: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 * dx, (i / n) as f64 * dx);
                (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
            })
            .collect();
        let aq = uniform(n, n, dx, step, h.clone(), vec![0.0; n * n]);
        aq.validate().unwrap();
        let mut state = h;
        for _ in 0..steps {
            state = aq.step_unforced(&state);
        }
        state
    };
    let total = 0.0125;
    let mut errs = Vec::new();
    for n in [9usize, 17] {
        let dx = 1.0 / (n - 1) as f64;
        let step = 0.1 * dx * dx;
        let steps = (total / step).round() as usize;
        let coarse = run(n, step, steps);
        let fine = run(2 * n - 1, step / 4.0, 4 * steps);
        let f = 2 * n - 1;
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                worst = worst.max((coarse[r * n + c] - fine[2 * r * f + 2 * c]).abs());
            }
        }
        errs.push(worst);
    }
    // O(dx²): halving the coarse spacing cuts the discrepancy about fourfold.
    let ratio = errs[0] / errs[1];
    assert!((3.0..5.0).contains(&ratio), "discrepancies {errs:?}");
}

#[test]
fn noise_free_sensors_equal_solver_heads() {
    let cfg = SimConfig {
        noise_sd: 0.0,
        missing_rate: 0.0,
        ..small_sim()
    };
    let syn = cfg.synthesize(7).unwrap();
    for (s, (r, c)) in syn.dataset.sensors.iter().zip(&syn.sensor_cells) {
        assert!(s.observed.iter().all(|o| *o));
        for (w, v) in s.values.iter().enumerate() {
            assert_eq!(*v, syn.truth.plane(w, TRUTH_HEAD)[r * cfg.cols + c]);
        }
    }
    let h1 = syn.truth.plane(1, TRUTH_HEAD);
    let h0 = syn.truth.plane(0, TRUTH_HEAD);
    let d1 = syn.truth.plane(1, TRUTH_DELTA);
    let r1 = syn.truth.plane(1, TRUTH_RECHARGE);
    let i = 5 * cfg.cols + 6;
    assert!((h1[i] - (h0[i] + d1[i] + r1[i])).abs() < 1e-12);
}

#[test]
fn realized_missing_fraction_near_target() {
    let cfg = SimConfig {
        weeks: 1200,
        ..small_sim()
    };
    let syn = cfg.synthesize(8).unwrap();
    let total: usize = syn.dataset.sensors.iter().map(|s| s.observed.len()).sum();
    let missing: usize = syn.dataset.sensors.iter().map(|s| s.observed.iter().filter(|o| !**o).count()).sum();
    let frac = missing as f64 / total as f64;
    assert!((frac - 0.23).abs() <= 0.05, "missing fraction {frac}");
}

#[test]
fn fixed_seed_gives_identical_bytes() {
    let a = small_sim().synthesize(9).unwrap();
    let b = small_sim().synthesize(9).unwrap();
    assert_eq!(a.truth.to_bytes().unwrap(), b.truth.to_bytes().unwrap());
    assert_eq!(a.dataset.weather.to_bytes().unwrap(), b.dataset.weather.to_bytes().unwrap());
    assert_eq!(a.dataset.sensors, b.dataset.sensors);
    let c = small_sim().synthesize(10).unwrap();
    assert_ne!(a.dataset.sensors, c.dataset.sensors);
}

#[test]
fn short_or_untiled_configs_are_rejected() {
    assert!(SimConfig { weeks: 150, ..small_sim() }.synthesize(1).is_err());
    assert!(SimConfig { weather_rows: 3, ..small_sim() }.synthesize(1).is_err());
}
