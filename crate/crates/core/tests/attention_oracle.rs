//! Multi-head attention and the interpolation block against plain loops.

mod common;

use common::{max_abs_diff, naive_linear, naive_mha, naive_stai, random_mat, Mat};
use gwnet::attention::{MultiHead, Stai};
use gwnet_autodiff::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(x: &Mat) -> Tensor {
    Tensor::from_rows(x).unwrap()
}

#[test]
fn fifty_random_cases_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mha_worst, mut stai_worst) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let heads = case % 8 + 1;
        let d = heads * rng.random_range(1..=3);
        let n = rng.random_range(1..=16);
        let p = rng.random_range(1..=16);
        let mut store = ParamStore::new();
        let m = MultiHead::new(&mut store, "m", d, heads, &mut rng).unwrap();
        let s = Stai::new(&mut store, "s", d, heads, &mut rng).unwrap();
        let (q, k, v) = (random_mat(&mut rng, n, d), random_mat(&mut rng, p, d), random_mat(&mut rng, p, d));
        let g = Graph::new();
        let (qv, kv, vv) = (g.constant(tensor(&q)), g.constant(tensor(&k)), g.constant(tensor(&v)));
        let got = m.forward(&g, &store, qv, kv, vv).unwrap().value();
        mha_worst = mha_worst.max(max_abs_diff(&got, &naive_mha(&store, &m, &q, &k, &v)));
        let got = s.forward(&g, &store, qv, kv, vv).unwrap().value();
        stai_worst = stai_worst.max(max_abs_diff(&got, &naive_stai(&store, &s, &q, &k, &v)));
    }
    assert!(mha_worst <= 1e-12, "multi_head deviates by {mha_worst:e}");
    assert!(stai_worst <= 1e-12, "stai deviates by {stai_worst:e}");
}

#[test]
fn single_key_attention_copies_the_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let m = MultiHead::new(&mut store, "m", 4, 2, &mut rng).unwrap();
    let q = random_mat(&mut rng, 5, 4);
    let k = random_mat(&mut rng, 1, 4);
    let v = random_mat(&mut rng, 1, 4);
    let g = Graph::new();
    let out = m
        .forward(&g, &store, g.constant(tensor(&q)), g.constant(tensor(&k)), g.constant(tensor(&v)))
        .unwrap()
        .value();
    let expect = naive_linear(&store, &m.o, &naive_linear(&store, &m.v, &v));
    for r in 0..5 {
        for c in 0..4 {
            assert!((out[r * 4 + c] - expect[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn heads_must_divide_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    assert!(MultiHead::new(&mut store, "m", 6, 4, &mut rng).is_err());
}
