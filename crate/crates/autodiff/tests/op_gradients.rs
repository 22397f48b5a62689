use gwnet_autodiff::{grad_check, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2, 2] kept at least `gap` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let mut t = random(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink + 1e-300);
        }
    }
    t
}

fn weighted<'g>(g: &'g Graph, y: Var<'g>) -> Result<Var<'g>> {
    // fixed non-uniform weights so that every output coordinate matters
    let n = y.numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = g.constant_from(y.shape(), w)?;
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, f: F, point: &Tensor)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let e = grad_check(f, point, EPS).unwrap();
    assert!(e < TOL, "{name}: relative error {e:e}");
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = [3, 4];
    let p = random(&mut rng, &shape, -2.0, 2.0);
    check("neg", |g, x| weighted(g, x.neg()), &p);
    check("exp", |g, x| weighted(g, x.exp()), &p);
    check("square", |g, x| weighted(g, x.square()), &p);
    check("sin", |g, x| weighted(g, x.sin()), &p);
    check("cos", |g, x| weighted(g, x.cos()), &p);
    check("softplus", |g, x| weighted(g, x.softplus()), &p);
    check("add_scalar", |g, x| weighted(g, x.add_scalar(1.3)), &p);
    check("mul_scalar", |g, x| weighted(g, x.mul_scalar(-0.7)), &p);
    let pos = random(&mut rng, &shape, 0.1, 2.0);
    check("log", |g, x| weighted(g, x.ln()), &pos);
    check("sqrt", |g, x| weighted(g, x.sqrt()), &pos);
    let p0 = away_from(&mut rng, &shape, 0.0, 1e-3);
    check("abs", |g, x| weighted(g, x.abs()), &p0);
    check("leaky_relu", |g, x| weighted(g, x.leaky_relu(0.01)), &p0);
    let p5 = away_from(&mut rng, &shape, 0.5, 1e-3);
    check("max_scalar", |g, x| weighted(g, x.max_scalar(0.5)), &p5);
}

fn apply<'g>(op: u8, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    match op {
        0 => x.add(y),
        1 => x.sub(y),
        2 => x.mul(y),
        _ => x.div(y),
    }
}

#[test]
fn binary_ops_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes: [(&[usize], &[usize]); 5] = [
        (&[3, 4], &[3, 4]),
        (&[3, 4], &[4]),
        (&[3, 4], &[1]),
        (&[3, 1], &[1, 4]),
        (&[2, 3, 4], &[3, 1]),
    ];
    for (sa, sb) in shapes {
        let a = random(&mut rng, sa, -2.0, 2.0);
        let b = random(&mut rng, sb, 0.5, 2.0);
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
            let bc = b.clone();
            check(
                &format!("{name} lhs {sa:?}x{sb:?}"),
                move |g, x| weighted(g, apply(op, x, g.constant(bc.clone()))?),
                &a,
            );
            let ac = a.clone();
            check(
                &format!("{name} rhs {sa:?}x{sb:?}"),
                move |g, y| weighted(g, apply(op, g.constant(ac.clone()), y)?),
                &b,
            );
        }
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[4, 2], -2.0, 2.0);
    let bc = b.clone();
    check("matmul lhs", move |g, x| weighted(g, x.matmul(g.constant(bc.clone()))?), &a);
    let ac = a.clone();
    check("matmul rhs", move |g, y| weighted(g, g.constant(ac.clone()).matmul(y)?), &b);
    check("transpose", |g, x| weighted(g, x.t()?), &a);
    check("reshape", |g, x| weighted(g, x.reshape(vec![2, 6])?), &a);
    check("sum_axis0", |g, x| weighted(g, x.sum_axis(0)?), &a);
    check("sum_axis1", |g, x| weighted(g, x.sum_axis(1)?), &a);
    check("mean_axis1", |g, x| weighted(g, x.mean_axis(1)?), &a);
    check("mean", |g, x| weighted(g, x.mean()), &a);
    check("softmax0", |g, x| weighted(g, x.softmax(0)?), &a);
    check("softmax1", |g, x| weighted(g, x.softmax(1)?), &a);
    check("slice", |g, x| weighted(g, x.slice(1, 1, 3)?), &a);
    check("index_rows", |g, x| weighted(g, x.index_rows(&[2, 0, 2])?), &a);
    check(
        "concat",
        |g, x| {
            let s = x.square();
            weighted(g, Var::concat(&[x, s, x], 1)?)
        },
        &a,
    );
}

#[test]
fn conv_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 4, 4], -2.0, 2.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let b = random(&mut rng, &[3], -2.0, 2.0);
    let (wc, bc) = (w.clone(), b.clone());
    check(
        "conv input",
        move |g, x| {
            weighted(g, x.conv2d_same(g.constant(wc.clone()), Some(g.constant(bc.clone())))?)
        },
        &x,
    );
    let (xc, bc) = (x.clone(), b.clone());
    check(
        "conv weight",
        move |g, w| weighted(g, g.constant(xc.clone()).conv2d_same(w, Some(g.constant(bc.clone())))?),
        &w,
    );
    let (xc, wc) = (x.clone(), w.clone());
    check(
        "conv bias",
        move |g, b| weighted(g, g.constant(xc.clone()).conv2d_same(g.constant(wc.clone()), Some(b))?),
        &b,
    );
    check("avg_pool2", |g, x| weighted(g, x.avg_pool2()?), &x);
}

#[test]
fn softmax_cross_like_composite() {
    // -log softmax(x)[target] summed over rows
    let p = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 1.1, 0.0, -0.4]).unwrap();
    let e = grad_check(
        |g, x| {
            let onehot = g.constant_from(vec![2, 3], vec![0., 0., 1., 1., 0., 0.])?;
            Ok(x.softmax(1)?.ln().mul(onehot)?.sum().neg())
        },
        &p,
        EPS,
    )
    .unwrap();
    assert!(e < 1e-6, "{e:e}");
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=4, 1usize..=4).prop_map(|(r, c)| vec![r, c])
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    shape_strategy().prop_flat_map(|s| {
        let n = s[0] * s[1];
        prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(s.clone(), d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_ops_pass_grad_check(t in tensor_strategy()) {
        for (name, e) in [
            ("exp", grad_check(|g, x| weighted(g, x.exp()), &t, EPS).unwrap()),
            ("softmax", grad_check(|g, x| weighted(g, x.softmax(1)?), &t, EPS).unwrap()),
            ("sin*x", grad_check(|g, x| weighted(g, x.sin().mul(x)?), &t, EPS).unwrap()),
            ("xtx", grad_check(|g, x| weighted(g, x.t()?.matmul(x)?), &t, EPS).unwrap()),
            ("sum_axis", grad_check(|g, x| weighted(g, x.square().sum_axis(0)?), &t, EPS).unwrap()),
        ] {
            prop_assert!(e < TOL, "{} error {:e}", name, e);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(t in tensor_strategy()) {
        let g = Graph::new();
        let s = g.constant(t.clone()).softmax(1).unwrap().value();
        let cols = t.shape()[1];
        for row in s.chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn reductions_are_linear(t in tensor_strategy(), c in -3.0f64..3.0) {
        let grad_of = |scale: f64, mean: bool| {
            let g = Graph::new();
            let x = g.leaf(t.clone().with_requires_grad(true));
            let r = if mean { x.square().mean() } else { x.square().sum() };
            g.backward(r.mul_scalar(scale)).unwrap();
            x.grad().unwrap()
        };
        for mean in [false, true] {
            let base = grad_of(1.0, mean);
            let scaled = grad_of(c, mean);
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((c * b - s).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
