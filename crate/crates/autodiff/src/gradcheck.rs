use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&g, x)?;
    if y.numel() != 1 {
        return Err(TensorError::NonScalarOutput { shape: y.shape() });
    }
    Ok(y.item())
}

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone().with_requires_grad(true));
    let y = f(&g, x)?;
    g.backward(y)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Gradient check over selected coordinates of a parameter store. `f` builds
/// a scalar from the parameters; coordinates are `(parameter, flat index)`.
/// The flat coordinate index reported on a non-finite probe is the position
/// within `coords`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let pairs = grad_pairs_params(store, f, coords, eps)?;
    Ok(pairs.iter().map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max))
}

/// `(analytic, central difference)` for each coordinate in `coords`.
pub fn grad_pairs_params<F>(
    store: &ParamStore,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<Vec<(f64, f64)>>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut work = store.clone();
    work.zero_grads();
    {
        let g = Graph::new();
        let y = f(&g, &work)?;
        g.backward(y)?;
        work.accumulate_grads(&g)?;
    }
    let mut pairs = Vec::with_capacity(coords.len());
    for (n, &(id, idx)) in coords.iter().enumerate() {
        let analytic = work.tensor(id).grad().map_or(0.0, |gr| gr[idx]);
        let orig = work.tensor(id).data()[idx];
        let eval = |v: f64, s: &mut ParamStore| -> Result<f64> {
            s.tensor_mut(id).data_mut()[idx] = v;
            let g = Graph::new();
            Ok(f(&g, s)?.item())
        };
        let up = eval(orig + eps, &mut work)?;
        let down = eval(orig - eps, &mut work)?;
        work.tensor_mut(id).data_mut()[idx] = orig;
        if !up.is_finite() || !down.is_finite() || !analytic.is_finite() {
            return Err(TensorError::NonFinite { index: n });
        }
        pairs.push((analytic, (up - down) / (2.0 * eps)));
    }
    Ok(pairs)
}
