use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Builds a scalar loss on a fresh graph. Used by [`forward_backward`] and
/// [`grad_check`], which may call it many times.
pub trait LossFn: Fn(&mut Graph<'_>) -> Result<Var> {}
impl<F: Fn(&mut Graph<'_>) -> Result<Var>> LossFn for F {}

/// Evaluates `build` once and accumulates the gradient of its scalar output
/// into `store`. Returns the loss value.
pub fn forward_backward(build: &impl LossFn, store: &mut ParamStore) -> Result<f64> {
    let (params, mut grads) = store.split_mut();
    let mut graph = Graph::new(params);
    let loss = build(&mut graph)?;
    let value = graph.value(loss).clone();
    graph.backward(loss, &mut grads)?;
    Ok(value.data()[0])
}

fn forward(build: &impl LossFn, store: &ParamStore) -> Result<f64> {
    let mut graph = Graph::new(store.params());
    let loss = build(&mut graph)?;
    let t: &Tensor = graph.value(loss);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares analytic gradients against central differences.
///
/// Returns the maximum over every parameter scalar of
/// `|analytic - numeric| / max(|analytic|, 1e-8)`. When both derivatives are
/// below `1e-10` in magnitude the entry counts as exact.
pub fn grad_check(build: &impl LossFn, store: &mut ParamStore, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    store.zero_grads();
    forward_backward(build, store)?;
    let analytic: Vec<Tensor> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for k in 0..grad.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + epsilon;
            let plus = forward(build, store);
            store.value_mut(id).data_mut()[k] = orig - epsilon;
            let minus = forward(build, store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = grad.data()[k];
            if a.abs() < 1e-10 && numeric.abs() < 1e-10 {
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
