use super::{DiffError, Graph, Tensor, Var};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over every
/// element of every input. A failing or non-finite evaluation yields `+∞`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, DiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let Some(analytic) = analytic_grads(&f, inputs) else {
        return f64::INFINITY;
    };
    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = eval(&f, &probe);
            probe[t].data_mut()[i] = orig - h;
            let minus = eval(&f, &probe);
            probe[t].data_mut()[i] = orig;
            let (Some(p), Some(m)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (p - m) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Option<Vec<Vec<f64>>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, DiffError>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars).ok()?;
    if !loss.item().is_finite() {
        return None;
    }
    graph.backward(loss).ok()?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.len()], Tensor::into_data))
        .collect::<Vec<_>>();
    grads.iter().flatten().all(|g| g.is_finite()).then_some(grads)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Option<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, DiffError>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let v = f(&graph, &vars).ok()?.item();
    v.is_finite().then_some(v)
}
