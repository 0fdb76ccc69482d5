//! Central finite differences, the oracle for every analytic gradient.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode and finite-difference
/// gradients of `build` with respect to each of `inputs`.
///
/// `build` receives a fresh graph and one `variable` per input, and must
/// return a scalar node.
pub fn max_gradient_error(
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    h: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let root = build(&mut g, &vars).expect("forward succeeded once");
                g.value(root).item()
            },
            input,
            h,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

/// Largest relative error between reverse-mode gradients of `build` with
/// respect to the trainable parameters of `store` and central differences.
///
/// `build` must bind parameters with [`Graph::param`] using their ids and
/// return a scalar. When `max_coords` is set, at most that many coordinates
/// per parameter are probed, spread evenly over the tensor.
pub fn max_param_gradient_error(
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
    h: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?.param_grads();

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        let n = store.get(id).len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let analytic = grads.get(&id.0);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            let eval = |x: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.get_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let root = build(&mut g, probe)?;
                Ok(g.value(root).item())
            };
            let up = eval(orig + h, &mut probe)?;
            let down = eval(orig - h, &mut probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
