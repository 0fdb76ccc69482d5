//! Adversarial perturbation and mixup helpers for fine-tuning.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// `ε·g/‖g‖₂` over the whole tensor; zero when `g` is zero.
pub fn fgm_perturb(grad: &Tensor, epsilon: f64) -> Tensor {
    let norm = grad.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Tensor::zeros(grad.shape());
    }
    grad.map(|v| epsilon * v / norm)
}

/// Convex combination of two feature vectors and their target simplices.
pub fn embedding_mixup(
    x_i: &[f64],
    y_i: &[f64],
    x_j: &[f64],
    y_j: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Usage(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if x_i.len() != x_j.len() || y_i.len() != y_j.len() {
        return Err(Error::shape("mixup partners differ in width"));
    }
    let mix = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| lambda * p + (1.0 - lambda) * q)
            .collect()
    };
    Ok((mix(x_i, x_j), mix(y_i, y_j)))
}

/// One `λ ~ Beta(α, α)` per row.
pub fn sample_lambdas(n: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    Ok((0..n).map(|_| beta.sample(rng)).collect())
}

/// Partner of row `i` in a batch of `n`.
pub fn mixup_partner(i: usize, n: usize) -> usize {
    n - 1 - i
}

/// Mixes rows of `x` (`[N × F]`) with their reversed-order partners and
/// returns the mixed rows with the matching soft targets.
pub fn mixup_rows(
    g: &mut Graph,
    x: Var,
    targets: &[usize],
    classes: usize,
    lambdas: &[f64],
) -> Result<(Var, Tensor)> {
    let (n, f) = (g.value(x).rows(), g.value(x).cols());
    if targets.len() != n || lambdas.len() != n {
        return Err(Error::shape("mixup needs one target and one lambda per row"));
    }
    let partners: Vec<usize> = (0..n).map(|i| mixup_partner(i, n)).collect();
    let mut w_self = Vec::with_capacity(n * f);
    let mut w_other = Vec::with_capacity(n * f);
    let mut soft = Tensor::zeros(&[n, classes]);
    for i in 0..n {
        let l = lambdas[i];
        w_self.extend(std::iter::repeat_n(l, f));
        w_other.extend(std::iter::repeat_n(1.0 - l, f));
        let row = soft.row_mut(i);
        row[targets[i]] += l;
        row[targets[partners[i]]] += 1.0 - l;
    }
    let other = g.gather_rows(x, &partners)?;
    let a = g.constant(Tensor::matrix(n, f, w_self)?);
    let b = g.constant(Tensor::matrix(n, f, w_other)?);
    let xa = g.mul(a, x)?;
    let xb = g.mul(b, other)?;
    Ok((g.add(xa, xb)?, soft))
}
