//! Training losses. Every function records onto a [`Graph`] and returns a
//! scalar node, so gradients come from the same tape as the model.

mod contrastive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub use contrastive::{contrastive_loss, queue_update, ContrastiveConfig, MomentumQueue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
    Ghm,
    Poly1,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ce, LossKind::Focal, LossKind::Ghm, LossKind::Poly1];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Ghm => "ghm",
            LossKind::Poly1 => "poly1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    pub focal_gamma: f64,
    pub poly1_epsilon: f64,
    pub ghm_bins: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            poly1_epsilon: 1.0,
            ghm_bins: 10,
        }
    }
}

fn one_minus(g: &mut Graph, x: Var) -> Result<Var> {
    let ones = g.constant(Tensor::filled(g.value(x).shape(), 1.0));
    let neg = g.scale(x, -1.0);
    g.add(ones, neg)
}

fn check_targets(g: &Graph, logits: Var, targets: &[usize]) -> Result<()> {
    let v = g.value(logits);
    if v.rank() != 2 || v.rows() != targets.len() {
        return Err(Error::shape(format!(
            "logits {:?} do not match {} targets",
            v.shape(),
            targets.len()
        )));
    }
    if v.cols() < 2 {
        return Err(Error::shape("classification needs at least two classes"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= v.cols()) {
        return Err(Error::Index {
            index: t,
            size: v.cols(),
        });
    }
    Ok(())
}

/// Per-example losses `[B]` of the chosen kind for logits `[B × K]`.
pub fn classification_losses(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    kind: LossKind,
    params: &LossParams,
) -> Result<Var> {
    check_targets(g, logits, targets)?;
    let logp = g.log_softmax_rows(logits);
    let logp_t = g.pick(logp, targets)?;
    let ce = g.scale(logp_t, -1.0);
    match kind {
        LossKind::Ce => Ok(ce),
        LossKind::Focal => {
            let p_t = g.exp(logp_t);
            let rest = one_minus(g, p_t)?;
            let w = g.powf(rest, params.focal_gamma)?;
            g.mul(w, ce)
        }
        LossKind::Poly1 => {
            let p_t = g.exp(logp_t);
            let rest = one_minus(g, p_t)?;
            let extra = g.scale(rest, params.poly1_epsilon);
            g.add(ce, extra)
        }
        LossKind::Ghm => {
            let weights = ghm_weights(g.value(logp_t).data(), params.ghm_bins)?;
            let w = g.constant(Tensor::vector(weights)?);
            g.mul(w, ce)
        }
    }
}

/// Gradient-density weights for a batch: `B / (count(bin_i) · nonempty)`
/// with `g_i = 1 − p_t` split into `bins` equal bins over `[0, 1]`. With one
/// bin every weight is 1.
pub fn ghm_weights(logp_t: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Config("ghm_bins must be positive".into()));
    }
    let bin_of = |lp: f64| {
        let gnorm = (1.0 - lp.exp()).abs();
        ((gnorm * bins as f64).floor() as usize).min(bins - 1)
    };
    let idx: Vec<usize> = logp_t.iter().map(|&lp| bin_of(lp)).collect();
    let mut counts = vec![0usize; bins];
    for &b in &idx {
        counts[b] += 1;
    }
    let nonempty = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = logp_t.len() as f64;
    Ok(idx
        .iter()
        .map(|&b| n / (counts[b] as f64 * nonempty))
        .collect())
}

/// Batch mean of [`classification_losses`].
pub fn classification_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    kind: LossKind,
    params: &LossParams,
) -> Result<Var> {
    let per = classification_losses(g, logits, targets, kind, params)?;
    Ok(g.mean(per))
}

/// Mean cross-entropy at masked positions; zero when nothing was masked.
pub fn mlm_loss(g: &mut Graph, logits: Option<Var>, targets: &[usize]) -> Result<Var> {
    match logits {
        None if targets.is_empty() => Ok(g.constant(Tensor::scalar(0.0))),
        None => Err(Error::Usage("MLM targets without logits".into())),
        Some(l) => classification_loss(g, l, targets, LossKind::Ce, &LossParams::default()),
    }
}

/// Cross-entropy against soft targets `[B × K]`, averaged over rows.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let logp = g.log_softmax_rows(logits);
    let t = g.constant(targets.clone());
    let prod = g.mul(t, logp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / targets.rows() as f64))
}

/// `α · [KL(P1‖P2) + KL(P2‖P1)]` per row, averaged over rows. Uses the
/// identity `KL(P1‖P2) + KL(P2‖P1) = Σ (P1 − P2)(log P1 − log P2)`.
pub fn rdrop_loss(g: &mut Graph, logits1: Var, logits2: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config("rdrop alpha must be non-negative".into()));
    }
    let rows = g.value(logits1).rows();
    let p1 = g.softmax_rows(logits1);
    let p2 = g.softmax_rows(logits2);
    let l1 = g.log_softmax_rows(logits1);
    let l2 = g.log_softmax_rows(logits2);
    let dp = g.sub(p1, p2)?;
    let dl = g.sub(l1, l2)?;
    let prod = g.mul(dp, dl)?;
    let s = g.sum(prod);
    Ok(g.scale(s, alpha / rows as f64))
}

/// Loss components of one pre-training step; absent tasks contribute 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mlm: f64,
    pub classification: f64,
    pub contrastive: f64,
}

impl LossParts {
    /// Unweighted sum, as accumulated in the multitask loop.
    pub fn total(&self) -> f64 {
        self.mlm + self.classification + self.contrastive
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}
