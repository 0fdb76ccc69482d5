//! Confident-learning label-noise detection and margin-ranked pruning.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalkit::kfold_split;

const ROW_SUM_TOL: f64 = 1e-9;

fn check_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs.first().map_or(0, Vec::len);
    if let Some(row) = probs.iter().find(|r| r.len() != k) {
        return Err(Error::shape(format!("ragged probabilities: {} vs {k} classes", row.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: l, size: k });
    }
    Ok(k)
}

/// Out-of-fold class probabilities.
///
/// `train_fn(train, held_out)` fits on the `train` indices and returns one
/// probability row per `held_out` index, in order. Folds are stratified on
/// `labels`; a class missing from some training fold is an error.
pub fn oof_probs<F>(labels: &[usize], classes: usize, k_folds: usize, seed: u64, mut train_fn: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<Vec<f64>>>,
{
    let n = labels.len();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index { index: l, size: classes });
    }
    let split = kfold_split(n, k_folds, labels, seed)?;
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    for (f, held) in split.folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| held.binary_search(i).is_err()).collect();
        let mut seen = vec![false; classes];
        for &i in &train {
            seen[labels[i]] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "stratified split: class {missing} has no training example in fold {f}; \
                 use fewer folds or more data"
            )));
        }
        let rows = train_fn(&train, held)?;
        if rows.len() != held.len() {
            return Err(Error::shape(format!(
                "fold {f}: {} rows returned for {} held-out examples",
                rows.len(),
                held.len()
            )));
        }
        for (&i, row) in held.iter().zip(rows) {
            let s: f64 = row.iter().sum();
            if row.len() != classes || (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::Data(format!(
                    "fold {f}: row for example {i} is not a {classes}-class probability vector"
                )));
            }
            out[i] = Some(row);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("folds partition the examples")).collect())
}

/// `t_j` = mean predicted probability of class `j` over examples labeled `j`.
pub fn class_thresholds(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    let k = check_probs(probs, labels)?;
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (row, &l) in probs.iter().zip(labels) {
        sum[l] += row[l];
        count[l] += 1;
    }
    if let Some(j) = count.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {j} has no examples; its threshold is undefined")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Confident class of one row: the most probable class among those
/// reaching their threshold, ties to the lower id.
pub fn confident_class(row: &[f64], thresholds: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, (&p, &t)) in row.iter().zip(thresholds).enumerate() {
        if p >= t && best.is_none_or(|b| p > row[b]) {
            best = Some(j);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfidentJoint {
    /// `counts[given][confident]`.
    pub counts: Vec<Vec<usize>>,
    /// Confident class per example, `None` when no class qualifies.
    pub assigned: Vec<Option<usize>>,
}

impl ConfidentJoint {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn off_diagonal(&self) -> usize {
        self.total() - (0..self.counts.len()).map(|i| self.counts[i][i]).sum::<usize>()
    }
}

pub fn confident_joint(probs: &[Vec<f64>], labels: &[usize], thresholds: &[f64]) -> Result<ConfidentJoint> {
    let k = check_probs(probs, labels)?;
    if thresholds.len() != k {
        return Err(Error::shape(format!("{} thresholds for {k} classes", thresholds.len())));
    }
    let mut counts = vec![vec![0usize; k]; k];
    let assigned: Vec<Option<usize>> = probs.iter().map(|r| confident_class(r, thresholds)).collect();
    for (&l, a) in labels.iter().zip(&assigned) {
        if let Some(j) = *a {
            counts[l][j] += 1;
        }
    }
    Ok(ConfidentJoint { counts, assigned })
}

/// `p(given) − max over other classes`.
pub fn margin(row: &[f64], given: usize) -> f64 {
    let other = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != given)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    row[given] - other
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub index: usize,
    pub given: usize,
    pub confident: usize,
    pub argmax: usize,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseEstimate {
    pub thresholds: Vec<f64>,
    pub joint: ConfidentJoint,
    /// Off-diagonal examples, margin ascending, ties to the lower index.
    pub candidates: Vec<Candidate>,
    /// Removed candidates, a prefix of `candidates`.
    pub removed: Vec<Candidate>,
    /// `true` for kept examples.
    pub keep: Vec<bool>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}

/// Removes the lowest-margin off-diagonal examples, at most
/// `⌊fraction · n⌋` of them.
pub fn prune(probs: &[Vec<f64>], labels: &[usize], joint: &ConfidentJoint, fraction: f64) -> Result<(Vec<Candidate>, Vec<Candidate>, Vec<bool>)> {
    check_probs(probs, labels)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction {fraction} outside [0, 1]")));
    }
    if joint.assigned.len() != labels.len() {
        return Err(Error::shape("confident joint covers a different dataset"));
    }
    let mut candidates: Vec<Candidate> = labels
        .iter()
        .zip(&joint.assigned)
        .enumerate()
        .filter_map(|(i, (&given, a))| match *a {
            Some(j) if j != given => Some(Candidate {
                index: i,
                given,
                confident: j,
                argmax: argmax(&probs[i]),
                margin: margin(&probs[i], given),
            }),
            _ => None,
        })
        .collect();
    candidates.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.index.cmp(&b.index)));
    let budget = (fraction * labels.len() as f64).floor() as usize;
    let removed: Vec<Candidate> = candidates.iter().take(budget).cloned().collect();
    let mut keep = vec![true; labels.len()];
    for c in &removed {
        keep[c.index] = false;
    }
    Ok((candidates, removed, keep))
}

/// Thresholds, joint and pruning in one pass.
pub fn estimate_noise(probs: &[Vec<f64>], labels: &[usize], fraction: f64) -> Result<NoiseEstimate> {
    let thresholds = class_thresholds(probs, labels)?;
    let joint = confident_joint(probs, labels, &thresholds)?;
    let (candidates, removed, keep) = prune(probs, labels, &joint, fraction)?;
    Ok(NoiseEstimate {
        thresholds,
        joint,
        candidates,
        removed,
        keep,
    })
}

/// Items whose mask entry is `true`.
pub fn apply_mask<T: Clone>(items: &[T], keep: &[bool]) -> Vec<T> {
    items
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| x.clone())
        .collect()
}

/// Multinomial logistic regression fitted by full-batch gradient descent.
/// A cheap classifier for producing out-of-fold probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[classes × (dim + 1)]`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, epochs: usize, lr: f64, l2: f64) -> Result<Self> {
        let dim = x.first().map_or(0, Vec::len);
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::shape("probe needs one label per non-empty feature row"));
        }
        let n = x.len() as f64;
        let mut w = vec![vec![0.0; dim + 1]; classes];
        for _ in 0..epochs {
            let mut grad = vec![vec![0.0; dim + 1]; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let p = Self { weights: w.clone() }.probs_of(xi);
                for c in 0..classes {
                    let d = p[c] - f64::from(u8::from(c == yi));
                    for (gk, xk) in grad[c].iter_mut().zip(xi.iter().chain(std::iter::once(&1.0))) {
                        *gk += d * xk;
                    }
                }
            }
            for (wc, gc) in w.iter_mut().zip(&grad) {
                for (k, (wk, gk)) in wc.iter_mut().zip(gc).enumerate() {
                    let reg = if k < dim { l2 * *wk } else { 0.0 };
                    *wk -= lr * (gk / n + reg);
                }
            }
        }
        Ok(Self { weights: w })
    }

    pub fn probs_of(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().zip(x.iter().chain(std::iter::once(&1.0))).map(|(a, b)| a * b).sum())
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}
