use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub queue_size: usize,
    pub momentum: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            queue_size: 64,
            momentum: 0.995,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("contrastive.temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("contrastive.momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// FIFO of detached embeddings used as extra negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumQueue {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MomentumQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Appends each row of `rows`, evicting the oldest beyond capacity.
    pub fn enqueue(&mut self, rows: &Tensor) {
        if self.capacity == 0 {
            return;
        }
        for r in 0..rows.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(rows.row(r).to_vec());
        }
    }

    /// Entries as `[len × d]`, or `None` when empty.
    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        Tensor::from_rows(&self.entries.iter().cloned().collect::<Vec<_>>()).ok()
    }
}

/// Mean over `i` of `−log softmax_i` where row `i` holds the cosine
/// similarities of `h_i` to every positive and every queue entry, divided
/// by the temperature.
pub fn contrastive_loss(
    g: &mut Graph,
    h: Var,
    h_plus: Var,
    queue: &MomentumQueue,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (n, d) = (g.value(h).rows(), g.value(h).cols());
    if g.value(h_plus).shape() != [n, d] {
        return Err(Error::shape(format!(
            "positives {:?} do not match anchors [{n} x {d}]",
            g.value(h_plus).shape()
        )));
    }
    let hn = g.l2_normalize_rows(h)?;
    let pn = g.l2_normalize_rows(h_plus)?;
    let keys = match queue.as_tensor() {
        None => pn,
        Some(q) => {
            if q.cols() != d {
                return Err(Error::shape(format!(
                    "queue width {} differs from embedding width {d}",
                    q.cols()
                )));
            }
            let qc = g.constant(q);
            let qn = g.l2_normalize_rows(qc)?;
            g.concat_rows(&[pn, qn])?
        }
    };
    let sims = g.matmul_t(hn, keys)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let logp = g.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..n).collect();
    let picked = g.pick(logp, &diag)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Moves the momentum weights toward the online weights, re-encodes the
/// batch views with the updated momentum weights and enqueues the result.
pub fn queue_update(
    queue: &mut MomentumQueue,
    momentum: &mut ParamStore,
    online: &ParamStore,
    m: f64,
    encode: impl FnOnce(&ParamStore) -> Result<Tensor>,
) -> Result<()> {
    if momentum.len() != online.len() {
        return Err(Error::shape("momentum and online stores differ in size"));
    }
    if m != 1.0 {
        for id in online.ids() {
            let src = online.get(id);
            let dst = momentum.get_mut(id);
            dst.expect_same_shape(src)?;
            for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
    }
    if queue.capacity() == 0 {
        return Ok(());
    }
    let views = encode(momentum)?;
    queue.enqueue(&views);
    Ok(())
}
