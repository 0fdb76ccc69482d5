//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ESCICKPT" | version u32 | payload length u64 | payload checksum u64 | payload
//! payload = header length u64 | header JSON | tensor count u64 | tensors
//! tensor  = name length u32 | name | rank u32 | dims u64 × rank | f64 × Π dims
//! ```
//!
//! The checksum is FNV-1a over the payload bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ema::EmaState;
use super::optim::{Moments, OptState};
use crate::encoder::{fnv1a64, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::objectives::MomentumQueue;

pub const MAGIC: &[u8; 8] = b"ESCICKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Training progress carried alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Steps completed.
    pub global_step: u64,
    /// Sum of step losses in the epoch in progress.
    pub epoch_loss_sum: f64,
    pub opt: OptState,
    pub ema: Option<EmaState>,
    pub momentum: Option<ParamStore>,
    pub queue: Option<MomentumQueue>,
}

impl TrainState {
    pub fn fresh(phase: Phase) -> Self {
        Self {
            phase,
            global_step: 0,
            epoch_loss_sum: 0.0,
            opt: OptState::new(),
            ema: None,
            momentum: None,
            queue: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    phase: Phase,
    global_step: u64,
    epoch_loss_sum: f64,
    opt_step: u64,
    /// Per-parameter update counts, keyed by parameter name.
    adam_t: BTreeMap<String, u64>,
    ema_decay: Option<f64>,
    has_momentum: bool,
    queue_capacity: Option<usize>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.display().to_string(),
            message: message.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.err("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.err("length overflow"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.err(format!("tensor {name} has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| self.err(format!("tensor {name} exceeds the payload")))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.err(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Serializes the model and training state to bytes.
pub fn encode_checkpoint(model: &Model, state: &TrainState) -> Result<Vec<u8>> {
    let p = &model.params;
    let name_of = |idx: usize| p.name(ParamId(idx)).to_string();
    let header = Header {
        model: model.arch.cfg.clone(),
        phase: state.phase,
        global_step: state.global_step,
        epoch_loss_sum: state.epoch_loss_sum,
        opt_step: state.opt.step,
        adam_t: state
            .opt
            .moments
            .iter()
            .map(|(&i, m)| (name_of(i), m.t))
            .collect(),
        ema_decay: state.ema.as_ref().map(|e| e.decay),
        has_momentum: state.momentum.is_some(),
        queue_capacity: state.queue.as_ref().map(MomentumQueue::capacity),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for id in p.ids() {
        tensors.push((format!("param/{}", p.name(id)), p.get(id)));
    }
    for (&i, m) in &state.opt.moments {
        tensors.push((format!("adam.m/{}", name_of(i)), &m.m));
        tensors.push((format!("adam.v/{}", name_of(i)), &m.v));
    }
    if let Some(ema) = &state.ema {
        for (&i, t) in &ema.shadow {
            tensors.push((format!("ema/{}", name_of(i)), t));
        }
    }
    if let Some(mstore) = &state.momentum {
        for id in mstore.ids() {
            tensors.push((format!("momentum/{}", mstore.name(id)), mstore.get(id)));
        }
    }
    let queue_tensor = state.queue.as_ref().and_then(MomentumQueue::as_tensor);
    if let Some(q) = &queue_tensor {
        tensors.push(("queue".to_string(), q));
    }

    let mut w = Writer(Vec::new());
    w.u64(header_json.len() as u64);
    w.bytes(&header_json);
    w.u64(tensors.len() as u64);
    for (name, t) in &tensors {
        w.tensor(name, t);
    }
    let payload = w.0;
    let mut out = Writer(Vec::with_capacity(PREAMBLE + payload.len()));
    out.bytes(MAGIC);
    out.u32(VERSION);
    out.u64(payload.len() as u64);
    out.u64(fnv1a64(&payload));
    out.bytes(&payload);
    Ok(out.0)
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(model, state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses checkpoint bytes; `path` is used in error messages only.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, TrainState)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    r.pos = 8;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let declared = r.len()?;
    let checksum = r.u64()?;
    if declared != bytes.len() - PREAMBLE {
        return Err(r.err(format!(
            "declared payload of {declared} bytes, file holds {}",
            bytes.len() - PREAMBLE
        )));
    }
    if fnv1a64(&bytes[PREAMBLE..]) != checksum {
        return Err(r.err("payload checksum mismatch"));
    }
    let hlen = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(format!("header: {e}")))?;
    let count = r.len()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the last tensor"));
    }

    let mut model = Model::new(header.model.clone(), 0).map_err(|e| r.err(e.to_string()))?;
    let mut take = |key: String| tensors.remove(&key).ok_or_else(|| r.err(format!("missing tensor {key}")));
    let ids: Vec<ParamId> = model.params.ids().collect();
    let index_of = |name: &str, store: &ParamStore| store.find(name);
    for &id in &ids {
        let name = model.params.name(id).to_string();
        let t = take(format!("param/{name}"))?;
        model.params.set(id, t)?;
    }
    let mut opt = OptState {
        step: header.opt_step,
        moments: BTreeMap::new(),
    };
    for (name, &t) in &header.adam_t {
        let id = index_of(name, &model.params).ok_or_else(|| Error::Checkpoint {
            path: path.display().to_string(),
            message: format!("optimizer state for unknown parameter {name}"),
        })?;
        let m = take(format!("adam.m/{name}"))?;
        let v = take(format!("adam.v/{name}"))?;
        opt.moments.insert(id.0, Moments { m, v, t });
    }
    let ema = match header.ema_decay {
        None => None,
        Some(decay) => {
            let mut shadow = BTreeMap::new();
            for id in model.params.trainable_ids() {
                let t = take(format!("ema/{}", model.params.name(id)))?;
                shadow.insert(id.0, t);
            }
            Some(EmaState { decay, shadow })
        }
    };
    let momentum = if header.has_momentum {
        let mut m = model.params.clone();
        for &id in &ids {
            let t = take(format!("momentum/{}", m.name(id)))?;
            m.set(id, t)?;
        }
        Some(m)
    } else {
        None
    };
    let queue = header.queue_capacity.map(|cap| {
        let mut q = MomentumQueue::new(cap);
        if let Some(t) = tensors.remove("queue") {
            q.enqueue(&t);
        }
        q
    });
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            message: format!("unexpected tensor {extra}"),
        });
    }
    let state = TrainState {
        phase: header.phase,
        global_step: header.global_step,
        epoch_loss_sum: header.epoch_loss_sum,
        opt,
        ema,
        momentum,
        queue,
    };
    Ok((model, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Copies checkpoint weights into `model`, whose config may differ. Every
/// parameter must exist with the same shape; errors name the parameter.
pub fn restore_weights(model: &mut Model, source: &ParamStore) -> Result<()> {
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let src = source
            .find(&name)
            .ok_or_else(|| Error::shape(format!("checkpoint has no parameter {name}")))?;
        model.params.set(id, source.get(src).clone())?;
    }
    Ok(())
}
