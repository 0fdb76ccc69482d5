//! Multitask pre-training loop: mixed task-homogeneous batches, one loss
//! path per step, optional momentum-queue contrastive task.

use serde::Serialize;

use super::checkpoint::{Phase, TrainState};
use super::config::TrainConfig;
use super::ema::EmaState;
use super::optim::{clip_gradients, lr_at};
use crate::corpus::{mix_task_batches, Payload, PretrainInstance, TaskTag};
use crate::encoder::{Binder, HeadKind, Mode, Model};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::objectives::{
    classification_loss, contrastive_loss, mlm_loss, queue_update, ContrastiveConfig, LossKind,
    LossParams, LossParts, MomentumQueue,
};
use crate::rng;

const EPOCH_TAG: u64 = 0x9E70;
const STEP_TAG: u64 = 0x9E57;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub task: String,
    pub lr: f64,
    pub loss: f64,
    pub parts: LossParts,
}

/// Number of batches one epoch yields; independent of the shuffle.
pub fn batches_per_epoch(instances: &[PretrainInstance], batch_size: usize) -> usize {
    TaskTag::ALL
        .iter()
        .map(|&t| instances.iter().filter(|i| i.task() == t).count().div_ceil(batch_size))
        .sum()
}

pub struct Pretrainer<'a> {
    pub model: Model,
    pub state: TrainState,
    cfg: TrainConfig,
    contrast: ContrastiveConfig,
    instances: &'a [PretrainInstance],
    per_epoch: usize,
    batches: Option<(usize, Vec<Vec<usize>>)>,
    /// Steps run by this trainer, in order.
    pub log: Vec<StepLog>,
    /// Mean step loss of every epoch completed by this trainer.
    pub epoch_losses: Vec<f64>,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        model: Model,
        instances: &'a [PretrainInstance],
        cfg: TrainConfig,
        contrast: ContrastiveConfig,
    ) -> Result<Self> {
        let mut state = TrainState::fresh(Phase::Pretrain);
        if cfg.pretrain_ema {
            state.ema = Some(EmaState::new(&model.params, cfg.ema_decay)?);
        }
        if instances.iter().any(|i| i.task() == TaskTag::Contrast) {
            state.momentum = Some(model.params.clone());
            state.queue = Some(MomentumQueue::new(contrast.queue_size));
        }
        Self::resume(model, state, instances, cfg, contrast)
    }

    /// Continues from a saved state. The instances and config must be the
    /// ones the state was produced with.
    pub fn resume(
        model: Model,
        state: TrainState,
        instances: &'a [PretrainInstance],
        cfg: TrainConfig,
        contrast: ContrastiveConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        contrast.validate()?;
        if state.phase != Phase::Pretrain {
            return Err(Error::Config("checkpoint is not a pre-training state".into()));
        }
        if instances.is_empty() {
            return Err(Error::Data("no pre-training instances".into()));
        }
        let v = model.arch.cfg.encoder.vocab_size as u32;
        if let Some(bad) = instances.iter().find(|i| i.tokens.iter().any(|&t| t >= v)) {
            return Err(Error::Data(format!(
                "instance {} holds a token id outside the vocabulary of {v}",
                bad.id
            )));
        }
        let per_epoch = batches_per_epoch(instances, cfg.batch_size);
        Ok(Self {
            model,
            state,
            cfg,
            contrast,
            instances,
            per_epoch,
            batches: None,
            log: Vec::new(),
            epoch_losses: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        (self.per_epoch * self.cfg.pretrain_epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.global_step >= self.total_steps()
    }

    fn batch_for(&mut self, step: u64) -> Vec<usize> {
        let epoch = step as usize / self.per_epoch;
        if self.batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut r = rng::stream(self.cfg.seed, &[EPOCH_TAG, epoch as u64]);
            let b = mix_task_batches(self.instances, self.cfg.batch_size, &mut r);
            self.batches = Some((epoch, b));
        }
        let (_, b) = self.batches.as_ref().expect("batches were just built");
        b[step as usize % self.per_epoch].clone()
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Usage("pre-training already finished".into()));
        }
        let step = self.state.global_step;
        let epoch = step as usize / self.per_epoch;
        let instances = self.instances;
        let batch: Vec<&PretrainInstance> = self
            .batch_for(step)
            .into_iter()
            .map(|i| &instances[i])
            .collect();
        let task = batch[0].task();
        let arch = &self.model.arch;
        let mut drop = rng::stream(self.cfg.seed, &[STEP_TAG, step]);
        let mut g = Graph::new();
        let mut parts = LossParts::default();
        let tokens: Vec<Vec<u32>> = batch.iter().map(|i| i.tokens.clone()).collect();
        let root = {
            let mut b = Binder::new(&mut g, &self.model.params);
            let mut mode = Mode::Train(&mut drop);
            let enc = arch.encode(&mut b, &tokens, &mut mode)?;
            match task {
                TaskTag::Mlm => {
                    let mut rows = Vec::new();
                    let mut targets = Vec::new();
                    for (inst, &off) in batch.iter().zip(&enc.offsets) {
                        if let Payload::Mlm { targets: t } = &inst.payload {
                            for &(pos, id) in t {
                                rows.push(off + pos);
                                targets.push(id as usize);
                            }
                        }
                    }
                    let logits = if rows.is_empty() {
                        None
                    } else {
                        Some(arch.mlm_logits(&mut b, enc.hidden, &rows)?)
                    };
                    let l = mlm_loss(b.g, logits, &targets)?;
                    parts.mlm = b.g.value(l).item();
                    l
                }
                TaskTag::P2q | TaskTag::P2brand | TaskTag::P2color => {
                    let (kind, targets): (HeadKind, Vec<usize>) = match task {
                        TaskTag::P2q => (HeadKind::P2q2, batch.iter().map(|i| match i.payload {
                            Payload::P2q { matches } => usize::from(matches),
                            _ => unreachable!("batches are task-homogeneous"),
                        }).collect()),
                        TaskTag::P2brand => (HeadKind::Brand, batch.iter().map(|i| match i.payload {
                            Payload::Brand(c) => c,
                            _ => unreachable!("batches are task-homogeneous"),
                        }).collect()),
                        _ => (HeadKind::Color, batch.iter().map(|i| match i.payload {
                            Payload::Color(c) => c,
                            _ => unreachable!("batches are task-homogeneous"),
                        }).collect()),
                    };
                    let logits = arch.head_logits(&mut b, enc.cls, kind)?;
                    let l = classification_loss(b.g, logits, &targets, LossKind::Ce, &LossParams::default())?;
                    parts.classification = b.g.value(l).item();
                    l
                }
                TaskTag::Contrast => {
                    let views: Vec<Vec<u32>> = batch
                        .iter()
                        .map(|i| match &i.payload {
                            Payload::Contrast { view } => view.clone(),
                            _ => unreachable!("batches are task-homogeneous"),
                        })
                        .collect();
                    let enc2 = arch.encode(&mut b, &views, &mut mode)?;
                    let empty = MomentumQueue::new(0);
                    let queue = self.state.queue.as_ref().unwrap_or(&empty);
                    let l = contrastive_loss(b.g, enc.cls, enc2.cls, queue, self.contrast.temperature)?;
                    parts.contrastive = b.g.value(l).item();
                    l
                }
            }
        };
        if !parts.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: task.as_str().to_string(),
                parts: format!(
                    "mlm={} classification={} contrastive={}",
                    parts.mlm, parts.classification, parts.contrastive
                ),
            });
        }
        let mut grads = g.backward(root)?.param_grads();
        clip_gradients(&mut grads, self.cfg.clip_norm);
        let lr = lr_at(step, self.total_steps(), self.cfg.lr, self.cfg.warmup_ratio);
        self.state.opt.step(&mut self.model.params, &grads, lr)?;
        if let Some(ema) = &mut self.state.ema {
            ema.update(&self.model.params)?;
        }
        if task == TaskTag::Contrast {
            if let (Some(queue), Some(momentum)) = (&mut self.state.queue, &mut self.state.momentum) {
                let arch = &self.model.arch;
                let views: Vec<Vec<u32>> = batch
                    .iter()
                    .map(|i| match &i.payload {
                        Payload::Contrast { view } => view.clone(),
                        _ => unreachable!("batches are task-homogeneous"),
                    })
                    .collect();
                queue_update(queue, momentum, &self.model.params, self.contrast.momentum, |store| {
                    let mut g = Graph::new();
                    let cls = {
                        let mut b = Binder::detached(&mut g, store);
                        arch.encode(&mut b, &views, &mut Mode::Eval)?.cls
                    };
                    Ok::<Tensor, Error>(g.value(cls).clone())
                })?;
            }
        }

        let loss = parts.total();
        self.state.global_step += 1;
        self.state.epoch_loss_sum += loss;
        if self.state.global_step % self.per_epoch as u64 == 0 {
            self.epoch_losses.push(self.state.epoch_loss_sum / self.per_epoch as f64);
            self.state.epoch_loss_sum = 0.0;
        }
        let entry = StepLog {
            phase: Phase::Pretrain,
            epoch,
            step,
            task: task.as_str().to_string(),
            lr,
            loss,
            parts,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `global_step` reaches `target` or training ends.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.state.global_step < target.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }
}
