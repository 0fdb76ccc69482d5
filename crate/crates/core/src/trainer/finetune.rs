//! Fine-tuning step with the optional EMA, FGM, R-Drop and mixup stack.

use serde::Serialize;

use super::checkpoint::{Phase, TrainState};
use super::config::{Task, TrainConfig};
use super::ema::EmaState;
use super::optim::{accumulate, clip_gradients, lr_at, Grads};
use super::strategies::{fgm_perturb, mixup_rows, sample_lambdas};
use crate::corpus::NUM_SPECIALS;
use crate::encoder::{softmax_probs, Binder, FeatureInput, HeadKind, Mode, Model};
use crate::error::{Error, Result};
use crate::evalkit::micro_f1;
use crate::numerics::{Graph, Tensor};
use crate::objectives::{classification_loss, rdrop_loss, soft_cross_entropy};
use crate::rng;
use rand::seq::SliceRandom;

const EPOCH_TAG: u64 = 0xF7E0;
const STEP_TAG: u64 = 0xF757;
const MIX_TAG: u64 = 0xF71C;

/// Loss terms of one fine-tuning step. Absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneParts {
    pub clean: f64,
    pub adversarial: f64,
    pub rdrop: f64,
    pub mixup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneStepLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub task: String,
    pub lr: f64,
    pub loss: f64,
    pub parts: FinetuneParts,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_micro_f1: Option<f64>,
}

/// Labeled inputs for one task.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSet<'a> {
    pub inputs: &'a [FeatureInput],
    pub targets: &'a [usize],
}

impl LabeledSet<'_> {
    fn check(&self, classes: usize, what: &str) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::shape(format!(
                "{what}: {} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::Data(format!("{what} set is empty")));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index { index: t, size: classes });
        }
        Ok(())
    }
}

/// Copy of a token-table gradient with the special-token rows zeroed. The
/// attack then moves word embeddings only; the `[CLS]` row would otherwise
/// take almost all of the gradient norm.
fn word_rows_only(grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for r in 0..(NUM_SPECIALS as usize).min(g.rows()) {
        g.row_mut(r).fill(0.0);
    }
    g
}

/// Class probabilities for every input, computed batch by batch with
/// dropout off and no gradient tape.
pub fn predict_probs(
    model: &Model,
    inputs: &[FeatureInput],
    head: HeadKind,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let logits = {
            let mut b = Binder::detached(&mut g, &model.params);
            model.arch.classify(&mut b, chunk, head, &mut Mode::Eval)?.1
        };
        out.extend(softmax_probs(g.value(logits)));
    }
    Ok(out)
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub struct Finetuner<'a> {
    pub model: Model,
    pub state: TrainState,
    cfg: TrainConfig,
    task: Task,
    train: LabeledSet<'a>,
    eval: Option<LabeledSet<'a>>,
    per_epoch: usize,
    order: Option<(usize, Vec<usize>)>,
    pub log: Vec<FinetuneStepLog>,
    pub epochs: Vec<EpochMetrics>,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        model: Model,
        task: Task,
        train: LabeledSet<'a>,
        eval: Option<LabeledSet<'a>>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let mut state = TrainState::fresh(Phase::Finetune);
        if cfg.toggles.ema {
            state.ema = Some(EmaState::new(&model.params, cfg.ema_decay)?);
        }
        Self::resume(model, state, task, train, eval, cfg)
    }

    pub fn resume(
        model: Model,
        state: TrainState,
        task: Task,
        train: LabeledSet<'a>,
        eval: Option<LabeledSet<'a>>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if state.phase != Phase::Finetune {
            return Err(Error::Config("checkpoint is not a fine-tuning state".into()));
        }
        if cfg.toggles.ema != state.ema.is_some() {
            return Err(Error::Config("toggles.ema does not match the saved state".into()));
        }
        train.check(task.classes(), "training")?;
        if let Some(e) = &eval {
            e.check(task.classes(), "evaluation")?;
        }
        let per_epoch = train.inputs.len().div_ceil(cfg.batch_size);
        Ok(Self {
            model,
            state,
            cfg,
            task,
            train,
            eval,
            per_epoch,
            order: None,
            log: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.per_epoch * self.cfg.finetune_epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.global_step >= self.total_steps()
    }

    fn batch_for(&mut self, step: u64) -> Vec<usize> {
        let epoch = step as usize / self.per_epoch;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.train.inputs.len()).collect();
            idx.shuffle(&mut rng::stream(self.cfg.seed, &[EPOCH_TAG, epoch as u64]));
            self.order = Some((epoch, idx));
        }
        let (_, idx) = self.order.as_ref().expect("order was just built");
        let k = step as usize % self.per_epoch;
        let bs = self.cfg.batch_size;
        idx[k * bs..((k + 1) * bs).min(idx.len())].to_vec()
    }

    pub fn step(&mut self) -> Result<FinetuneStepLog> {
        if self.is_done() {
            return Err(Error::Usage("fine-tuning already finished".into()));
        }
        let step = self.state.global_step;
        let epoch = step as usize / self.per_epoch;
        let rows = self.batch_for(step);
        let inputs: Vec<FeatureInput> = rows.iter().map(|&i| self.train.inputs[i].clone()).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| self.train.targets[i]).collect();
        let head = self.task.head();
        let classes = self.task.classes();
        let toggles = self.cfg.toggles;
        let (kind, lp) = (self.cfg.loss_kind, self.cfg.loss);
        let tok = self.model.arch.tok_emb();
        let mut parts = FinetuneParts::default();

        let mut g = Graph::new();
        let (feats1, logits1) = {
            let mut b = Binder::new(&mut g, &self.model.params);
            let mut r = rng::stream(self.cfg.seed, &[STEP_TAG, step]);
            self.model.arch.classify(&mut b, &inputs, head, &mut Mode::Train(&mut r))?
        };
        let l1 = classification_loss(&mut g, logits1, &targets, kind, &lp)?;
        parts.clean = g.value(l1).item();
        self.check_finite(step, &parts)?;

        let mut grads = Grads::new();
        let mut terms = Vec::new();
        if toggles.fgm {
            grads = g.backward(l1)?.param_grads();
            g.reset_backward();
            let delta = match grads.get(&tok.0) {
                Some(gt) => fgm_perturb(&word_rows_only(gt), self.cfg.fgm_epsilon),
                None => Tensor::zeros(self.model.params.get(tok).shape()),
            };
            let saved = self.model.params.get(tok).clone();
            self.model.params.get_mut(tok).add_assign(&delta)?;
            let logits2 = {
                let mut b = Binder::new(&mut g, &self.model.params);
                let mut r = rng::stream(self.cfg.seed, &[STEP_TAG, step]);
                self.model.arch.classify(&mut b, &inputs, head, &mut Mode::Train(&mut r))?.1
            };
            *self.model.params.get_mut(tok) = saved;
            let l2 = classification_loss(&mut g, logits2, &targets, kind, &lp)?;
            parts.adversarial = g.value(l2).item();
            terms.push(l2);
            if toggles.rdrop {
                let rd = rdrop_loss(&mut g, logits1, logits2, self.cfg.rdrop_alpha)?;
                parts.rdrop = g.value(rd).item();
                terms.push(rd);
            }
        } else {
            terms.push(l1);
        }
        if toggles.mixup {
            let lambdas = sample_lambdas(
                inputs.len(),
                self.cfg.mixup_alpha,
                &mut rng::stream(self.cfg.seed, &[MIX_TAG, step]),
            )?;
            let (mixed, soft) = mixup_rows(&mut g, feats1, &targets, classes, &lambdas)?;
            let logits = {
                let mut b = Binder::new(&mut g, &self.model.params);
                self.model.arch.head_logits(&mut b, mixed, head)?
            };
            let lm = soft_cross_entropy(&mut g, logits, &soft)?;
            parts.mixup = g.value(lm).item();
            terms.push(g.scale(lm, self.cfg.mixup_weight));
        }
        self.check_finite(step, &parts)?;
        let mut root = terms[0];
        for &t in &terms[1..] {
            root = g.add(root, t)?;
        }
        accumulate(&mut grads, g.backward(root)?.param_grads())?;

        clip_gradients(&mut grads, self.cfg.clip_norm);
        let lr = lr_at(step, self.total_steps(), self.cfg.lr, self.cfg.warmup_ratio);
        self.state.opt.step(&mut self.model.params, &grads, lr)?;
        if let Some(ema) = &mut self.state.ema {
            ema.update(&self.model.params)?;
        }

        let loss = parts.clean + parts.adversarial + parts.rdrop + self.cfg.mixup_weight * parts.mixup;
        self.state.global_step += 1;
        self.state.epoch_loss_sum += loss;
        if self.state.global_step % self.per_epoch as u64 == 0 {
            let train_loss = self.state.epoch_loss_sum / self.per_epoch as f64;
            self.state.epoch_loss_sum = 0.0;
            let eval_micro_f1 = match self.eval {
                Some(set) => Some(self.evaluate(set)?),
                None => None,
            };
            self.epochs.push(EpochMetrics {
                epoch,
                train_loss,
                eval_micro_f1,
            });
        }
        let entry = FinetuneStepLog {
            phase: Phase::Finetune,
            epoch,
            step,
            task: self.task.as_str().to_string(),
            lr,
            loss,
            parts,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    fn check_finite(&self, step: u64, p: &FinetuneParts) -> Result<()> {
        let all = [p.clean, p.adversarial, p.rdrop, p.mixup];
        if all.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        Err(Error::NonFinite {
            step,
            task: self.task.as_str().to_string(),
            parts: format!(
                "clean={} adversarial={} rdrop={} mixup={}",
                p.clean, p.adversarial, p.rdrop, p.mixup
            ),
        })
    }

    /// Probabilities under the evaluation weights: the EMA shadow when
    /// enabled, the live weights otherwise.
    pub fn predict(&mut self, inputs: &[FeatureInput]) -> Result<Vec<Vec<f64>>> {
        let head = self.task.head();
        let bs = self.cfg.batch_size;
        match &mut self.state.ema {
            None => predict_probs(&self.model, inputs, head, bs),
            Some(ema) => {
                ema.swap(&mut self.model.params);
                let out = predict_probs(&self.model, inputs, head, bs);
                ema.swap(&mut self.model.params);
                out
            }
        }
    }

    pub fn evaluate(&mut self, set: LabeledSet) -> Result<f64> {
        let probs = self.predict(set.inputs)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        micro_f1(&pred, set.targets)
    }

    pub fn run_until(&mut self, target: u64) -> Result<()> {
        while self.state.global_step < target.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    /// Model carrying the evaluation weights.
    pub fn eval_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(ema) = &self.state.ema {
            for (&idx, t) in &ema.shadow {
                *m.params.get_mut(crate::numerics::ParamId(idx)) = t.clone();
            }
        }
        m
    }
}
