use serde::{Deserialize, Serialize};

use crate::corpus::EsciLabel;
use crate::encoder::HeadKind;
use crate::error::{Error, Result};
use crate::objectives::{LossKind, LossParams};

/// Which fine-tuning target a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Ranking by expected gain of the 4-way classifier.
    Task1,
    /// 4-way ESCI classification.
    Task2,
    /// Substitute vs. everything else.
    Task3,
}

impl Task {
    pub fn head(self) -> HeadKind {
        match self {
            Task::Task1 | Task::Task2 => HeadKind::Esci4,
            Task::Task3 => HeadKind::Substitute2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Task::Task1 | Task::Task2 => 4,
            Task::Task3 => 2,
        }
    }

    pub fn target(self, label: EsciLabel) -> usize {
        match self {
            Task::Task1 | Task::Task2 => label.index(),
            Task::Task3 => usize::from(label.is_substitute()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Task1 => "task1",
            Task::Task2 => "task2",
            Task::Task3 => "task3",
        }
    }
}

/// Fine-tuning strategy switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub ema: bool,
    pub fgm: bool,
    pub rdrop: bool,
    pub mixup: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            ema: true,
            fgm: true,
            rdrop: true,
            mixup: false,
        }
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        ema: false,
        fgm: false,
        rdrop: false,
        mixup: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub ema_decay: f64,
    pub fgm_epsilon: f64,
    pub rdrop_alpha: f64,
    pub mixup_alpha: f64,
    pub mixup_weight: f64,
    pub loss_kind: LossKind,
    pub loss: LossParams,
    pub toggles: Toggles,
    /// EMA during pre-training.
    pub pretrain_ema: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            warmup_ratio: 0.1,
            batch_size: 32,
            clip_norm: 1.0,
            pretrain_epochs: 10,
            finetune_epochs: 5,
            ema_decay: 0.999,
            fgm_epsilon: 1.0,
            rdrop_alpha: 1.0,
            mixup_alpha: 0.2,
            mixup_weight: 1.0,
            loss_kind: LossKind::Ce,
            loss: LossParams::default(),
            toggles: Toggles::default(),
            pretrain_ema: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("train.warmup_ratio must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            return bad("batch size and epoch counts must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("train.ema_decay must lie in (0, 1)".into());
        }
        if !(self.fgm_epsilon >= 0.0) || !(self.rdrop_alpha >= 0.0) || !(self.mixup_weight >= 0.0) {
            return bad("fgm_epsilon, rdrop_alpha and mixup_weight must be non-negative".into());
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("train.mixup_alpha must be positive".into());
        }
        if self.loss.ghm_bins == 0 {
            return bad("train.loss.ghm_bins must be positive".into());
        }
        if self.toggles.rdrop && !self.toggles.fgm {
            return bad("toggles.rdrop compares clean and adversarial logits and needs toggles.fgm".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rdrop_requires_fgm() {
        let mut c = TrainConfig::default();
        c.toggles.fgm = false;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("fgm"), "{err}");
    }

    #[test]
    fn task_targets() {
        assert_eq!(Task::Task3.target(EsciLabel::Substitute), 1);
        assert_eq!(Task::Task3.target(EsciLabel::Exact), 0);
        assert_eq!(Task::Task2.target(EsciLabel::Complement), 2);
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"lrr": 1}"#);
        assert!(r.is_err());
    }
}
