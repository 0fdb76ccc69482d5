//! Multitask pre-training and fine-tuning for e-commerce query/product
//! relevance, built on a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, the differentiation tape and a finite-difference oracle.
//! - [`corpus`]: records, tokenizer, augmentation, pre-training instances, synthetic data.
//! - [`encoder`]: a tiny transformer encoder, n-gram/ID feature assembly and task heads.
//! - [`objectives`]: contrastive (momentum queue), MLM, classification and R-Drop losses.
//! - [`trainer`]: pre-training and fine-tuning loops, EMA, FGM, mixup, checkpoints.
//! - [`confident`]: confident-learning label-noise pruning.
//! - [`evalkit`]: nDCG, micro-F1, ensembling, k-fold splits and ablation tables.

pub mod confident;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
