#![allow(dead_code)]

use esci_core::corpus::synth::{generate, SynthConfig, SynthCorpus};
use esci_core::corpus::{build_instances, InstanceConfig, PretrainInstance, Vocabs};
use esci_core::encoder::{featurize, EncoderConfig, FeatureConfig, FeatureInput, Model, ModelConfig, NgramInit};
use esci_core::trainer::{Task, Toggles, TrainConfig};

pub struct Fixture {
    pub corpus: SynthCorpus,
    pub vocabs: Vocabs,
    pub cfg: ModelConfig,
}

pub fn fixture(products: usize, examples: usize) -> Fixture {
    let corpus = generate(&SynthConfig {
        products,
        examples,
        seed: 7,
    });
    let vocabs = Vocabs::from_products(&corpus.products, &[], 1, 2000);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            vocab_size: vocabs.tokens.len(),
            max_len: 48,
            dropout: 0.1,
        },
        features: FeatureConfig {
            ngram_buckets: 256,
            ngram_dim: 8,
            id_dim: 4,
            ngram_init: NgramInit::Random,
        },
        brand_classes: vocabs.brands.len(),
        color_classes: vocabs.colors.len(),
    };
    Fixture { corpus, vocabs, cfg }
}

impl Fixture {
    pub fn model(&self, seed: u64) -> Model {
        Model::new(self.cfg.clone(), seed).unwrap()
    }

    pub fn instances(&self) -> Vec<PretrainInstance> {
        let cfg = InstanceConfig {
            max_len: self.cfg.encoder.max_len,
            ..InstanceConfig::default()
        };
        build_instances(&self.corpus.products, &self.vocabs, &cfg, 3).unwrap()
    }

    pub fn labeled(&self, task: Task) -> (Vec<FeatureInput>, Vec<usize>) {
        let inputs = self
            .corpus
            .examples
            .iter()
            .map(|e| featurize(e, &self.vocabs, self.cfg.encoder.max_len, self.cfg.features.ngram_buckets))
            .collect();
        let targets = self
            .corpus
            .examples
            .iter()
            .map(|e| task.target(e.esci_label.unwrap()))
            .collect();
        (inputs, targets)
    }
}

pub fn train_cfg(toggles: Toggles) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 8,
        pretrain_epochs: 2,
        finetune_epochs: 2,
        ema_decay: 0.9,
        toggles,
        ..TrainConfig::default()
    }
}
