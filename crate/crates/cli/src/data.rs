//! Loading inputs named by the config, with errors that name the key.

use std::path::{Path, PathBuf};

use esci_core::corpus::{load_examples, load_products, products_of, split_augment, Example, ProductRecord, Vocabs};
use esci_core::encoder::{featurize, FeatureInput, Model, ModelConfig, NgramInit};
use esci_core::numerics::ParamStore;
use esci_core::trainer::{load_checkpoint, restore_weights, Task, TrainState};

use crate::config::RunConfig;
use crate::{invalid, Classify, Outcome};

/// The path under `key`, which must be set and exist.
pub fn required<'a>(value: &'a Option<PathBuf>, key: &str, command: &str) -> Outcome<&'a Path> {
    let path = value
        .as_deref()
        .ok_or_else(|| invalid(format!("`{command}` needs config key `{key}`")))?;
    existing(path, key)
}

pub fn existing<'a>(path: &'a Path, key: &str) -> Outcome<&'a Path> {
    if !path.exists() {
        return Err(invalid(format!("{} does not exist (config key `{key}`)", path.display())));
    }
    Ok(path)
}

pub fn examples(path: &Path) -> Outcome<Vec<Example>> {
    let ex = load_examples(path)?;
    if ex.is_empty() {
        return Err(invalid(format!("{} holds no examples", path.display())));
    }
    Ok(ex)
}

/// Examples that must all carry a label.
pub fn labeled(path: &Path) -> Outcome<Vec<Example>> {
    let ex = examples(path)?;
    if let Some(e) = ex.iter().find(|e| e.esci_label.is_none()) {
        return Err(invalid(format!(
            "{}: example {} has no esci_label",
            path.display(),
            e.example_id
        )));
    }
    Ok(ex)
}

pub fn targets(examples: &[Example], task: Task) -> Vec<usize> {
    examples
        .iter()
        .map(|e| task.target(e.esci_label.expect("labels were checked")))
        .collect()
}

/// `data.products`, or the distinct products of `data.examples`.
pub fn catalogue(cfg: &RunConfig, command: &str) -> Outcome<Vec<ProductRecord>> {
    let products = match &cfg.data.products {
        Some(p) => load_products(existing(p, "data.products")?)?,
        None => products_of(&examples(required(&cfg.data.examples, "data.products", command)?)?),
    };
    if products.is_empty() {
        return Err(invalid("the catalogue is empty (config key `data.products`)"));
    }
    Ok(products)
}

pub fn vocabs(cfg: &RunConfig, command: &str) -> Outcome<Vocabs> {
    Ok(Vocabs::load_dir(required(&cfg.paths.vocab, "paths.vocab", command)?)?)
}

pub fn model_config(cfg: &RunConfig, vocabs: &Vocabs) -> Outcome<ModelConfig> {
    let mc = cfg.model_config(vocabs.tokens.len(), vocabs.brands.len(), vocabs.colors.len());
    mc.validate()?;
    Ok(mc)
}

/// Freshly initialized model, with n-gram vectors loaded when configured.
pub fn fresh_model(cfg: &RunConfig, vocabs: &Vocabs) -> Outcome<Model> {
    let mut model = Model::new(model_config(cfg, vocabs)?, cfg.seed)?;
    if cfg.features.ngram_init != NgramInit::Random {
        let path = required(&cfg.paths.ngram_vectors, "paths.ngram_vectors", "features.ngram_init")?;
        let id = model.arch.ngram_table();
        esci_core::encoder::load_ngram_vectors(path, model.params.get_mut(id))?;
    }
    Ok(model)
}

/// Parameters a checkpoint evaluates with: the EMA shadow when present.
pub fn eval_params(model: &Model, state: &TrainState) -> ParamStore {
    let mut params = model.params.clone();
    if let Some(ema) = &state.ema {
        ema.clone().swap(&mut params);
    }
    params
}

/// Loads a checkpoint for inference.
pub fn eval_model(path: &Path, key: &str, vocabs: &Vocabs) -> Outcome<Model> {
    let (mut model, state) = load_checkpoint(existing(path, key)?)?;
    model.params = eval_params(&model, &state);
    let v = model.arch.cfg.encoder.vocab_size;
    if v != vocabs.tokens.len() {
        return Err(invalid(format!(
            "{} was trained with {v} tokens but paths.vocab has {}",
            path.display(),
            vocabs.tokens.len()
        )));
    }
    Ok(model)
}

/// Fresh model, overwritten with the weights in `paths.init` when set.
pub fn initial_model(cfg: &RunConfig, vocabs: &Vocabs) -> Outcome<Model> {
    let mut model = fresh_model(cfg, vocabs)?;
    if let Some(init) = &cfg.paths.init {
        let (src, state) = load_checkpoint(existing(init, "paths.init")?)?;
        restore_weights(&mut model, &eval_params(&src, &state))
            .map_err(|e| anyhow::anyhow!("paths.init {}: {e}", init.display()))
            .invalid()?;
    }
    Ok(model)
}

pub fn features(examples: &[Example], vocabs: &Vocabs, mc: &ModelConfig) -> Vec<FeatureInput> {
    examples
        .iter()
        .map(|e| featurize(e, vocabs, mc.encoder.max_len, mc.features.ngram_buckets))
        .collect()
}

/// Training examples after the optional class-balancing augmentation.
pub fn augmented(cfg: &RunConfig, examples: Vec<Example>) -> Vec<Example> {
    match cfg.data.augment_cap {
        0 => examples,
        cap => split_augment(&examples, cap),
    }
}
