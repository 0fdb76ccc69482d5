//! Run configuration: a flat JSON object with dotted keys, overlaid on
//! defaults and then on `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use esci_core::corpus::TaskSet;
use esci_core::encoder::{EncoderConfig, FeatureConfig, ModelConfig};
use esci_core::objectives::ContrastiveConfig;
use esci_core::trainer::{Task, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Catalogue JSON-lines; derived from `examples` when unset.
    pub products: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub eval_examples: Option<PathBuf>,
    /// Output of `predict` or `rank`, read by `evaluate`.
    pub predictions: Option<PathBuf>,
    /// Derived copies per Complement/Irrelevant training pair; 0 disables.
    pub augment_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Parent of every run directory.
    pub out: PathBuf,
    pub vocab: Option<PathBuf>,
    /// Weights to start fine-tuning or cleaning from.
    pub init: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Ensemble members for `rank`.
    pub checkpoints: Vec<PathBuf>,
    pub ngram_vectors: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub min_count: usize,
    pub max_size: usize,
}

/// Encoder shape without the vocabulary size, which comes from the vocab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub tasks: TaskSet,
    pub mlm_rate: f64,
    pub fake_query_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Stop after this many optimizer steps; the checkpoint can be resumed.
    pub max_steps: Option<u64>,
    pub eval_batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanSection {
    pub fraction: f64,
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Fold count of the held-out split used by `ablate`.
    pub folds: usize,
    pub fold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    /// Accumulating pre-training tasks.
    Pretrain,
    /// Accumulating fine-tuning strategies.
    Strategies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub table: AblationTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub products: usize,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub data: DataPaths,
    pub paths: Paths,
    pub vocab: VocabSection,
    pub encoder: EncoderSection,
    pub features: FeatureConfig,
    pub pretrain: PretrainSection,
    /// `train.seed` is not a key; the top-level seed is copied in.
    pub train: TrainConfig,
    pub contrastive: ContrastiveConfig,
    pub run: RunSection,
    pub clean: CleanSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            seed: 0,
            task: Task::Task2,
            data: DataPaths {
                products: None,
                examples: None,
                eval_examples: None,
                predictions: None,
                augment_cap: 0,
            },
            paths: Paths {
                out: PathBuf::from("runs"),
                vocab: None,
                init: None,
                resume: None,
                checkpoint: None,
                checkpoints: Vec::new(),
                ngram_vectors: None,
            },
            vocab: VocabSection {
                min_count: 1,
                max_size: 20_000,
            },
            encoder: EncoderSection {
                layers: enc.layers,
                d_model: enc.d_model,
                heads: enc.heads,
                d_ff: enc.d_ff,
                max_len: enc.max_len,
                dropout: enc.dropout,
            },
            features: FeatureConfig::default(),
            pretrain: PretrainSection {
                tasks: TaskSet::default(),
                mlm_rate: 0.15,
                fake_query_mean: None,
            },
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig::default(),
            run: RunSection {
                max_steps: None,
                eval_batch_size: 64,
            },
            clean: CleanSection {
                fraction: 0.04,
                folds: 5,
            },
            eval: EvalSection { folds: 5, fold: 0 },
            ablate: AblateSection {
                table: AblationTable::Strategies,
            },
            synth: SynthSection {
                products: 200,
                examples: 2000,
            },
        }
    }
}

const HIDDEN_KEYS: [&str; 1] = ["train.seed"];

/// Flattens nested objects into dotted keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() || prefix.is_empty() => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys come from a flattened object");
            }
        }
    }
    Value::Object(root)
}

fn default_flat() -> BTreeMap<String, Value> {
    let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("defaults serialize"));
    for k in HIDDEN_KEYS {
        flat.remove(k);
    }
    flat
}

/// Parses an override value: JSON when it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// A fully resolved configuration and its flat form.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub flat: BTreeMap<String, Value>,
}

impl Resolved {
    /// Defaults, then the config file, then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut flat = default_flat();
        let mut set = |key: &str, v: Value, origin: &str| -> anyhow::Result<()> {
            match flat.get_mut(key) {
                Some(slot) => {
                    *slot = v;
                    Ok(())
                }
                None => Err(anyhow!("unknown config key `{key}` ({origin})")),
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            let doc: Value = serde_json::from_str(&text)
                .with_context(|| format!("config file {} is not valid JSON", path.display()))?;
            let Value::Object(map) = doc else {
                bail!("config file {} must hold a JSON object", path.display());
            };
            for (k, v) in map {
                set(&k, v, &path.display().to_string())?;
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{o}` must look like key=value"))?;
            set(k.trim(), parse_value(raw.trim()), "--set")?;
        }
        Self::from_flat(flat)
    }

    fn from_flat(flat: BTreeMap<String, Value>) -> anyhow::Result<Self> {
        let mut full = flat.clone();
        let seed = full.get("seed").cloned().unwrap_or(Value::from(0));
        full.insert("train.seed".into(), seed);
        let nested = unflatten(&full);
        let config: RunConfig = serde_path_to_error::deserialize(nested)
            .map_err(|e| anyhow!("config key `{}`: {}", e.path(), e.inner()))?;
        Ok(Self { config, flat })
    }

    /// Pretty JSON with sorted keys; loading it back gives the same run.
    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.flat.clone().into_iter().collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("values serialize");
        s.push('\n');
        s
    }

    /// First 8 hex digits of SHA-256 over the command and resolved config.
    pub fn hash8(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0u8]);
        h.update(self.to_json().as_bytes());
        let digest = h.finalize();
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        self.config
            .paths
            .out
            .join(format!("{command}-{}-s{}", self.hash8(command), self.config.seed))
    }
}

impl RunConfig {
    pub fn model_config(&self, vocab_size: usize, brand_classes: usize, color_classes: usize) -> ModelConfig {
        let e = &self.encoder;
        ModelConfig {
            encoder: EncoderConfig {
                layers: e.layers,
                d_model: e.d_model,
                heads: e.heads,
                d_ff: e.d_ff,
                vocab_size,
                max_len: e.max_len,
                dropout: e.dropout,
            },
            features: self.features.clone(),
            brand_classes,
            color_classes,
        }
    }
}
