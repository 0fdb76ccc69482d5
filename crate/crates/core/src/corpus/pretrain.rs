//! Pre-training instances: MLM masking, fake-query sampling and the
//! task-mixing batch stream.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::record::ProductRecord;
use super::tokenize::{split_words, tokenize, tokenize_pair};
use super::vocab::{is_special, Vocabs, MASK, NUM_SPECIALS, OOV};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskTag {
    Mlm,
    P2q,
    P2brand,
    P2color,
    Contrast,
}

impl TaskTag {
    pub const ALL: [TaskTag; 5] = [
        TaskTag::Mlm,
        TaskTag::P2q,
        TaskTag::P2brand,
        TaskTag::P2color,
        TaskTag::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Mlm => "MLM",
            TaskTag::P2q => "P2Q",
            TaskTag::P2brand => "P2BRAND",
            TaskTag::P2color => "P2COLOR",
            TaskTag::Contrast => "CONTRAST",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-task label payload. The variant determines the task tag.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Masked positions and their original ids.
    Mlm { targets: Vec<(usize, u32)> },
    /// Whether the fake query was cut from this product.
    P2q { matches: bool },
    Brand(usize),
    Color(usize),
    /// Second view of the same text.
    Contrast { view: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainInstance {
    pub id: usize,
    pub tokens: Vec<u32>,
    pub payload: Payload,
}

impl PretrainInstance {
    pub fn task(&self) -> TaskTag {
        match self.payload {
            Payload::Mlm { .. } => TaskTag::Mlm,
            Payload::P2q { .. } => TaskTag::P2q,
            Payload::Brand(_) => TaskTag::P2brand,
            Payload::Color(_) => TaskTag::P2color,
            Payload::Contrast { .. } => TaskTag::Contrast,
        }
    }
}

/// Unclamped Poisson draw.
pub fn poisson_draw(rng: &mut impl Rng, mean: f64) -> u64 {
    let dist = Poisson::new(mean).expect("mean must be positive and finite");
    dist.sample(rng) as u64
}

/// Cuts a contiguous window of Poisson-distributed length out of the
/// product text. The length is clamped to `[1, word count]`.
pub fn sample_fake_query(product: &ProductRecord, rng: &mut impl Rng, mean: f64) -> Result<String> {
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::Usage(format!("poisson mean must be positive, got {mean}")));
    }
    let words = split_words(&product.full_text());
    if words.is_empty() {
        return Err(Error::Data(format!(
            "product {:?} has no text to sample from",
            product.product_id
        )));
    }
    let k = (poisson_draw(rng, mean) as usize).clamp(1, words.len());
    let start = rng.random_range(0..=words.len() - k);
    Ok(words[start..start + k].join(" "))
}

/// BERT-style masking. Each non-special position is selected with
/// probability `rate`; a selected position becomes `[MASK]` 80% of the
/// time, a random non-special id 10%, and stays unchanged 10%.
pub fn mask_for_mlm(
    tokens: &[u32],
    rng: &mut impl Rng,
    rate: f64,
    vocab_size: usize,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    assert!((0.0..=1.0).contains(&rate), "mask rate outside [0, 1]");
    let mut masked = tokens.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in tokens.iter().enumerate() {
        if is_special(id) || rng.random::<f64>() >= rate {
            continue;
        }
        targets.push((pos, id));
        let roll = rng.random::<f64>();
        if roll < 0.8 {
            masked[pos] = MASK;
        } else if roll < 0.9 && vocab_size > NUM_SPECIALS as usize {
            masked[pos] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
        }
    }
    (masked, targets)
}

/// Which pre-training tasks produce instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub mlm: bool,
    pub p2q: bool,
    pub p2brand: bool,
    pub p2color: bool,
    pub contrast: bool,
}

impl Default for TaskSet {
    fn default() -> Self {
        Self {
            mlm: true,
            p2q: true,
            p2brand: true,
            p2color: true,
            contrast: true,
        }
    }
}

impl TaskSet {
    pub fn only(tags: &[TaskTag]) -> Self {
        Self {
            mlm: tags.contains(&TaskTag::Mlm),
            p2q: tags.contains(&TaskTag::P2q),
            p2brand: tags.contains(&TaskTag::P2brand),
            p2color: tags.contains(&TaskTag::P2color),
            contrast: tags.contains(&TaskTag::Contrast),
        }
    }

    pub fn contains(&self, tag: TaskTag) -> bool {
        match tag {
            TaskTag::Mlm => self.mlm,
            TaskTag::P2q => self.p2q,
            TaskTag::P2brand => self.p2brand,
            TaskTag::P2color => self.p2color,
            TaskTag::Contrast => self.contrast,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InstanceConfig {
    pub tasks: TaskSet,
    pub mlm_rate: f64,
    pub max_len: usize,
    /// Overrides the per-locale fake-query mean when set.
    pub fake_query_mean: Option<f64>,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            tasks: TaskSet::default(),
            mlm_rate: 0.15,
            max_len: 128,
            fake_query_mean: None,
        }
    }
}

/// Builds the task-tagged instances for every product, in product order.
///
/// Per product: one MLM instance; a positive Product2Query pair and, when
/// there is another product, a negative pair using the same fake query
/// against a uniformly chosen different product; one brand and one color
/// instance when the value is known; one contrastive instance whose second
/// view is the same text (views differ through dropout).
pub fn build_instances(
    products: &[ProductRecord],
    vocabs: &Vocabs,
    cfg: &InstanceConfig,
    seed: u64,
) -> Result<Vec<PretrainInstance>> {
    let mut out = Vec::new();
    let v = vocabs.tokens.len();
    for (pi, product) in products.iter().enumerate() {
        if !product.has_text() {
            continue;
        }
        let mut rng = rng::stream(seed, &[0x1257, pi as u64]);
        let text = product.full_text();
        let tokens = tokenize(&text, &vocabs.tokens, cfg.max_len);
        let mut push = |tokens: Vec<u32>, payload: Payload| {
            let id = out.len();
            out.push(PretrainInstance {
                id,
                tokens,
                payload,
            });
        };
        if cfg.tasks.mlm {
            let (masked, targets) = mask_for_mlm(&tokens, &mut rng, cfg.mlm_rate, v);
            push(masked, Payload::Mlm { targets });
        }
        if cfg.tasks.p2q {
            let mean = cfg
                .fake_query_mean
                .unwrap_or_else(|| product.locale.fake_query_mean());
            let query = sample_fake_query(product, &mut rng, mean)?;
            push(
                tokenize_pair(&query, &text, &vocabs.tokens, cfg.max_len),
                Payload::P2q { matches: true },
            );
            if products.len() > 1 {
                let mut other = rng.random_range(0..products.len() - 1);
                if other >= pi {
                    other += 1;
                }
                let other_text = products[other].full_text();
                push(
                    tokenize_pair(&query, &other_text, &vocabs.tokens, cfg.max_len),
                    Payload::P2q { matches: false },
                );
            }
        }
        if cfg.tasks.p2brand {
            let brand = vocabs.brands.id(&product.brand);
            if brand != OOV {
                push(tokens.clone(), Payload::Brand(brand));
            }
        }
        if cfg.tasks.p2color {
            let color = vocabs.colors.id(&product.color);
            if color != OOV {
                push(tokens.clone(), Payload::Color(color));
            }
        }
        if cfg.tasks.contrast {
            push(
                tokens.clone(),
                Payload::Contrast {
                    view: tokens.clone(),
                },
            );
        }
    }
    Ok(out)
}

/// Groups instances into task-homogeneous batches and interleaves the
/// batches of all tasks in a seeded random order. Returns indices into
/// `instances`; every index appears exactly once.
pub fn mix_task_batches(
    instances: &[PretrainInstance],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut by_task: BTreeMap<TaskTag, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_task.entry(inst.task()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in by_task {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}
