//! Tiny pre-norm transformer encoder, feature assembly and task heads.
//!
//! The architecture ([`Arch`]) is separate from the weights it reads
//! ([`ParamStore`]), so one architecture can run over the online weights,
//! an EMA shadow or a momentum copy. A forward pass binds weights lazily
//! into a [`Graph`] through a [`Binder`].

mod features;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};

pub use features::{
    featurize, fnv1a64, load_ngram_vectors, ngram_ids, ngram_pool, rank_score, FeatureInput,
    ESCI_GAINS, NUM_COUNTRIES,
};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab_size: 5,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("encoder sizes must be positive");
        }
        if self.d_model % self.heads != 0 {
            return bad("encoder.d_model must be divisible by encoder.heads");
        }
        if self.max_len < 2 {
            return bad("encoder.max_len must be at least 2");
        }
        if self.vocab_size < 5 {
            return bad("encoder.vocab_size must cover the 5 special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("encoder.dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NgramInit {
    Random,
    Pretrained,
    PretrainedFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub ngram_buckets: usize,
    pub ngram_dim: usize,
    pub id_dim: usize,
    pub ngram_init: NgramInit,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            ngram_buckets: 4096,
            ngram_dim: 32,
            id_dim: 8,
            ngram_init: NgramInit::Random,
        }
    }
}

/// Everything that fixes parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    /// Rows of the brand table and arity of the brand head, OOV included.
    pub brand_classes: usize,
    pub color_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let f = &self.features;
        if f.ngram_buckets == 0 || f.ngram_dim == 0 || f.id_dim == 0 {
            return Err(Error::Config("feature sizes must be positive".into()));
        }
        if self.brand_classes < 1 || self.color_classes < 1 {
            return Err(Error::Config("value vocabularies need the OOV row".into()));
        }
        Ok(())
    }

    /// Width of the assembled fine-tuning feature vector.
    pub fn feature_dim(&self) -> usize {
        self.encoder.d_model + 3 * self.features.ngram_dim + 3 * self.features.id_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Esci4,
    Substitute2,
    P2q2,
    Brand,
    Color,
    Mlm,
}

impl HeadKind {
    pub const CLASSIFIERS: [HeadKind; 5] = [
        HeadKind::Esci4,
        HeadKind::Substitute2,
        HeadKind::P2q2,
        HeadKind::Brand,
        HeadKind::Color,
    ];

    fn name(self) -> &'static str {
        match self {
            HeadKind::Esci4 => "esci4",
            HeadKind::Substitute2 => "substitute2",
            HeadKind::P2q2 => "p2q2",
            HeadKind::Brand => "brand",
            HeadKind::Color => "color",
            HeadKind::Mlm => "mlm",
        }
    }

    /// Whether the head reads assembled features rather than the [CLS] vector.
    pub fn reads_features(self) -> bool {
        matches!(self, HeadKind::Esci4 | HeadKind::Substitute2)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of a model; shapes follow from the [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Arch {
    pub cfg: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    heads: HashMap<HeadKind, HeadIds>,
    mlm_dense: (ParamId, ParamId),
    mlm_bias: ParamId,
    ngram: ParamId,
    country: ParamId,
    brand: ParamId,
    color: ParamId,
}

/// Architecture plus its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Arch,
    pub params: ParamStore,
}

/// Dropout switch for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Binds parameters from a store into a graph, once per parameter.
///
/// Frozen parameters, and every parameter of a detached binder, enter the
/// graph as constants.
pub struct Binder<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    cache: HashMap<ParamId, Var>,
    detached: bool,
}

impl<'a> Binder<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            cache: HashMap::new(),
            detached: false,
        }
    }

    /// A binder whose outputs carry no gradient.
    pub fn detached(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            detached: true,
            ..Self::new(g, store)
        }
    }

    pub fn get(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.detached || !self.store.is_trainable(id) {
            self.g.constant(value)
        } else {
            self.g.param(id.0, value)
        };
        self.cache.insert(id, v);
        v
    }
}

/// Output of [`Arch::encode`] for a ragged batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// All positions of all sequences stacked, `[Σ len × d]`.
    pub hidden: Var,
    /// `[B × d]`, hidden state at position 0 of each sequence.
    pub cls: Var,
    /// Row of position 0 of each sequence inside `hidden`.
    pub offsets: Vec<usize>,
}

fn linear_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, r: &mut Rng) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], INIT_STD, r));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

fn norm_init(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.g"), Tensor::filled(&[d], 1.0));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[d]));
    (g, b)
}

impl Model {
    /// Seeded initialization. Parameters are created in a fixed order, so
    /// the same config and seed give bitwise-identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[0x1A17]);
        let e = &cfg.encoder;
        let f = &cfg.features;
        let (d, ff) = (e.d_model, e.d_ff);
        let mut store = ParamStore::new();

        // Input embedding rows start with norm close to 1.
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = store.add("tok_emb", Tensor::randn(&[e.vocab_size, d], emb_std, &mut r));
        let pos_emb = store.add("pos_emb", Tensor::randn(&[e.max_len, d], emb_std, &mut r));
        let seg_emb = store.add("seg_emb", Tensor::randn(&[2, d], emb_std, &mut r));
        let mut layers = Vec::with_capacity(e.layers);
        for l in 0..e.layers {
            let p = format!("layer{l}");
            layers.push(LayerIds {
                ln1: norm_init(&mut store, &format!("{p}.ln1"), d),
                wq: linear_init(&mut store, &format!("{p}.attn.q"), d, d, &mut r),
                wk: linear_init(&mut store, &format!("{p}.attn.k"), d, d, &mut r),
                wv: linear_init(&mut store, &format!("{p}.attn.v"), d, d, &mut r),
                wo: linear_init(&mut store, &format!("{p}.attn.o"), d, d, &mut r),
                ln2: norm_init(&mut store, &format!("{p}.ln2"), d),
                ff1: linear_init(&mut store, &format!("{p}.ff1"), d, ff, &mut r),
                ff2: linear_init(&mut store, &format!("{p}.ff2"), ff, d, &mut r),
            });
        }
        let final_ln = norm_init(&mut store, "final_ln", d);

        let mut heads = HashMap::new();
        for kind in HeadKind::CLASSIFIERS {
            let fan_in = if kind.reads_features() { cfg.feature_dim() } else { d };
            let out = match kind {
                HeadKind::Esci4 => 4,
                HeadKind::Brand => cfg.brand_classes,
                HeadKind::Color => cfg.color_classes,
                _ => 2,
            };
            let name = format!("head.{}", kind.name());
            let (w1, b1) = linear_init(&mut store, &format!("{name}.hidden"), fan_in, ff, &mut r);
            let (w2, b2) = linear_init(&mut store, &format!("{name}.out"), ff, out, &mut r);
            heads.insert(kind, HeadIds { w1, b1, w2, b2 });
        }
        let mlm_dense = linear_init(&mut store, "head.mlm.hidden", d, d, &mut r);
        let mlm_bias = store.add("head.mlm.bias", Tensor::zeros(&[e.vocab_size]));

        let ngram = store.add(
            "ngram.table",
            Tensor::randn(&[f.ngram_buckets, f.ngram_dim], INIT_STD, &mut r),
        );
        let country = store.add(
            "id.country",
            Tensor::randn(&[NUM_COUNTRIES, f.id_dim], INIT_STD, &mut r),
        );
        let brand = store.add(
            "id.brand",
            Tensor::randn(&[cfg.brand_classes, f.id_dim], INIT_STD, &mut r),
        );
        let color = store.add(
            "id.color",
            Tensor::randn(&[cfg.color_classes, f.id_dim], INIT_STD, &mut r),
        );
        if f.ngram_init == NgramInit::PretrainedFrozen {
            store.set_trainable(ngram, false);
        }

        let arch = Arch {
            cfg,
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            final_ln,
            heads,
            mlm_dense,
            mlm_bias,
            ngram,
            country,
            brand,
            color,
        };
        Ok(Self {
            arch,
            params: store,
        })
    }
}

impl Arch {
    pub fn tok_emb(&self) -> ParamId {
        self.tok_emb
    }

    pub fn ngram_table(&self) -> ParamId {
        self.ngram
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut Mode) -> Result<Var> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train(r) => g.dropout(x, self.cfg.encoder.dropout, *r),
        }
    }

    fn linear(&self, b: &mut Binder, x: Var, (w, bias): (ParamId, ParamId)) -> Result<Var> {
        let (w, bias) = (b.get(w), b.get(bias));
        let y = b.g.matmul(x, w)?;
        b.g.add_row(y, bias)
    }

    fn norm(&self, b: &mut Binder, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let (gain, bias) = (b.get(gain), b.get(bias));
        b.g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Encodes a ragged batch of token sequences.
    ///
    /// Positions after the first `[SEP]` get the second segment embedding.
    /// `[PAD]` positions are excluded from the attention keys; they still
    /// get hidden states of their own.
    pub fn encode(&self, b: &mut Binder, batch: &[Vec<u32>], mode: &mut Mode) -> Result<Encoded> {
        let e = &self.cfg.encoder;
        if batch.is_empty() {
            return Err(Error::shape("encode needs at least one sequence"));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut offsets = Vec::with_capacity(batch.len());
        let mut keys = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.is_empty() || seq.len() > e.max_len {
                return Err(Error::shape(format!(
                    "sequence length {} outside [1, {}]",
                    seq.len(),
                    e.max_len
                )));
            }
            let start = ids.len();
            offsets.push(start);
            let k: Vec<usize> = (0..seq.len())
                .filter(|&i| seq[i] != crate::corpus::PAD)
                .collect();
            if k.is_empty() {
                return Err(Error::Data("sequence consists only of [PAD]".into()));
            }
            keys.push(k);
            ids.extend(seq.iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
            let first_sep = seq.iter().position(|&t| t == crate::corpus::SEP).unwrap_or(seq.len());
            segments.extend((0..seq.len()).map(|i| usize::from(i > first_sep)));
        }

        let tok = b.get(self.tok_emb);
        let pos = b.get(self.pos_emb);
        let t = b.g.embedding(tok, &ids)?;
        let p = b.g.embedding(pos, &positions)?;
        let seg = b.get(self.seg_emb);
        let sg = b.g.embedding(seg, &segments)?;
        let mut x = b.g.add(t, p)?;
        x = b.g.add(x, sg)?;
        x = self.dropout(b.g, x, mode)?;

        let dh = e.d_model / e.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let h = self.norm(b, x, layer.ln1)?;
            let q = self.linear(b, h, layer.wq)?;
            let k = self.linear(b, h, layer.wk)?;
            let v = self.linear(b, h, layer.wv)?;
            let mut per_seq = Vec::with_capacity(batch.len());
            for (s, seq) in batch.iter().enumerate() {
                let rows: Vec<usize> = keys[s].iter().map(|&i| offsets[s] + i).collect();
                let qs = b.g.slice_rows(q, offsets[s], seq.len())?;
                let ks = b.g.gather_rows(k, &rows)?;
                let vs = b.g.gather_rows(v, &rows)?;
                let mut heads = Vec::with_capacity(e.heads);
                for hd in 0..e.heads {
                    let qh = b.g.slice_cols(qs, hd * dh, dh)?;
                    let kh = b.g.slice_cols(ks, hd * dh, dh)?;
                    let vh = b.g.slice_cols(vs, hd * dh, dh)?;
                    let scores = b.g.matmul_t(qh, kh)?;
                    let scores = b.g.scale(scores, scale);
                    let att = b.g.softmax_rows(scores);
                    heads.push(b.g.matmul(att, vh)?);
                }
                per_seq.push(b.g.concat_cols(&heads)?);
            }
            let att = b.g.concat_rows(&per_seq)?;
            let o = self.linear(b, att, layer.wo)?;
            let o = self.dropout(b.g, o, mode)?;
            x = b.g.add(x, o)?;

            let h = self.norm(b, x, layer.ln2)?;
            let f = self.linear(b, h, layer.ff1)?;
            let f = b.g.gelu(f);
            let f = self.linear(b, f, layer.ff2)?;
            let f = self.dropout(b.g, f, mode)?;
            x = b.g.add(x, f)?;
        }
        let hidden = self.norm(b, x, self.final_ln)?;
        let cls = b.g.gather_rows(hidden, &offsets)?;
        Ok(Encoded {
            hidden,
            cls,
            offsets,
        })
    }

    /// `[B × (d + 3·d_g + 3·d_id)]` in the order
    /// `[cls | query | bullets | description | country | brand | color]`.
    pub fn assemble_features(&self, b: &mut Binder, cls: Var, inputs: &[FeatureInput]) -> Result<Var> {
        let rows = b.g.value(cls).rows();
        if rows != inputs.len() || b.g.value(cls).cols() != self.cfg.encoder.d_model {
            return Err(Error::shape(format!(
                "cls is {:?}, expected [{} x {}]",
                b.g.value(cls).shape(),
                inputs.len(),
                self.cfg.encoder.d_model
            )));
        }
        let table = b.get(self.ngram);
        let bags = |f: fn(&FeatureInput) -> &Vec<usize>| -> Vec<Vec<usize>> {
            inputs.iter().map(|i| f(i).clone()).collect()
        };
        let q = b.g.mean_pool_bags(table, &bags(|i| &i.query_grams))?;
        let bl = b.g.mean_pool_bags(table, &bags(|i| &i.bullet_grams))?;
        let ds = b.g.mean_pool_bags(table, &bags(|i| &i.desc_grams))?;
        let ct = b.get(self.country);
        let br = b.get(self.brand);
        let co = b.get(self.color);
        let c = b.g.embedding(ct, &inputs.iter().map(|i| i.country).collect::<Vec<_>>())?;
        let r = b.g.embedding(br, &inputs.iter().map(|i| i.brand).collect::<Vec<_>>())?;
        let o = b.g.embedding(co, &inputs.iter().map(|i| i.color).collect::<Vec<_>>())?;
        b.g.concat_cols(&[cls, q, bl, ds, c, r, o])
    }

    /// Logits of a classifier head: `tanh(x·W1 + b1)·W2 + b2`.
    pub fn head_logits(&self, b: &mut Binder, x: Var, kind: HeadKind) -> Result<Var> {
        let ids = self
            .heads
            .get(&kind)
            .ok_or_else(|| Error::Usage("the MLM head is applied through mlm_logits".into()))?;
        let h = self.linear(b, x, (ids.w1, ids.b1))?;
        let h = b.g.tanh(h);
        self.linear(b, h, (ids.w2, ids.b2))
    }

    /// MLM logits `[T × V]` for the given rows of `hidden`. The output
    /// matrix is the token embedding table.
    pub fn mlm_logits(&self, b: &mut Binder, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = b.g.gather_rows(hidden, rows)?;
        let h = self.linear(b, h, self.mlm_dense)?;
        let h = b.g.tanh(h);
        let tok = b.get(self.tok_emb);
        let logits = b.g.matmul_t(h, tok)?;
        let bias = b.get(self.mlm_bias);
        b.g.add_row(logits, bias)
    }

    /// Encoder, feature assembly, optional feature dropout and a
    /// feature-reading head. Returns `(features, logits)`.
    pub fn classify(
        &self,
        b: &mut Binder,
        inputs: &[FeatureInput],
        kind: HeadKind,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let tokens: Vec<Vec<u32>> = inputs.iter().map(|i| i.tokens.clone()).collect();
        let enc = self.encode(b, &tokens, mode)?;
        let feats = self.assemble_features(b, enc.cls, inputs)?;
        let feats = self.dropout(b.g, feats, mode)?;
        let logits = self.head_logits(b, feats, kind)?;
        Ok((feats, logits))
    }
}

/// Row-wise softmax of a logit matrix held as plain numbers.
pub fn softmax_probs(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}
