//! Acceptance suite. Every test prints one `criterion NN ...: PASS|FAIL`
//! line to the real stdout (not the captured one) and then asserts.
//!
//! Tests hold a process-wide lock so that the measured runtimes are not
//! inflated by other criteria running on the same cores.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use esci_cli::commands::{read_metrics, CHECKPOINT, METRICS, TRAIN_LOG};
use esci_cli::{execute, Cli};
use clap::Parser;
use esci_core::confident::{estimate_noise, oof_probs, LinearProbe};
use esci_core::corpus::synth::noisy_clusters;
use esci_core::corpus::{load_examples, poisson_draw, sample_fake_query, split_words, write_examples, Locale, ProductRecord};
use esci_core::encoder::{
    ngram_ids, Binder, EncoderConfig, FeatureConfig, FeatureInput, HeadKind, Mode, Model, ModelConfig, NgramInit,
};
use esci_core::evalkit::{ensemble_mean, kfold_split, micro_f1, ndcg};
use esci_core::numerics::{max_gradient_error, max_param_gradient_error, Graph, Tensor, Var};
use esci_core::objectives::{
    classification_loss, contrastive_loss, mlm_loss, rdrop_loss, soft_cross_entropy, LossKind, LossParams,
    MomentumQueue,
};
use esci_core::rng;
use esci_core::trainer::{fgm_perturb, EmaState, Finetuner, LabeledSet, Task, Toggles, TrainConfig};
use esci_core::numerics::ParamStore;

static SERIAL: Mutex<()> = Mutex::new(());

struct Criterion {
    id: u32,
    name: &'static str,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            start: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn runtime_under(&mut self, limit: Duration) {
        let t = self.start.elapsed();
        self.check(t < limit, format!("runtime {:.1}s (limit {}s)", t.as_secs_f64(), limit.as_secs()));
    }

    fn finish(self) {
        let verdict = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = if self.failures.is_empty() {
            self.notes.join("; ")
        } else {
            format!("failed: {}", self.failures.join("; "))
        };
        let line = format!("criterion {:02} {}: {verdict} ({detail})\n", self.id, self.name);
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
        assert!(self.failures.is_empty(), "{}", line.trim_end());
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn bundled(name: &str) -> PathBuf {
    repo_root().join("data/synth").join(name)
}

/// Runs one CLI command and returns its run directory.
fn cli(args: &[String]) -> PathBuf {
    let argv = std::iter::once("esci".to_string()).chain(args.iter().cloned());
    let parsed = Cli::try_parse_from(argv).unwrap();
    execute(&parsed).unwrap_or_else(|f| panic!("esci {args:?} failed with exit {}: {f}", f.code))
}

fn args(cmd: &str, config: Option<&Path>, sets: &[(&str, String)]) -> Vec<String> {
    let mut a = vec![cmd.to_string(), "--quiet".to_string()];
    if let Some(c) = config {
        a.push("--config".into());
        a.push(c.display().to_string());
    }
    for (k, v) in sets {
        a.push("--set".into());
        a.push(format!("{k}={v}"));
    }
    a
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn metric(dir: &Path, key: &str) -> f64 {
    read_metrics(dir).unwrap()[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {}", dir.display()))
}

/// Weighted sum with fixed random weights, so every output entry matters.
fn wsum(g: &mut Graph, x: Var, seed: u64) -> esci_core::Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut r = rng::stream(seed, &[0xA11]);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut r));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> esci_core::Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng::stream(seed, &[0x0B5]);
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut r);
    let a = u(&[3, 4], -2.0, 2.0);
    let b = u(&[3, 4], -2.0, 2.0);
    let pos = u(&[3, 4], 0.2, 3.0);
    let row = u(&[4], -1.0, 1.0);
    let right = u(&[4, 5], -1.0, 1.0);
    let other = u(&[5, 4], -1.0, 1.0);
    let table = u(&[6, 4], -1.0, 1.0);
    let gain = u(&[4], 0.5, 1.5);
    let w = move |s: u64| seed * 1000 + s;
    let mut v: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    v.push(("add", vec![a.clone(), b.clone()], Box::new(move |g, x| { let y = g.add(x[0], x[1])?; wsum(g, y, w(1)) })));
    v.push(("sub", vec![a.clone(), b.clone()], Box::new(move |g, x| { let y = g.sub(x[0], x[1])?; wsum(g, y, w(2)) })));
    v.push(("mul", vec![a.clone(), b.clone()], Box::new(move |g, x| { let y = g.mul(x[0], x[1])?; wsum(g, y, w(3)) })));
    v.push(("scale", vec![a.clone()], Box::new(move |g, x| { let y = g.scale(x[0], -1.7); wsum(g, y, w(4)) })));
    v.push(("add_row", vec![a.clone(), row.clone()], Box::new(move |g, x| { let y = g.add_row(x[0], x[1])?; wsum(g, y, w(5)) })));
    v.push(("matmul", vec![a.clone(), right], Box::new(move |g, x| { let y = g.matmul(x[0], x[1])?; wsum(g, y, w(6)) })));
    v.push(("matmul_t", vec![a.clone(), other], Box::new(move |g, x| { let y = g.matmul_t(x[0], x[1])?; wsum(g, y, w(7)) })));
    v.push(("transpose", vec![a.clone()], Box::new(move |g, x| { let y = g.transpose(x[0])?; wsum(g, y, w(8)) })));
    v.push(("tanh", vec![a.clone()], Box::new(move |g, x| { let y = g.tanh(x[0]); wsum(g, y, w(9)) })));
    v.push(("gelu", vec![a.clone()], Box::new(move |g, x| { let y = g.gelu(x[0]); wsum(g, y, w(10)) })));
    v.push(("exp", vec![a.clone()], Box::new(move |g, x| { let y = g.exp(x[0]); wsum(g, y, w(11)) })));
    v.push(("log", vec![pos.clone()], Box::new(move |g, x| { let y = g.log(x[0])?; wsum(g, y, w(12)) })));
    v.push(("powf", vec![pos.clone()], Box::new(move |g, x| { let y = g.powf(x[0], 1.5)?; wsum(g, y, w(13)) })));
    v.push(("softmax_axis0", vec![a.clone()], Box::new(move |g, x| { let y = g.softmax(x[0], 0)?; wsum(g, y, w(14)) })));
    v.push(("softmax_axis1", vec![a.clone()], Box::new(move |g, x| { let y = g.softmax(x[0], 1)?; wsum(g, y, w(15)) })));
    v.push(("softmax_rows", vec![a.clone()], Box::new(move |g, x| { let y = g.softmax_rows(x[0]); wsum(g, y, w(16)) })));
    v.push(("log_softmax_rows", vec![a.clone()], Box::new(move |g, x| { let y = g.log_softmax_rows(x[0]); wsum(g, y, w(17)) })));
    v.push((
        "layer_norm",
        vec![a.clone(), gain, row.clone()],
        Box::new(move |g, x| { let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?; wsum(g, y, w(18)) }),
    ));
    v.push(("embedding", vec![table.clone()], Box::new(move |g, x| { let y = g.embedding(x[0], &[0, 2, 2, 5])?; wsum(g, y, w(19)) })));
    v.push((
        "mean_pool_bags",
        vec![table.clone()],
        Box::new(move |g, x| { let y = g.mean_pool_bags(x[0], &[vec![0, 1], vec![2, 2, 3], vec![], vec![5]])?; wsum(g, y, w(20)) }),
    ));
    v.push((
        "dropout",
        vec![a.clone()],
        Box::new(move |g, x| {
            let mut dr = rng::stream(seed, &[0xD0]);
            let y = g.dropout(x[0], 0.3, &mut dr)?;
            wsum(g, y, w(21))
        }),
    ));
    v.push(("slice_cols", vec![a.clone()], Box::new(move |g, x| { let y = g.slice_cols(x[0], 1, 2)?; wsum(g, y, w(22)) })));
    v.push(("concat_cols", vec![a.clone(), b.clone()], Box::new(move |g, x| { let y = g.concat_cols(&[x[0], x[1]])?; wsum(g, y, w(23)) })));
    v.push(("gather_rows", vec![a.clone()], Box::new(move |g, x| { let y = g.gather_rows(x[0], &[2, 0, 2])?; wsum(g, y, w(24)) })));
    v.push(("slice_rows", vec![a.clone()], Box::new(move |g, x| { let y = g.slice_rows(x[0], 1, 2)?; wsum(g, y, w(25)) })));
    v.push(("concat_rows", vec![a.clone(), b.clone()], Box::new(move |g, x| { let y = g.concat_rows(&[x[0], x[1]])?; wsum(g, y, w(26)) })));
    v.push(("pick", vec![a.clone()], Box::new(move |g, x| { let y = g.pick(x[0], &[1, 3, 0])?; wsum(g, y, w(27)) })));
    v.push(("sum", vec![a.clone()], Box::new(move |g, x| { let y = g.sum(x[0]); Ok(g.scale(y, 0.7)) })));
    v.push(("mean", vec![a.clone()], Box::new(move |g, x| { let y = g.mean(x[0]); Ok(g.scale(y, 1.3)) })));
    v.push(("l2_normalize_rows", vec![a.clone()], Box::new(move |g, x| { let y = g.l2_normalize_rows(x[0])?; wsum(g, y, w(28)) })));
    v.push(("reshape", vec![a.clone()], Box::new(move |g, x| { let y = g.reshape(x[0], vec![2, 6])?; wsum(g, y, w(29)) })));
    v
}

fn loss_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng::stream(seed, &[0x1055]);
    let logits = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut r);
    let other = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut r);
    let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
    let mut queue = MomentumQueue::new(3);
    queue.enqueue(&Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r));
    let soft = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4]; 5]).unwrap();
    let mut v: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    for kind in LossKind::ALL {
        let t = targets.clone();
        v.push((kind.as_str(), vec![logits.clone()], Box::new(move |g, x| classification_loss(g, x[0], &t, kind, &LossParams::default()))));
    }
    let t = targets.clone();
    v.push(("mlm", vec![logits.clone()], Box::new(move |g, x| mlm_loss(g, Some(x[0]), &t))));
    v.push(("rdrop", vec![logits.clone(), other.clone()], Box::new(|g, x| rdrop_loss(g, x[0], x[1], 1.0))));
    v.push(("contrastive", vec![logits.clone(), other], Box::new(move |g, x| contrastive_loss(g, x[0], x[1], &queue, 0.5))));
    v.push(("soft_ce", vec![logits], Box::new(move |g, x| soft_cross_entropy(g, x[0], &soft))));
    v
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            vocab_size: 20,
            max_len: 16,
            dropout: 0.1,
        },
        features: FeatureConfig {
            ngram_buckets: 31,
            ngram_dim: 4,
            id_dim: 3,
            ngram_init: NgramInit::Random,
        },
        brand_classes: 3,
        color_classes: 4,
    }
}

fn feature_input(tokens: Vec<u32>, brand: usize, color: usize) -> FeatureInput {
    FeatureInput {
        tokens,
        query_grams: ngram_ids("red lamp", 31),
        bullet_grams: ngram_ids("bright light", 31),
        desc_grams: ngram_ids("a lamp for reading", 31),
        country: 1,
        brand,
        color,
    }
}

/// Every parameter shifted by seeded noise so that heads with zero
/// initialization still pass gradient to the encoder.
fn perturbed_model(seed: u64) -> Model {
    let mut m = Model::new(tiny_model_config(), seed).unwrap();
    let mut r = rng::stream(seed, &[0x9E]);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let t = m.params.get_mut(id);
        let noise = Tensor::randn(t.shape(), 0.3, &mut r);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    m
}

fn encoder_gradient_error(seed: u64) -> f64 {
    let model = perturbed_model(seed);
    let arch = model.arch.clone();
    let inputs = [
        feature_input(vec![2, 5, 6, 3, 9, 3], 1, 2),
        feature_input(vec![2, 7, 3, 11, 12, 13, 3], 0, 3),
        feature_input(vec![2, 8, 3], 2, 0),
    ];
    let seqs: Vec<Vec<u32>> = inputs.iter().map(|i| i.tokens.clone()).collect();
    let build = |g: &mut Graph, store: &ParamStore| -> esci_core::Result<Var> {
        let mut b = Binder::new(g, store);
        let mut r = rng::stream(seed, &[0xE0]);
        let mut mode = Mode::Train(&mut r);
        let (_, logits) = arch.classify(&mut b, &inputs, HeadKind::Esci4, &mut mode)?;
        let cls_loss = classification_loss(b.g, logits, &[0, 3, 1], LossKind::Ce, &LossParams::default())?;
        let enc = arch.encode(&mut b, &seqs, &mut mode)?;
        let ml = arch.mlm_logits(&mut b, enc.hidden, &[1, 8, 10])?;
        let m = mlm_loss(b.g, Some(ml), &[5, 12, 9])?;
        let enc2 = arch.encode(&mut b, &seqs, &mut mode)?;
        let c = contrastive_loss(b.g, enc.cls, enc2.cls, &MomentumQueue::new(0), 0.5)?;
        let s = b.g.add(cls_loss, m)?;
        b.g.add(s, c)
    };
    max_param_gradient_error(&model.params, build, 1e-5, Some(6)).unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _g = lock();
    let mut c = Criterion::new(1, "gradient correctness");
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for seed in 0..20u64 {
        for (name, inputs, build) in op_cases(seed).into_iter().chain(loss_cases(seed)) {
            let e = max_gradient_error(|g, v| build(g, v), &inputs, 1e-5).unwrap();
            let slot = worst.entry(name).or_insert(0.0);
            *slot = slot.max(e);
        }
        let e = encoder_gradient_error(seed);
        let slot = worst.entry("tiny_encoder").or_insert(0.0);
        *slot = slot.max(e);
    }
    for (name, e) in &worst {
        if *e > 1e-4 {
            c.check(false, format!("{name} max relative error {e:.2e}"));
        }
    }
    let overall = worst.values().cloned().fold(0.0, f64::max);
    c.check(overall <= 1e-4, format!("{} ops/losses x 20 seeds, max relative error {overall:.2e}", worst.len()));
    c.runtime_under(Duration::from_secs(120));
    c.finish();
}

/// Loss computed straight from the definition with plain loops.
fn contrastive_direct(h: &[Vec<f64>], hp: &[Vec<f64>], q: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let cos = |a: &Vec<f64>, b: &Vec<f64>| unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for (i, hi) in h.iter().enumerate() {
        let keys: Vec<&Vec<f64>> = hp.iter().chain(q).collect();
        let denom: f64 = keys.iter().map(|k| (cos(hi, k) / tau).exp()).sum();
        total += -((cos(hi, &hp[i]) / tau).exp() / denom).ln();
    }
    total / h.len() as f64
}

fn eval_contrastive(h: &[Vec<f64>], hp: &[Vec<f64>], q: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(h).unwrap());
    let b = g.constant(Tensor::from_rows(hp).unwrap());
    let mut queue = MomentumQueue::new(q.len());
    if !q.is_empty() {
        queue.enqueue(&Tensor::from_rows(q).unwrap());
    }
    let l = contrastive_loss(&mut g, a, b, &queue, tau).unwrap();
    g.value(l).item()
}

#[test]
fn criterion_02_contrastive_oracle() {
    let _g = lock();
    let mut c = Criterion::new(2, "contrastive loss oracle");
    let mut r = rng::stream(2, &[]);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(1..=8);
        let q = r.random_range(0..=16);
        let d = r.random_range(2..=6);
        let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
        let mut rows = |k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
        };
        let (h, hp, qu) = (rows(n), rows(n), rows(q));
        worst = worst.max((eval_contrastive(&h, &hp, &qu, tau) - contrastive_direct(&h, &hp, &qu, tau)).abs());
    }
    c.check(worst <= 1e-10, format!("500 random cases, max |diff| {worst:.2e}"));
    let single = eval_contrastive(&[vec![0.3, -1.2, 0.5]], &[vec![2.0, 0.1, 0.0]], &[], 0.05);
    c.check(single == 0.0, format!("N=1,Q=0 gives {single}"));
    let mut worst_same = 0.0f64;
    for _ in 0..200 {
        let n = r.random_range(1..=8);
        let q = r.random_range(0..=16);
        let base: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let scaled = |k: usize, r: &mut rng::Rng| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| {
                    let s = r.random_range(0.5..3.0);
                    base.iter().map(|x| x * s).collect()
                })
                .collect()
        };
        let (h, hp, qu) = (scaled(n, &mut r), scaled(n, &mut r), scaled(q, &mut r));
        let l = eval_contrastive(&h, &hp, &qu, 0.05);
        worst_same = worst_same.max((l - ((n + q) as f64).ln()).abs());
    }
    c.check(worst_same <= 1e-12, format!("identical rows give ln(N+Q), max |diff| {worst_same:.2e}"));
    c.finish();
}

#[test]
fn criterion_03_ema_closed_form() {
    let _g = lock();
    let mut c = Criterion::new(3, "EMA closed form");
    let eta = 0.999;
    let mut worst = 0.0f64;
    for &(theta0, target) in &[(0.0, 1.0), (2.5, -1.0), (-3.0, 7.0)] {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![theta0, theta0 * 0.5]).unwrap());
        let mut ema = EmaState::new(&store, eta).unwrap();
        let id = store.find("w").unwrap();
        store.set(id, Tensor::vector(vec![target, target * 0.5]).unwrap()).unwrap();
        for k in 1..=10_000u32 {
            ema.update(&store).unwrap();
            if k == 1 || k % 100 == 0 {
                let decay = eta.powi(k as i32);
                let shadow = &ema.shadow[&id.0];
                for (j, scale) in [1.0, 0.5].iter().enumerate() {
                    let closed = target * scale * (1.0 - decay) + theta0 * scale * decay;
                    worst = worst.max((shadow.data()[j] - closed).abs());
                }
            }
        }
    }
    let one_step = {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut ema = EmaState::new(&store, eta).unwrap();
        store.set(id, Tensor::scalar(1.0)).unwrap();
        ema.update(&store).unwrap();
        ema.shadow[&id.0].item()
    };
    c.check((one_step - 0.001).abs() < 1e-15, format!("one step from 0 toward 1 gives {one_step}"));
    c.check(worst <= 1e-12, format!("eta=0.999, k up to 1e4, max |diff| {worst:.2e}"));
    c.finish();
}

#[test]
fn criterion_04_fgm_contract() {
    let _g = lock();
    let mut c = Criterion::new(4, "FGM contract");
    let mut r = rng::stream(4, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let rows = r.random_range(1..6);
        let cols = r.random_range(1..6);
        let scale = 10f64.powf(r.random_range(-6.0..6.0));
        let grad = Tensor::uniform(&[rows, cols], -scale, scale, &mut r);
        let d = fgm_perturb(&grad, 1.0);
        worst = worst.max((d.l2_norm() - 1.0).abs());
    }
    c.check(worst <= 1e-12, format!("||delta|| = 1.0 over 1000 gradients, max |diff| {worst:.2e}"));
    let zero = fgm_perturb(&Tensor::zeros(&[3, 2]), 1.0);
    c.check(zero.data().iter().all(|v| *v == 0.0), "zero gradient gives zero perturbation");
    let e = fgm_perturb(&Tensor::vector(vec![3.0, 4.0]).unwrap(), 1.0);
    c.check(e.data() == [0.6, 0.8], format!("(3,4) -> {:?}", e.data()));

    // A full fine-tuning step with a zero learning rate must leave every
    // weight, including the attacked embedding table, bit-identical.
    let model = perturbed_model(4);
    let before = model.params.clone();
    let inputs = vec![
        feature_input(vec![2, 5, 6, 3, 9, 3], 1, 2),
        feature_input(vec![2, 7, 3, 11, 12, 3], 0, 3),
        feature_input(vec![2, 8, 9, 3, 14, 3], 2, 0),
        feature_input(vec![2, 10, 3, 15, 3], 1, 1),
    ];
    let targets = vec![0, 3, 1, 2];
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 4,
        finetune_epochs: 1,
        fgm_epsilon: 1.0,
        toggles: Toggles::default(),
        ..TrainConfig::default()
    };
    let set = LabeledSet {
        inputs: &inputs,
        targets: &targets,
    };
    let mut t = Finetuner::new(model, Task::Task2, set, None, cfg).unwrap();
    let log = t.step().unwrap();
    let tok = t.model.arch.tok_emb();
    c.check(
        t.model.params.get(tok).data() == before.get(tok).data(),
        "token embedding table restored bit-exactly",
    );
    c.check(t.model.params == before, "all parameters unchanged at lr 0");
    c.check(
        log.parts.adversarial != log.parts.clean,
        format!("adversarial loss {:.6} differs from clean {:.6}", log.parts.adversarial, log.parts.clean),
    );
    c.finish();
}

fn rdrop_value(a: &[f64], b: &[f64]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, a.len(), a.to_vec()).unwrap());
    let y = g.constant(Tensor::matrix(1, b.len(), b.to_vec()).unwrap());
    let l = rdrop_loss(&mut g, x, y, 1.0).unwrap();
    g.value(l).item()
}

#[test]
fn criterion_05_rdrop_contract() {
    let _g = lock();
    let mut c = Criterion::new(5, "R-Drop contract");
    let softmax = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    let (p, q) = (softmax(&[0.0, 0.0]), softmax(&[0.0, 3f64.ln()]));
    let reference = kl(&p, &q) + kl(&q, &p);
    let got = rdrop_value(&[0.0, 0.0], &[0.0, 3f64.ln()]);
    c.check(
        (got - reference).abs() <= 1e-9 && (got - 0.2746).abs() < 1e-4,
        format!("(0,0) vs (0, ln 3) gives {got:.10}, scalar reference {reference:.10}"),
    );
    let mut r = rng::stream(5, &[]);
    let (mut min_pos, mut worst_sym, mut worst_zero) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = r.random_range(2..6);
        let a: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
        let ab = rdrop_value(&a, &b);
        worst_sym = worst_sym.max((ab - rdrop_value(&b, &a)).abs());
        min_pos = min_pos.min(ab);
        let shift = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
        worst_zero = worst_zero.max(rdrop_value(&a, &shifted).abs());
    }
    c.check(min_pos > 0.0, format!("distinct softmax outputs give positive loss (min {min_pos:.2e})"));
    c.check(worst_sym <= 1e-12, format!("symmetric, max |diff| {worst_sym:.2e}"));
    c.check(worst_zero <= 1e-12, format!("equal softmax outputs give ~0 (max {worst_zero:.2e})"));
    c.finish();
}

/// Vocabulary over the bundled catalogue and every bundled query.
fn bundled_vocab(out: &Path) -> PathBuf {
    let dir = cli(&args(
        "build-vocab",
        None,
        &[
            ("paths.out", s(out)),
            ("data.products", s(&bundled("products.jsonl"))),
            ("data.examples", s(&bundled("examples.jsonl"))),
        ],
    ));
    dir.join("vocab")
}

#[test]
fn criterion_06_multitask_pretraining() {
    let _g = lock();
    let mut c = Criterion::new(6, "multitask pre-training");
    let tmp = tempfile::tempdir().unwrap();
    let vocab = bundled_vocab(tmp.path());
    let run = |out: &str| {
        let t0 = Instant::now();
        let dir = cli(&args(
            "pretrain",
            Some(&bundled("pretrain.json")),
            &[
                ("paths.out", s(&tmp.path().join(out))),
                ("paths.vocab", s(&vocab)),
                ("data.products", s(&bundled("products.jsonl"))),
                ("train.pretrain_epochs", "10".into()),
            ],
        ));
        (dir, t0.elapsed())
    };
    let (a, took) = run("a");
    let (b, _) = run("b");
    let losses: Vec<f64> = (1..=10).map(|e| metric(&a, &format!("epoch_{e}.loss"))).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    c.check(rises <= 1, format!("{rises} non-decreasing epochs in {losses:.3?}"));
    c.check(losses[9] < losses[0], format!("loss {:.3} -> {:.3}", losses[0], losses[9]));
    for f in [CHECKPOINT, METRICS, TRAIN_LOG] {
        c.check(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), format!("{f} identical across runs"));
    }
    c.check(took < Duration::from_secs(300), format!("one run took {:.1}s (limit 300s)", took.as_secs_f64()));
    c.finish();
}

#[test]
fn criterion_07_end_to_end_lift() {
    let _g = lock();
    let mut c = Criterion::new(7, "end-to-end lift");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let examples = load_examples(&bundled("examples.jsonl")).unwrap();
    let labels: Vec<usize> = examples.iter().map(|e| e.esci_label.unwrap().index()).collect();
    let held = kfold_split(examples.len(), 5, &labels, 0).unwrap().folds.remove(0);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, e) in examples.iter().enumerate() {
        if held.binary_search(&i).is_ok() { eval.push(e.clone()) } else { train.push(e.clone()) }
    }
    write_examples(&out.join("train.jsonl"), &train).unwrap();
    write_examples(&out.join("held.jsonl"), &eval).unwrap();
    c.note(format!("{} train / {} held-out examples", train.len(), eval.len()));

    let vocab = bundled_vocab(out);
    let pre = cli(&args(
        "pretrain",
        Some(&bundled("pretrain.json")),
        &[
            ("paths.out", s(out)),
            ("paths.vocab", s(&vocab)),
            ("data.products", s(&bundled("products.jsonl"))),
        ],
    ));
    let finetune = |init: Option<&Path>| {
        let mut sets = vec![
            ("paths.out", s(out)),
            ("paths.vocab", s(&vocab)),
            ("data.examples", s(&out.join("train.jsonl"))),
            ("data.eval_examples", s(&out.join("held.jsonl"))),
        ];
        if let Some(p) = init {
            sets.push(("paths.init", s(p)));
        }
        let dir = cli(&args("finetune", Some(&bundled("finetune.json")), &sets));
        metric(&dir, "eval_micro_f1")
    };
    let pretrained = finetune(Some(&pre.join(CHECKPOINT)));
    let random = finetune(None);
    c.check(
        pretrained - random >= 0.02,
        format!("pre-trained {pretrained:.4} vs random init {random:.4} (lift {:+.4})", pretrained - random),
    );
    c.check(pretrained >= 0.90, format!("EMA+FGM+R-Drop held-out micro-F1 {pretrained:.4} (target 0.90)"));
    c.runtime_under(Duration::from_secs(600));
    c.finish();
}

/// Direct implementation of the threshold, joint and pruning rules.
fn confident_oracle(probs: &[Vec<f64>], labels: &[usize], k: usize, fraction: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = labels.len();
    let mut t = vec![0.0; k];
    for j in 0..k {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            if labels[i] == j {
                sum += probs[i][j];
                count += 1;
            }
        }
        t[j] = sum / count as f64;
    }
    let mut joint = vec![vec![0usize; k]; k];
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        let mut best: Option<usize> = None;
        for j in 0..k {
            if probs[i][j] >= t[j] && best.is_none_or(|b| probs[i][j] > probs[i][b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            joint[labels[i]][j] += 1;
            if j != labels[i] {
                let other = (0..k).filter(|&c| c != labels[i]).map(|c| probs[i][c]).fold(f64::NEG_INFINITY, f64::max);
                cands.push((probs[i][labels[i]] - other, i));
            }
        }
    }
    cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let budget = (fraction * n as f64).floor() as usize;
    (joint, cands.into_iter().take(budget).map(|(_, i)| i).collect())
}

#[test]
fn criterion_08_confident_learning() {
    let _g = lock();
    let mut c = Criterion::new(8, "confident learning");
    let data = noisy_clusters(1000, 4, 0.04, 8);
    let probs = oof_probs(&data.given_labels, 4, 5, 8, |train, held| {
        let x: Vec<Vec<f64>> = train.iter().map(|&i| data.features[i].clone()).collect();
        let y: Vec<usize> = train.iter().map(|&i| data.given_labels[i]).collect();
        let probe = LinearProbe::fit(&x, &y, 4, 300, 0.5, 1e-3)?;
        Ok(held.iter().map(|&i| probe.probs_of(&data.features[i])).collect())
    })
    .unwrap();
    let est = estimate_noise(&probs, &data.given_labels, 0.04).unwrap();
    let removed: Vec<usize> = est.removed.iter().map(|r| r.index).collect();
    let hits = removed.iter().filter(|i| data.flipped.binary_search(i).is_ok()).count();
    let precision = hits as f64 / removed.len().max(1) as f64;
    let recall = hits as f64 / data.flipped.len() as f64;
    c.check(precision >= 0.9, format!("precision {precision:.3} ({hits}/{} removed)", removed.len()));
    c.check(recall >= 0.75, format!("recall {recall:.3} ({hits}/{} flips)", data.flipped.len()));

    let mut r = rng::stream(8, &[]);
    let mut checked = 0;
    let mut mismatches = 0;
    for n in 1..=8usize {
        for k in 1..=3usize {
            for _ in 0..150 {
                // Labels cover every class so thresholds exist.
                if n < k {
                    continue;
                }
                let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
                for i in (1..n).rev() {
                    labels.swap(i, r.random_range(0..=i));
                }
                // Coarse probabilities so that ties and exact threshold hits occur.
                let probs: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let w: Vec<f64> = (0..k).map(|_| r.random_range(0..4) as f64).collect();
                        let s: f64 = w.iter().sum();
                        if s == 0.0 { vec![1.0 / k as f64; k] } else { w.iter().map(|v| v / s).collect() }
                    })
                    .collect();
                let fraction = [0.0, 0.125, 0.25, 0.5, 1.0][r.random_range(0..5)];
                let est = estimate_noise(&probs, &labels, fraction).unwrap();
                let (joint, removed) = confident_oracle(&probs, &labels, k, fraction);
                let got: Vec<usize> = est.removed.iter().map(|c| c.index).collect();
                let keep_ok = (0..n).all(|i| est.keep[i] != removed.contains(&i));
                if est.joint.counts != joint || got != removed || !keep_ok {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    c.check(mismatches == 0, format!("{checked} instances with n<=8, K<=3 match the oracle ({mismatches} mismatches)"));
    c.finish();
}

fn dcg(gains: &[f64]) -> f64 {
    gains.iter().enumerate().map(|(r, g)| g / ((r + 2) as f64).log2()).sum()
}

fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// nDCG with the ideal DCG found by trying every ordering.
fn ndcg_oracle(gains: &[f64]) -> f64 {
    let ideal = permutations(gains).iter().map(|p| dcg(p)).fold(0.0, f64::max);
    if ideal <= 0.0 { 0.0 } else { dcg(gains) / ideal }
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap().then(a.cmp(&b)));
    idx
}

#[test]
fn criterion_09_metrics() {
    let _g = lock();
    let mut c = Criterion::new(9, "metrics");
    let two = ndcg(&[0.1, 1.0], None);
    c.check(
        (two - 0.6875).abs() < 1e-4 && (two - ndcg_oracle(&[0.1, 1.0])).abs() < 1e-12,
        format!("[0.1, 1.0] gives {two:.6}"),
    );
    let mut r = rng::stream(9, &[]);
    let (mut worst_ndcg, mut worst_f1, mut acc_breaks) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let n = r.random_range(1..=6);
        let gains: Vec<f64> = (0..n).map(|_| [0.0, 0.01, 0.1, 1.0][r.random_range(0..4)]).collect();
        worst_ndcg = worst_ndcg.max((ndcg(&gains, None) - ndcg_oracle(&gains)).abs());

        let m = r.random_range(1..=20);
        let k = r.random_range(2..=4);
        let pred: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
        let gold: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for cls in 0..k {
            for (p, g) in pred.iter().zip(&gold) {
                match (*p == cls, *g == cls) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
        }
        let oracle = tp / (tp + 0.5 * (fp + fn_));
        let f1 = micro_f1(&pred, &gold).unwrap();
        worst_f1 = worst_f1.max((f1 - oracle).abs());
        let acc = pred.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64 / m as f64;
        if (f1 - acc).abs() > 1e-12 {
            acc_breaks += 1;
        }
    }
    c.check(worst_ndcg <= 1e-12, format!("nDCG vs permutation oracle on 1000 cases, max |diff| {worst_ndcg:.2e}"));
    c.check(worst_f1 <= 1e-12, format!("micro-F1 vs TP/(TP+(FP+FN)/2) on 1000 cases, max |diff| {worst_f1:.2e}"));
    c.check(acc_breaks == 0, format!("micro-F1 = accuracy on every case ({acc_breaks} violations)"));
    let mut order_breaks = 0;
    for _ in 0..1000 {
        let m = r.random_range(1..=5);
        let n = r.random_range(1..=12);
        let lists: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let a = r.random_range(0.1..10.0);
        let b = r.random_range(-5.0..5.0);
        let scaled: Vec<Vec<f64>> = lists.iter().map(|l| l.iter().map(|v| a * v + b).collect()).collect();
        if argsort(&ensemble_mean(&lists).unwrap()) != argsort(&ensemble_mean(&scaled).unwrap()) {
            order_breaks += 1;
        }
    }
    c.check(order_breaks == 0, format!("ensemble_mean order unchanged by positive affine rescaling ({order_breaks} violations)"));
    c.finish();
}

#[test]
fn criterion_10_poisson_sampler() {
    let _g = lock();
    let mut c = Criterion::new(10, "Poisson sampler");
    for (mu, tag) in [(4.0, 4u64), (8.0, 8)] {
        let mut r = rng::stream(10, &[tag]);
        let n = 100_000;
        let mean = (0..n).map(|_| poisson_draw(&mut r, mu) as f64).sum::<f64>() / n as f64;
        c.check((mean - mu).abs() <= 0.05, format!("mu={mu}: mean of 1e5 draws {mean:.4}"));
    }
    c.check(Locale::Us.fake_query_mean() == 4.0 && Locale::Es.fake_query_mean() == 4.0, "en/es mean 4");
    c.check(Locale::Jp.fake_query_mean() == 8.0, "ja mean 8");
    let mut r = rng::stream(10, &[0]);
    let mut violations = 0;
    let mut draws = 0;
    for words in 1..=12usize {
        let title: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        let product = ProductRecord {
            product_id: format!("p{words}"),
            title: title.join(" "),
            description: String::new(),
            bullet_points: Vec::new(),
            brand: String::new(),
            color: String::new(),
            locale: Locale::Jp,
        };
        for mu in [4.0, 8.0] {
            for _ in 0..2000 {
                let q = sample_fake_query(&product, &mut r, mu).unwrap();
                let k = split_words(&q).len();
                draws += 1;
                if !(1..=words).contains(&k) || !title.join(" ").contains(&q) {
                    violations += 1;
                }
            }
        }
    }
    c.check(violations == 0, format!("clamp to [1, length] held on {draws} windows ({violations} violations)"));
    c.finish();
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_reproducibility() {
    let _g = lock();
    let mut c = Criterion::new(11, "reproducibility");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let base: Vec<(&'static str, String)> = vec![
        ("paths.out", s(&out)),
        ("encoder.layers", "1".into()),
        ("encoder.d_model", "16".into()),
        ("encoder.heads", "2".into()),
        ("encoder.d_ff", "32".into()),
        ("encoder.max_len", "48".into()),
        ("features.ngram_buckets", "256".into()),
        ("features.ngram_dim", "8".into()),
        ("features.id_dim", "4".into()),
        ("train.lr", "0.002".into()),
        ("train.batch_size", "8".into()),
        ("train.pretrain_epochs", "2".into()),
        ("train.finetune_epochs", "2".into()),
        ("train.ema_decay", "0.9".into()),
        ("train.toggles.mixup", "true".into()),
        ("clean.folds", "3".into()),
        ("contrastive.queue_size", "16".into()),
    ];
    let with = |extra: &[(&'static str, String)]| -> Vec<(&'static str, String)> {
        let mut v = base.clone();
        v.extend(extra.iter().map(|(k, x)| (*k, x.clone())));
        v
    };
    let twice = |c: &mut Criterion, cmd: &str, sets: &[(&str, String)]| -> PathBuf {
        let a = args(cmd, None, sets);
        let dir = cli(&a);
        let first = snapshot(&dir);
        let again = cli(&a);
        let same = again == dir && snapshot(&dir) == first;
        c.check(same, format!("{cmd}: {} files identical", first.len()));
        dir
    };

    let synth = twice(&mut c, "synth", &with(&[("synth.products", "24".into()), ("synth.examples", "96".into())]));
    let products = synth.join("products.jsonl");
    let examples = synth.join("examples.jsonl");
    let vocab = twice(
        &mut c,
        "build-vocab",
        &with(&[("data.products", s(&products)), ("data.examples", s(&examples))]),
    )
    .join("vocab");
    let common = with(&[("paths.vocab", s(&vocab)), ("data.products", s(&products)), ("data.examples", s(&examples))]);
    let extend = |extra: &[(&'static str, String)]| -> Vec<(&'static str, String)> {
        let mut v = common.clone();
        v.extend(extra.iter().map(|(k, x)| (*k, x.clone())));
        v
    };
    let pre = twice(&mut c, "pretrain", &extend(&[]));
    let ft = twice(
        &mut c,
        "finetune",
        &extend(&[("paths.init", s(&pre.join(CHECKPOINT))), ("data.eval_examples", s(&examples))]),
    );
    twice(&mut c, "clean", &extend(&[]));
    let pred = twice(&mut c, "predict", &extend(&[("paths.checkpoint", s(&ft.join(CHECKPOINT)))]));
    twice(
        &mut c,
        "rank",
        &extend(&[
            ("task", "task1".into()),
            ("paths.checkpoints", format!("[{:?},{:?}]", s(&ft.join(CHECKPOINT)), s(&pre.join(CHECKPOINT)))),
        ]),
    );
    twice(&mut c, "evaluate", &extend(&[("data.predictions", s(&pred.join("predictions.jsonl")))]));
    twice(&mut c, "ablate", &extend(&[]));

    // Stop at step k, resume from the checkpoint, compare with the straight run.
    for (cmd, extra) in [
        ("pretrain", vec![]),
        ("finetune", vec![("paths.init", s(&pre.join(CHECKPOINT))), ("data.eval_examples", s(&examples))]),
    ] {
        let straight = if cmd == "pretrain" { pre.clone() } else { ft.clone() };
        let k = 7;
        let mut first_args = extend(&extra);
        first_args.push(("run.max_steps", k.to_string()));
        let first = cli(&args(cmd, None, &first_args));
        let mut second_args = extend(&extra);
        second_args.push(("paths.resume", s(&first.join(CHECKPOINT))));
        let second = cli(&args(cmd, None, &second_args));
        let ckpt_same = fs::read(second.join(CHECKPOINT)).unwrap() == fs::read(straight.join(CHECKPOINT)).unwrap();
        let mut joined = fs::read_to_string(first.join(TRAIN_LOG)).unwrap();
        joined.push_str(&fs::read_to_string(second.join(TRAIN_LOG)).unwrap());
        let log_same = joined == fs::read_to_string(straight.join(TRAIN_LOG)).unwrap();
        c.check(ckpt_same && log_same, format!("{cmd}: resume at step {k} equals the straight run"));
    }
    c.finish();
}
