//! One function per command. Each writes into the run directory only.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use esci_core::confident::{apply_mask, estimate_noise, oof_probs};
use esci_core::corpus::synth::{generate, SynthConfig};
use esci_core::corpus::{
    build_instances, write_examples, write_products, EsciLabel, Example, InstanceConfig, TaskSet, TaskTag, Vocabs,
};
use esci_core::encoder::{rank_score, FeatureInput, HeadKind, Model, ESCI_GAINS};
use esci_core::evalkit::{emit_ablation, ensemble_mean, kfold_split, mean_ndcg, micro_f1, rank_by_query, RankedItem};
use esci_core::trainer::{
    argmax, load_checkpoint, predict_probs, save_checkpoint, Finetuner, LabeledSet, Pretrainer, Task, Toggles,
    TrainConfig,
};

use crate::config::{AblationTable, Resolved, RunConfig};
use crate::data;
use crate::{invalid, Classify, Outcome};

/// Files every command may write.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS: &str = "metrics.json";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const RANKING: &str = "ranking.jsonl";
pub const REMOVED: &str = "removed.jsonl";
pub const CLEANED: &str = "cleaned.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const VOCAB_DIR: &str = "vocab";

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    quiet: bool,
    command: &'static str,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.command, msg.as_ref());
        }
    }

    fn write(&self, name: &str, text: &str) -> Outcome<()> {
        let p = self.path(name);
        fs::write(&p, text)
            .map_err(|e| anyhow::anyhow!("cannot write {}: {e}", p.display()))
            .runtime()
    }

    fn write_lines<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Outcome<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(&r).runtime()?);
            text.push('\n');
        }
        self.write(name, &text)
    }
}

/// Flat metrics map with sorted keys.
#[derive(Default)]
struct Metrics(BTreeMap<String, Value>);

impl Metrics {
    fn put(&mut self, key: impl Into<String>, v: impl Into<Value>) {
        self.0.insert(key.into(), v.into());
    }

    fn save(self, ctx: &Ctx) -> Outcome<()> {
        let map: serde_json::Map<String, Value> = self.0.into_iter().collect();
        let mut text = serde_json::to_string_pretty(&Value::Object(map)).runtime()?;
        text.push('\n');
        ctx.write(METRICS, &text)
    }
}

fn validate(cfg: &RunConfig) -> Outcome<()> {
    cfg.train.validate()?;
    cfg.contrastive.validate()?;
    if cfg.run.eval_batch_size == 0 {
        return Err(invalid("run.eval_batch_size must be positive"));
    }
    if cfg.synth.products == 0 {
        return Err(invalid("synth.products must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.clean.fraction) {
        return Err(invalid("clean.fraction must lie in [0, 1]"));
    }
    if cfg.clean.folds < 2 || cfg.eval.folds < 2 {
        return Err(invalid("clean.folds and eval.folds must be at least 2"));
    }
    if cfg.eval.fold >= cfg.eval.folds {
        return Err(invalid("eval.fold must be below eval.folds"));
    }
    if !(0.0..1.0).contains(&cfg.pretrain.mlm_rate) {
        return Err(invalid("pretrain.mlm_rate must lie in [0, 1)"));
    }
    Ok(())
}

/// Runs `command` and returns its run directory.
pub fn run(command: &str, resolved: &Resolved, quiet: bool) -> Outcome<PathBuf> {
    let cfg = &resolved.config;
    validate(cfg)?;
    let command: &'static str = match command {
        "synth" => "synth",
        "build-vocab" => "build-vocab",
        "pretrain" => "pretrain",
        "finetune" => "finetune",
        "clean" => "clean",
        "predict" => "predict",
        "rank" => "rank",
        "evaluate" => "evaluate",
        "ablate" => "ablate",
        other => return Err(invalid(format!("unknown command `{other}`"))),
    };
    let dir = resolved.run_dir(command);
    fs::create_dir_all(&dir)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", dir.display()))
        .runtime()?;
    let ctx = Ctx {
        cfg,
        dir: dir.clone(),
        quiet,
        command,
    };
    ctx.write(RESOLVED_CONFIG, &resolved.to_json())?;
    match command {
        "synth" => synth(&ctx),
        "build-vocab" => build_vocab(&ctx),
        "pretrain" => pretrain(&ctx),
        "finetune" => finetune(&ctx),
        "clean" => clean(&ctx),
        "predict" => predict(&ctx),
        "rank" => rank(&ctx),
        "evaluate" => evaluate(&ctx),
        _ => ablate(&ctx),
    }?;
    Ok(dir)
}

fn synth(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let corpus = generate(&SynthConfig {
        products: cfg.synth.products,
        examples: cfg.synth.examples,
        seed: cfg.seed,
    });
    write_products(&ctx.path("products.jsonl"), &corpus.products)?;
    write_examples(&ctx.path("examples.jsonl"), &corpus.examples)?;
    let mut m = Metrics::default();
    m.put("products", corpus.products.len());
    m.put("examples", corpus.examples.len());
    for l in EsciLabel::ALL {
        let n = corpus.examples.iter().filter(|e| e.esci_label == Some(l)).count();
        m.put(format!("label.{}", l.as_str()), n);
    }
    m.save(ctx)
}

fn build_vocab(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let products = data::catalogue(cfg, ctx.command)?;
    let queries: Vec<String> = match &cfg.data.examples {
        Some(p) => data::examples(data::existing(p, "data.examples")?)?
            .into_iter()
            .map(|e| e.query)
            .collect(),
        None => Vec::new(),
    };
    let refs: Vec<&str> = queries.iter().map(String::as_str).collect();
    let vocabs = Vocabs::from_products(&products, &refs, cfg.vocab.min_count, cfg.vocab.max_size);
    vocabs.save_dir(&ctx.path(VOCAB_DIR))?;
    let mut m = Metrics::default();
    m.put("tokens", vocabs.tokens.len());
    m.put("brands", vocabs.brands.len());
    m.put("colors", vocabs.colors.len());
    m.put("products", products.len());
    m.save(ctx)
}

fn pretrain(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let products = data::catalogue(cfg, ctx.command)?;
    let mc = data::model_config(cfg, &vocabs)?;
    let icfg = InstanceConfig {
        tasks: cfg.pretrain.tasks.clone(),
        mlm_rate: cfg.pretrain.mlm_rate,
        max_len: mc.encoder.max_len,
        fake_query_mean: cfg.pretrain.fake_query_mean,
    };
    let instances = build_instances(&products, &vocabs, &icfg, cfg.seed)?;
    let mut t = match &cfg.paths.resume {
        Some(p) => {
            let (model, state) = load_checkpoint(data::existing(p, "paths.resume")?)?;
            if model.arch.cfg != mc {
                return Err(invalid(format!("paths.resume {} was saved with a different model config", p.display())));
            }
            Pretrainer::resume(model, state, &instances, cfg.train.clone(), cfg.contrastive)?
        }
        None => Pretrainer::new(data::fresh_model(cfg, &vocabs)?, &instances, cfg.train.clone(), cfg.contrastive)?,
    };
    let start = t.state.global_step;
    let first_epoch = start as usize / t.steps_per_epoch();
    let target = cfg.run.max_steps.unwrap_or(u64::MAX).min(t.total_steps());
    ctx.progress(format!(
        "{} instances, {} steps per epoch, steps {start}..{target}",
        instances.len(),
        t.steps_per_epoch()
    ));
    while t.state.global_step < target {
        let before = t.epoch_losses.len();
        t.step()?;
        if t.epoch_losses.len() > before {
            ctx.progress(format!(
                "epoch {} loss {:.4}",
                first_epoch + before + 1,
                t.epoch_losses[before]
            ));
        }
    }
    save_checkpoint(&ctx.path(CHECKPOINT), &t.model, &t.state)?;
    ctx.write_lines(TRAIN_LOG, &t.log)?;
    let mut m = Metrics::default();
    m.put("instances", instances.len());
    m.put("steps_per_epoch", t.steps_per_epoch());
    m.put("total_steps", t.total_steps());
    m.put("global_step", t.state.global_step);
    for (i, l) in t.epoch_losses.iter().enumerate() {
        m.put(format!("epoch_{}.loss", first_epoch + i + 1), *l);
    }
    m.save(ctx)
}

/// Train/eval sets with their features.
struct Split {
    train: Vec<Example>,
    train_x: Vec<FeatureInput>,
    train_y: Vec<usize>,
    eval: Option<(Vec<Example>, Vec<FeatureInput>, Vec<usize>)>,
}

fn finetune(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let mc = data::model_config(cfg, &vocabs)?;
    let train = data::augmented(cfg, data::labeled(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?);
    let eval = match &cfg.data.eval_examples {
        Some(p) => {
            let ex = data::labeled(data::existing(p, "data.eval_examples")?)?;
            let x = data::features(&ex, &vocabs, &mc);
            let y = data::targets(&ex, cfg.task);
            Some((ex, x, y))
        }
        None => None,
    };
    let split = Split {
        train_x: data::features(&train, &vocabs, &mc),
        train_y: data::targets(&train, cfg.task),
        train,
        eval,
    };
    let train_set = LabeledSet {
        inputs: &split.train_x,
        targets: &split.train_y,
    };
    let eval_set = split.eval.as_ref().map(|(_, x, y)| LabeledSet { inputs: x, targets: y });
    let mut t = match &cfg.paths.resume {
        Some(p) => {
            let (model, state) = load_checkpoint(data::existing(p, "paths.resume")?)?;
            if model.arch.cfg != mc {
                return Err(invalid(format!("paths.resume {} was saved with a different model config", p.display())));
            }
            Finetuner::resume(model, state, cfg.task, train_set, eval_set, cfg.train.clone())?
        }
        None => Finetuner::new(data::initial_model(cfg, &vocabs)?, cfg.task, train_set, eval_set, cfg.train.clone())?,
    };
    let target = cfg.run.max_steps.unwrap_or(u64::MAX).min(t.total_steps());
    ctx.progress(format!(
        "{} training examples, steps {}..{target}",
        split.train.len(),
        t.state.global_step
    ));
    while t.state.global_step < target {
        let before = t.epochs.len();
        t.step()?;
        if let Some(e) = t.epochs.get(before) {
            ctx.progress(match e.eval_micro_f1 {
                Some(f) => format!("epoch {} loss {:.4} eval micro-F1 {f:.4}", e.epoch + 1, e.train_loss),
                None => format!("epoch {} loss {:.4}", e.epoch + 1, e.train_loss),
            });
        }
    }
    save_checkpoint(&ctx.path(CHECKPOINT), &t.model, &t.state)?;
    ctx.write_lines(TRAIN_LOG, &t.log)?;
    let mut m = Metrics::default();
    m.put("train_examples", split.train.len());
    m.put("total_steps", t.total_steps());
    m.put("global_step", t.state.global_step);
    for e in &t.epochs {
        m.put(format!("epoch_{}.train_loss", e.epoch + 1), e.train_loss);
        if let Some(f) = e.eval_micro_f1 {
            m.put(format!("epoch_{}.eval_micro_f1", e.epoch + 1), f);
        }
    }
    if let Some(set) = eval_set {
        if t.is_done() {
            m.put("eval_micro_f1", t.evaluate(set)?);
        }
    }
    m.save(ctx)
}

/// Label name a prediction file uses for class `c` of `task`.
pub fn class_name(task: Task, c: usize) -> &'static str {
    match task {
        Task::Task3 if c == 1 => "substitute",
        Task::Task3 => "non-substitute",
        _ => EsciLabel::from_index(c).map_or("?", EsciLabel::as_str),
    }
}

fn class_of(task: Task, name: &str) -> Option<usize> {
    match task {
        Task::Task3 => match name {
            "substitute" => Some(1),
            "non-substitute" => Some(0),
            _ => None,
        },
        _ => name.parse::<EsciLabel>().ok().map(EsciLabel::index),
    }
}

fn finetune_and_predict(
    base: &Model,
    task: Task,
    train: LabeledSet,
    held: &[FeatureInput],
    tc: &TrainConfig,
    batch: usize,
) -> esci_core::Result<Vec<Vec<f64>>> {
    let mut f = Finetuner::new(base.clone(), task, train, None, tc.clone())?;
    f.run()?;
    predict_probs(&f.eval_model(), held, task.head(), batch)
}

fn subset<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn clean(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let mc = data::model_config(cfg, &vocabs)?;
    let examples = data::labeled(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?;
    let x = data::features(&examples, &vocabs, &mc);
    let y = data::targets(&examples, cfg.task);
    let base = data::initial_model(cfg, &vocabs)?;
    let mut fold = 0;
    let probs = oof_probs(&y, cfg.task.classes(), cfg.clean.folds, cfg.seed, |train, held| {
        fold += 1;
        ctx.progress(format!("fold {fold}/{}: {} train, {} held out", cfg.clean.folds, train.len(), held.len()));
        let (tx, ty) = (subset(&x, train), subset(&y, train));
        let set = LabeledSet {
            inputs: &tx,
            targets: &ty,
        };
        finetune_and_predict(&base, cfg.task, set, &subset(&x, held), &cfg.train, cfg.run.eval_batch_size)
    })?;
    let est = estimate_noise(&probs, &y, cfg.clean.fraction)?;
    ctx.write_lines(
        REMOVED,
        est.removed.iter().map(|c| {
            json!({
                "example_id": examples[c.index].example_id,
                "given": class_name(cfg.task, c.given),
                "argmax": class_name(cfg.task, c.argmax),
                "margin": c.margin,
            })
        }),
    )?;
    write_examples(&ctx.path(CLEANED), &apply_mask(&examples, &est.keep))?;
    let mut m = Metrics::default();
    m.put("examples", examples.len());
    m.put("candidates", est.candidates.len());
    m.put("removed", est.removed.len());
    m.put("joint.total", est.joint.total());
    m.put("joint.off_diagonal", est.joint.off_diagonal());
    for (j, t) in est.thresholds.iter().enumerate() {
        m.put(format!("threshold.{}", class_name(cfg.task, j)), *t);
    }
    m.save(ctx)
}

fn gain_of(label: EsciLabel) -> f64 {
    ESCI_GAINS[label.index()]
}

fn predict(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let examples = data::examples(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?;
    let ckpt = data::required(&cfg.paths.checkpoint, "paths.checkpoint", ctx.command)?;
    let model = data::eval_model(ckpt, "paths.checkpoint", &vocabs)?;
    let x = data::features(&examples, &vocabs, &model.arch.cfg);
    let probs = predict_probs(&model, &x, cfg.task.head(), cfg.run.eval_batch_size)?;
    let mut m = Metrics::default();
    m.put("examples", examples.len());
    if cfg.task == Task::Task1 {
        let scores = probs.iter().map(|p| rank_score(p)).collect::<esci_core::Result<Vec<_>>>()?;
        ctx.write_lines(
            PREDICTIONS,
            examples.iter().zip(&scores).map(|(e, s)| {
                json!({
                    "example_id": e.example_id,
                    "query_id": e.query_id,
                    "product_id": e.product.product_id,
                    "score": s,
                })
            }),
        )?;
    } else {
        ctx.write_lines(
            PREDICTIONS,
            examples.iter().zip(&probs).map(|(e, p)| {
                json!({
                    "example_id": e.example_id,
                    "label": class_name(cfg.task, argmax(p)),
                    "probs": p,
                })
            }),
        )?;
        if examples.iter().all(|e| e.esci_label.is_some()) {
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            m.put("micro_f1", micro_f1(&pred, &data::targets(&examples, cfg.task))?);
        }
    }
    m.save(ctx)
}

fn rank(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let examples = data::examples(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?;
    let members: Vec<PathBuf> = match (&cfg.paths.checkpoints, &cfg.paths.checkpoint) {
        (list, _) if !list.is_empty() => list.clone(),
        (_, Some(one)) => vec![one.clone()],
        _ => return Err(invalid("`rank` needs config key `paths.checkpoints` or `paths.checkpoint`")),
    };
    let mut lists = Vec::with_capacity(members.len());
    for (i, p) in members.iter().enumerate() {
        let model = data::eval_model(p, &format!("paths.checkpoints[{i}]"), &vocabs)?;
        let x = data::features(&examples, &vocabs, &model.arch.cfg);
        let probs = predict_probs(&model, &x, HeadKind::Esci4, cfg.run.eval_batch_size)?;
        lists.push(probs.iter().map(|p| rank_score(p)).collect::<esci_core::Result<Vec<_>>>()?);
        ctx.progress(format!("scored with {}", p.display()));
    }
    let scores = ensemble_mean(&lists)?;
    let ranked = rank_by_query(examples.iter().zip(&scores).map(|(e, &s)| {
        (
            e.query_id.clone(),
            RankedItem {
                product_id: e.product.product_id.clone(),
                score: s,
                gain: e.esci_label.map(gain_of),
            },
        )
    }))?;
    let mut rows = Vec::with_capacity(examples.len());
    for list in &ranked {
        for (r, item) in list.items.iter().enumerate() {
            rows.push(json!({
                "query_id": list.query_id,
                "product_id": item.product_id,
                "rank": r + 1,
                "score": item.score,
            }));
        }
    }
    ctx.write_lines(RANKING, rows)?;
    let mut m = Metrics::default();
    m.put("members", members.len());
    m.put("queries", ranked.len());
    if examples.iter().all(|e| e.esci_label.is_some()) {
        m.put("ndcg", mean_ndcg(&ranked));
    }
    m.save(ctx)
}

fn evaluate(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let gold = data::labeled(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?;
    let pred_path = data::required(&cfg.data.predictions, "data.predictions", ctx.command)?;
    let text = fs::read_to_string(pred_path).invalid()?;
    let rows: Vec<Value> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| invalid(format!("{}:{}: {e}", pred_path.display(), i + 1)))
        })
        .collect::<Outcome<_>>()?;
    if rows.is_empty() {
        return Err(invalid(format!("{} holds no predictions", pred_path.display())));
    }
    let bad = |i: usize, what: &str| invalid(format!("{}:{}: {what}", pred_path.display(), i + 1));
    let mut m = Metrics::default();
    m.put("predictions", rows.len());
    if rows[0].get("score").is_some() {
        let by_pair: HashMap<(&str, &str), EsciLabel> = gold
            .iter()
            .map(|e| ((e.query_id.as_str(), e.product.product_id.as_str()), e.esci_label.expect("checked")))
            .collect();
        let mut items = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let q = r["query_id"].as_str().ok_or_else(|| bad(i, "missing query_id"))?;
            let p = r["product_id"].as_str().ok_or_else(|| bad(i, "missing product_id"))?;
            let s = r["score"].as_f64().ok_or_else(|| bad(i, "score is not a number"))?;
            let label = by_pair
                .get(&(q, p))
                .ok_or_else(|| bad(i, &format!("no gold label for query {q}, product {p}")))?;
            items.push((
                q.to_string(),
                RankedItem {
                    product_id: p.to_string(),
                    score: s,
                    gain: Some(gain_of(*label)),
                },
            ));
        }
        let ranked = rank_by_query(items)?;
        m.put("queries", ranked.len());
        m.put("ndcg", mean_ndcg(&ranked));
    } else {
        let by_id: HashMap<&str, usize> = gold
            .iter()
            .map(|e| (e.example_id.as_str(), cfg.task.target(e.esci_label.expect("checked"))))
            .collect();
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (i, r) in rows.iter().enumerate() {
            let id = r["example_id"].as_str().ok_or_else(|| bad(i, "missing example_id"))?;
            let name = r["label"].as_str().ok_or_else(|| bad(i, "missing label"))?;
            let c = class_of(cfg.task, name)
                .ok_or_else(|| bad(i, &format!("label {name:?} is not a {} class", cfg.task.as_str())))?;
            let g = by_id.get(id).ok_or_else(|| bad(i, &format!("no gold label for example {id}")))?;
            pred.push(c);
            truth.push(*g);
        }
        m.put("micro_f1", micro_f1(&pred, &truth)?);
    }
    m.save(ctx)
}

/// Rows of the accumulating pre-training table.
pub const PRETRAIN_ROWS: [(&str, &[TaskTag]); 4] = [
    ("mlm", &[TaskTag::Mlm]),
    ("+p2q", &[TaskTag::Mlm, TaskTag::P2q]),
    ("++p2brand", &[TaskTag::Mlm, TaskTag::P2q, TaskTag::P2brand, TaskTag::P2color]),
    (
        "+++contrast",
        &[TaskTag::Mlm, TaskTag::P2q, TaskTag::P2brand, TaskTag::P2color, TaskTag::Contrast],
    ),
];

/// Rows of the accumulating strategy table.
pub const STRATEGY_ROWS: [(&str, Toggles); 4] = [
    (
        "+ema",
        Toggles {
            ema: true,
            fgm: false,
            rdrop: false,
            mixup: false,
        },
    ),
    (
        "++fgm",
        Toggles {
            ema: true,
            fgm: true,
            rdrop: false,
            mixup: false,
        },
    ),
    (
        "+++rdrop",
        Toggles {
            ema: true,
            fgm: true,
            rdrop: true,
            mixup: false,
        },
    ),
    (
        "++++mixup",
        Toggles {
            ema: true,
            fgm: true,
            rdrop: true,
            mixup: true,
        },
    ),
];

fn ablate(ctx: &Ctx) -> Outcome<()> {
    let cfg = ctx.cfg;
    let vocabs = data::vocabs(cfg, ctx.command)?;
    let mc = data::model_config(cfg, &vocabs)?;
    let examples = data::labeled(data::required(&cfg.data.examples, "data.examples", ctx.command)?)?;
    let x = data::features(&examples, &vocabs, &mc);
    let y = data::targets(&examples, cfg.task);
    let folds = kfold_split(examples.len(), cfg.eval.folds, &y, cfg.seed)?;
    let held = &folds.folds[cfg.eval.fold];
    let train: Vec<usize> = (0..examples.len()).filter(|i| held.binary_search(i).is_err()).collect();
    let (tx, ty) = (subset(&x, &train), subset(&y, &train));
    let (hx, hy) = (subset(&x, held), subset(&y, held));
    let score = |base: &Model, tc: &TrainConfig| -> Outcome<f64> {
        let set = LabeledSet {
            inputs: &tx,
            targets: &ty,
        };
        let probs = finetune_and_predict(base, cfg.task, set, &hx, tc, cfg.run.eval_batch_size)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        Ok(micro_f1(&pred, &hy)?)
    };
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut m = Metrics::default();
    match cfg.ablate.table {
        AblationTable::Strategies => {
            let base = data::initial_model(cfg, &vocabs)?;
            for (label, toggles) in STRATEGY_ROWS {
                let tc = TrainConfig {
                    toggles,
                    ..cfg.train.clone()
                };
                let f1 = score(&base, &tc)?;
                ctx.progress(format!("{label}: micro-F1 {f1:.4}"));
                rows.push((label.to_string(), f1));
            }
        }
        AblationTable::Pretrain => {
            let products = data::catalogue(cfg, ctx.command)?;
            for (label, tags) in PRETRAIN_ROWS {
                let icfg = InstanceConfig {
                    tasks: TaskSet::only(tags),
                    mlm_rate: cfg.pretrain.mlm_rate,
                    max_len: mc.encoder.max_len,
                    fake_query_mean: cfg.pretrain.fake_query_mean,
                };
                let instances = build_instances(&products, &vocabs, &icfg, cfg.seed)?;
                let mut t = Pretrainer::new(data::fresh_model(cfg, &vocabs)?, &instances, cfg.train.clone(), cfg.contrastive)?;
                t.run()?;
                if let Some(l) = t.epoch_losses.last() {
                    m.put(format!("{label}.pretrain_loss"), *l);
                }
                let f1 = score(&t.model, &cfg.train)?;
                ctx.progress(format!("{label}: micro-F1 {f1:.4}"));
                rows.push((label.to_string(), f1));
            }
        }
    }
    let (csv, json) = emit_ablation(&rows);
    ctx.write(ABLATION_CSV, &csv)?;
    ctx.write(ABLATION_JSON, &json)?;
    m.put("held_out", held.len());
    for (label, f1) in &rows {
        m.put(format!("{label}.micro_f1"), *f1);
    }
    m.save(ctx)
}

/// Reads a metrics file written by any command.
pub fn read_metrics(dir: &Path) -> anyhow::Result<BTreeMap<String, Value>> {
    let text = fs::read_to_string(dir.join(METRICS))?;
    Ok(serde_json::from_str(&text)?)
}
