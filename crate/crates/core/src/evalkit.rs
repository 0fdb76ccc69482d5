//! Ranking and classification metrics, ensembling, stratified k-fold splits
//! and ablation tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// nDCG with the `log₂(r + 1)` discount over the first `k` positions
/// (whole list when `None`). Lists without positive gain score 0.
pub fn ndcg(gains: &[f64], k: Option<usize>) -> f64 {
    let k = k.unwrap_or(gains.len()).min(gains.len());
    let dcg = |g: &[f64]| -> f64 {
        g.iter()
            .take(k)
            .enumerate()
            .map(|(i, &v)| v / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg <= 0.0 {
        return 0.0;
    }
    dcg(gains) / idcg
}

/// Micro-averaged F1 over single-label predictions.
pub fn micro_f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("micro-F1 of an empty set".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp += 1;
        } else {
            fp += 1;
            fne += 1;
        }
    }
    Ok(tp as f64 / (tp as f64 + 0.5 * (fp + fne) as f64))
}

/// Elementwise mean of `M` equally long score lists.
pub fn ensemble_mean(lists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = lists
        .first()
        .ok_or_else(|| Error::Data("ensemble of zero models".into()))?;
    if let Some(bad) = lists.iter().find(|l| l.len() != first.len()) {
        return Err(Error::shape(format!(
            "ragged ensemble: lists of length {} and {}",
            first.len(),
            bad.len()
        )));
    }
    let m = lists.len() as f64;
    Ok((0..first.len())
        .map(|i| lists.iter().map(|l| l[i]).sum::<f64>() / m)
        .collect())
}

/// One ranked entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub product_id: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gain: Option<f64>,
}

/// Products of one query in descending score order, ties by product id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, mut items: Vec<RankedItem>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
            return Err(Error::Data(format!("non-finite score for {}", bad.product_id)));
        }
        items.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.product_id.cmp(&b.product_id))
        });
        Ok(Self {
            query_id: query_id.into(),
            items,
        })
    }

    /// nDCG of this ordering; items without a gold gain count as 0.
    pub fn ndcg(&self, k: Option<usize>) -> f64 {
        let gains: Vec<f64> = self.items.iter().map(|i| i.gain.unwrap_or(0.0)).collect();
        ndcg(&gains, k)
    }
}

/// Groups `(query id, item)` pairs into ranked lists ordered by query id.
pub fn rank_by_query(rows: impl IntoIterator<Item = (String, RankedItem)>) -> Result<Vec<RankedList>> {
    let mut by_query: BTreeMap<String, Vec<RankedItem>> = BTreeMap::new();
    for (q, item) in rows {
        by_query.entry(q).or_default().push(item);
    }
    by_query
        .into_iter()
        .map(|(q, items)| RankedList::new(q, items))
        .collect()
}

/// Mean nDCG over lists; 0 for no lists.
pub fn mean_ndcg(lists: &[RankedList]) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    lists.iter().map(|l| l.ndcg(None)).sum::<f64>() / lists.len() as f64
}

/// Folds of a stratified split and the labels that were too small to
/// stratify.
#[derive(Clone, Debug, PartialEq)]
pub struct Folds {
    pub folds: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Stratified `k`-fold split of `0..n`.
///
/// Each class is shuffled and dealt round-robin, continuing from the fold
/// where the previous class stopped, so fold sizes differ by at most one.
/// Classes with fewer than `k` members are pooled and dealt the same way
/// after the others, with a warning.
pub fn kfold_split(n: usize, k: usize, labels: &[usize], seed: u64) -> Result<Folds> {
    if k < 2 || k > n {
        return Err(Error::Config(format!("k-fold needs 2 <= k <= n, got k={k}, n={n}")));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} items", labels.len())));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut r = rng::stream(seed, &[0xF01D]);
    let mut warnings = Vec::new();
    let mut small = Vec::new();
    let mut order = Vec::with_capacity(n);
    for (class, mut idx) in by_class {
        if idx.len() < k {
            warnings.push(format!(
                "class {class} has {} members, fewer than {k} folds; not stratified",
                idx.len()
            ));
            small.extend(idx);
            continue;
        }
        idx.shuffle(&mut r);
        order.extend(idx);
    }
    small.shuffle(&mut r);
    order.extend(small);
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(Folds { folds, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub metric: f64,
    /// Difference to the previous row; 0 on the first row.
    pub delta: f64,
}

pub const ABLATION_HEADER: &str = "config,metric,delta";

/// Adds the delta column to accumulated `(label, metric)` rows.
pub fn ablation_rows(rows: &[(String, f64)]) -> Vec<AblationRow> {
    let mut prev = None;
    rows.iter()
        .map(|(config, metric)| {
            let delta = prev.map_or(0.0, |p| metric - p);
            prev = Some(*metric);
            AblationRow {
                config: config.clone(),
                metric: *metric,
                delta,
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV text and JSON array for an ablation table.
pub fn emit_ablation(rows: &[(String, f64)]) -> (String, String) {
    let table = ablation_rows(rows);
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    for r in &table {
        // `{}` on f64 prints the shortest string that parses back exactly.
        let _ = writeln!(csv, "{},{},{}", csv_field(&r.config), r.metric, r.delta);
    }
    let json = serde_json::to_string_pretty(&table).expect("rows are plain data");
    (csv, json)
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// Parses text produced by [`emit_ablation`].
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(Error::Data(format!("ablation CSV must start with `{ABLATION_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f = split_csv_line(line);
            let num = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: "<ablation csv>".into(),
                    line: i + 2,
                    message: e.to_string(),
                })
            };
            if f.len() != 3 {
                return Err(Error::Parse {
                    path: "<ablation csv>".into(),
                    line: i + 2,
                    message: format!("expected 3 fields, got {}", f.len()),
                });
            }
            Ok(AblationRow {
                config: f[0].clone(),
                metric: num(&f[1])?,
                delta: num(&f[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[0.3], None), 1.0);
        assert_eq!(ndcg(&[1.0, 0.1, 0.01, 0.0], None), 1.0);
        assert_eq!(ndcg(&[0.0, 0.0], None), 0.0);
        let l3 = 3f64.log2();
        let expect = (0.1 + 1.0 / l3) / (1.0 + 0.1 / l3);
        assert!((ndcg(&[0.1, 1.0], None) - expect).abs() < 1e-15);
        assert!((ndcg(&[0.1, 1.0], None) - 0.6875).abs() < 1e-4);
    }

    #[test]
    fn ndcg_cutoff() {
        assert_eq!(ndcg(&[0.0, 1.0], Some(1)), 0.0);
        assert_eq!(ndcg(&[1.0, 0.0], Some(1)), 1.0);
    }

    #[test]
    fn micro_f1_examples() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(micro_f1(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(micro_f1(&[], &[]).is_err());
        assert!(micro_f1(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_mean(&[vec![0.2]]).unwrap(), vec![0.2]);
        let m = ensemble_mean(&[vec![0.2], vec![0.4]]).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15);
        assert!(ensemble_mean(&[vec![0.2], vec![0.4, 1.0]]).is_err());
        assert!(ensemble_mean(&[]).is_err());
    }

    #[test]
    fn ranked_list_ties_by_product_id() {
        let it = |p: &str, s| RankedItem {
            product_id: p.into(),
            score: s,
            gain: None,
        };
        let l = RankedList::new("q", vec![it("b", 0.5), it("a", 0.5), it("c", 0.9)]).unwrap();
        let ids: Vec<_> = l.items.iter().map(|i| i.product_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert!(RankedList::new("q", vec![it("a", f64::NAN)]).is_err());
    }

    #[test]
    fn kfold_small_example() {
        let f = kfold_split(4, 2, &[0, 0, 1, 1], 3).unwrap();
        assert_eq!(f.folds.len(), 2);
        assert!(f.folds.iter().all(|x| x.len() == 2));
        let mut all: Vec<usize> = f.folds.concat();
        all.sort_unstable();
        assert_eq!(all, [0, 1, 2, 3]);
        // Stratified: each fold holds one of each class.
        for fold in &f.folds {
            assert_eq!(fold.iter().filter(|&&i| i < 2).count(), 1);
        }
        assert!(f.warnings.is_empty());
    }

    #[test]
    fn kfold_warns_on_small_class() {
        let f = kfold_split(5, 3, &[0, 0, 0, 0, 1], 0).unwrap();
        assert_eq!(f.warnings.len(), 1);
        assert!(kfold_split(3, 4, &[0, 0, 0], 0).is_err());
        assert!(kfold_split(3, 1, &[0, 0, 0], 0).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 2usize..60, kk in 2usize..8, seed in 0u64..50, classes in 1usize..4) {
            let k = kk.min(n);
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
            let f = kfold_split(n, k, &labels, seed).unwrap();
            let mut all = f.folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = f.folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert_eq!(f.clone(), kfold_split(n, k, &labels, seed).unwrap());
        }

        #[test]
        fn adjacent_swap_raises_ndcg(gains in prop::collection::vec(0.0f64..1.0, 2..8), at in 0usize..7) {
            let i = at % (gains.len() - 1);
            prop_assume!(gains[i] < gains[i + 1]);
            let mut swapped = gains.clone();
            swapped.swap(i, i + 1);
            prop_assert!(ndcg(&swapped, None) > ndcg(&gains, None));
        }

        #[test]
        fn ndcg_in_unit_interval(gains in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let v = ndcg(&gains, None);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn ablation_table() {
        let (csv, json) = emit_ablation(&[]);
        assert_eq!(csv, "config,metric,delta\n");
        assert_eq!(json, "[]");
        let rows = vec![("a".to_string(), 0.75), ("b, with comma".to_string(), 0.76)];
        let (csv, _) = emit_ablation(&rows);
        let back = parse_ablation_csv(&csv).unwrap();
        assert_eq!(back, ablation_rows(&rows));
        assert!((back[1].delta - 0.01).abs() < 1e-12);
        assert_eq!(back[0].delta, 0.0);
    }
}
