use std::fs;
use std::path::Path;

use crate::corpus::{normalize, tokenize_pair, Example, Vocabs};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Country table rows: OOV plus us, es, jp.
pub const NUM_COUNTRIES: usize = 4;

/// Expected-gain weights for Exact, Substitute, Complement, Irrelevant.
pub const ESCI_GAINS: [f64; 4] = [1.0, 0.1, 0.01, 0.0];

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn bucket(gram: &str, buckets: usize) -> usize {
    (fnv1a64(gram.as_bytes()) % buckets as u64) as usize
}

/// Bucket ids of the character 3-grams of `#text#` after normalization.
/// Empty text yields no grams.
pub fn ngram_ids(text: &str, buckets: usize) -> Vec<usize> {
    let norm = normalize(text);
    if norm.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = std::iter::once('#')
        .chain(norm.chars())
        .chain(std::iter::once('#'))
        .collect();
    chars
        .windows(3)
        .map(|w| bucket(&w.iter().collect::<String>(), buckets))
        .collect()
}

/// Mean of the table rows of the text's 3-gram buckets; zero for empty text.
pub fn ngram_pool(text: &str, table: &Tensor) -> Vec<f64> {
    let ids = ngram_ids(text, table.rows());
    let mut out = vec![0.0; table.cols()];
    if ids.is_empty() {
        return out;
    }
    for &id in &ids {
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Overwrites rows of `table` from a `token f1 f2 ...` text file. Tokens
/// are hashed like 3-grams; a later line wins a bucket collision.
pub fn load_ngram_vectors(path: &Path, table: &mut Tensor) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (rows, dim) = (table.rows(), table.cols());
    let mut loaded = 0;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "non-finite value".into(),
            });
        }
        table
            .row_mut(bucket(&normalize(token), rows))
            .copy_from_slice(&values);
        loaded += 1;
    }
    Ok(loaded)
}

/// Model inputs for one query/product pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureInput {
    pub tokens: Vec<u32>,
    pub query_grams: Vec<usize>,
    pub bullet_grams: Vec<usize>,
    pub desc_grams: Vec<usize>,
    pub country: usize,
    pub brand: usize,
    pub color: usize,
}

/// Tokenizes `[CLS] query [SEP] product text [SEP]` and hashes the three
/// n-gram fields. Bullets are pooled as one joined text.
pub fn featurize(ex: &Example, vocabs: &Vocabs, max_len: usize, buckets: usize) -> FeatureInput {
    let p = &ex.product;
    FeatureInput {
        tokens: tokenize_pair(&ex.query, &p.full_text(), &vocabs.tokens, max_len),
        query_grams: ngram_ids(&ex.query, buckets),
        bullet_grams: ngram_ids(&p.bullet_points.join(" "), buckets),
        desc_grams: ngram_ids(&p.description, buckets),
        country: p.locale.country_id(),
        brand: vocabs.brands.id(&p.brand),
        color: vocabs.colors.id(&p.color),
    }
}

/// Expected gain of an ESCI probability vector.
pub fn rank_score(p: &[f64]) -> Result<f64> {
    if p.len() != 4 {
        return Err(Error::shape(format!("rank_score needs 4 probabilities, got {}", p.len())));
    }
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("{p:?} is not a probability vector")));
    }
    Ok(p.iter().zip(ESCI_GAINS).map(|(a, g)| a * g).sum())
}
