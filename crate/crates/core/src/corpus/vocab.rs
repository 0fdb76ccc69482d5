use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tokenize::{normalize, split_words};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

/// Token vocabulary. Ids 0..5 are the fixed specials.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary id {i} must be {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect())
            .expect("specials are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

fn ranked(counts: HashMap<String, usize>, min_count: usize) -> Vec<String> {
    let mut entries: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.into_iter().map(|(t, _)| t).collect()
}

/// Builds a vocabulary from raw texts.
///
/// Words are counted after normalization. Each multi-character word also
/// counts its characters, so the tokenizer's character fallback has units
/// to land on. Tokens are ordered by descending count, ties lexicographic.
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_count: usize,
    max_size: usize,
) -> Vocabulary {
    assert!(min_count >= 1 && max_size >= SPECIALS.len());
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for word in split_words(text) {
            if word.chars().count() > 1 {
                for c in word.chars() {
                    *counts.entry(c.to_string()).or_default() += 1;
                }
            }
            *counts.entry(word).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked(counts, min_count)
            .into_iter()
            .take(max_size - SPECIALS.len()),
    );
    Vocabulary::from_tokens(tokens).expect("counted tokens are unique")
}

/// Value vocabulary for brand or color strings. Id 0 is the OOV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueVocab {
    values: Vec<String>,
    index: HashMap<String, usize>,
}

pub const OOV: usize = 0;
const OOV_TOKEN: &str = "[OOV]";

impl ValueVocab {
    pub fn build<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for v in values {
            let key = normalize(v.trim());
            if !key.is_empty() {
                *counts.entry(key).or_default() += 1;
            }
        }
        let mut values = vec![OOV_TOKEN.to_string()];
        values.extend(ranked(counts, 1));
        Self::from_values(values).expect("counted values are unique")
    }

    fn from_values(values: Vec<String>) -> Result<Self> {
        if values.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::Data("value vocabulary must start with [OOV]".into()));
        }
        let mut index = HashMap::new();
        for (i, v) in values.iter().enumerate() {
            if index.insert(v.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate value {v:?}")));
            }
        }
        Ok(Self { values, index })
    }

    /// Row for `value`; unknown or empty values map to [`OOV`].
    pub fn id(&self, value: &str) -> usize {
        self.index
            .get(&normalize(value.trim()))
            .copied()
            .unwrap_or(OOV)
    }

    /// Number of rows including OOV.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.values.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_values(text.lines().map(str::to_owned).collect())
    }
}

/// Token vocabulary plus brand and color value vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub tokens: Vocabulary,
    pub brands: ValueVocab,
    pub colors: ValueVocab,
}

impl Vocabs {
    pub const TOKENS_FILE: &'static str = "vocab.txt";
    pub const BRANDS_FILE: &'static str = "brands.txt";
    pub const COLORS_FILE: &'static str = "colors.txt";

    pub fn from_products(
        products: &[super::ProductRecord],
        extra_texts: &[&str],
        min_count: usize,
        max_size: usize,
    ) -> Self {
        let texts: Vec<String> = products.iter().map(|p| p.full_text()).collect();
        let tokens = build_vocab(
            texts
                .iter()
                .map(String::as_str)
                .chain(extra_texts.iter().copied()),
            min_count,
            max_size,
        );
        Self {
            tokens,
            brands: ValueVocab::build(products.iter().map(|p| p.brand.as_str())),
            colors: ValueVocab::build(products.iter().map(|p| p.color.as_str())),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.tokens.save(&dir.join(Self::TOKENS_FILE))?;
        self.brands.save(&dir.join(Self::BRANDS_FILE))?;
        self.colors.save(&dir.join(Self::COLORS_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            tokens: Vocabulary::load(&dir.join(Self::TOKENS_FILE))?,
            brands: ValueVocab::load(&dir.join(Self::BRANDS_FILE))?,
            colors: ValueVocab::load(&dir.join(Self::COLORS_FILE))?,
        })
    }
}
