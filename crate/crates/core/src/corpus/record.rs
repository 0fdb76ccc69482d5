use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Locale {
    Us,
    Es,
    Jp,
}

impl Locale {
    pub const ALL: [Locale; 3] = [Locale::Us, Locale::Es, Locale::Jp];

    pub fn as_str(self) -> &'static str {
        match self {
            Locale::Us => "us",
            Locale::Es => "es",
            Locale::Jp => "jp",
        }
    }

    /// Mean fake-query length in tokens for this locale's catalogue text.
    pub fn fake_query_mean(self) -> f64 {
        match self {
            Locale::Us | Locale::Es => 4.0,
            Locale::Jp => 8.0,
        }
    }

    /// Row in the country embedding table; row 0 is reserved for unknown.
    pub fn country_id(self) -> usize {
        match self {
            Locale::Us => 1,
            Locale::Es => 2,
            Locale::Jp => 3,
        }
    }
}

impl FromStr for Locale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "us" => Ok(Locale::Us),
            "es" => Ok(Locale::Es),
            "jp" => Ok(Locale::Jp),
            other => Err(format!("unknown locale {other:?}")),
        }
    }
}

impl fmt::Display for Locale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four-way relevance of a product to a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EsciLabel {
    Exact,
    Substitute,
    Complement,
    Irrelevant,
}

impl EsciLabel {
    pub const ALL: [EsciLabel; 4] = [
        EsciLabel::Exact,
        EsciLabel::Substitute,
        EsciLabel::Complement,
        EsciLabel::Irrelevant,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EsciLabel::Exact => "Exact",
            EsciLabel::Substitute => "Substitute",
            EsciLabel::Complement => "Complement",
            EsciLabel::Irrelevant => "Irrelevant",
        }
    }

    pub fn is_substitute(self) -> bool {
        self == EsciLabel::Substitute
    }
}

impl FromStr for EsciLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Exact" | "E" => Ok(EsciLabel::Exact),
            "Substitute" | "S" => Ok(EsciLabel::Substitute),
            "Complement" | "C" => Ok(EsciLabel::Complement),
            "Irrelevant" | "I" => Ok(EsciLabel::Irrelevant),
            other => Err(format!("unknown esci_label {other:?}")),
        }
    }
}

impl fmt::Display for EsciLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Catalogue entry: product text and metadata without a query.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductRecord {
    pub product_id: String,
    pub title: String,
    pub description: String,
    pub bullet_points: Vec<String>,
    pub brand: String,
    pub color: String,
    pub locale: Locale,
}

impl ProductRecord {
    pub fn has_text(&self) -> bool {
        !self.title.trim().is_empty()
            || !self.description.trim().is_empty()
            || self.bullet_points.iter().any(|b| !b.trim().is_empty())
    }

    /// Title, bullets and description joined into one text.
    pub fn full_text(&self) -> String {
        let mut parts = vec![self.title.as_str()];
        parts.extend(self.bullet_points.iter().map(String::as_str));
        parts.push(self.description.as_str());
        parts
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One query/product pair, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub example_id: String,
    pub query_id: String,
    pub query: String,
    pub product: ProductRecord,
    pub esci_label: Option<EsciLabel>,
}

/// Wire format: one JSON object per line, field names follow the ESCI columns.
#[derive(Debug, Default, Serialize, Deserialize)]
struct WireRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    example_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default)]
    product_id: Option<String>,
    #[serde(default)]
    product_title: Option<String>,
    #[serde(default)]
    product_description: Option<String>,
    #[serde(default)]
    product_bullet_point: Option<String>,
    #[serde(default)]
    product_brand: Option<String>,
    #[serde(default)]
    product_color_name: Option<String>,
    #[serde(default)]
    product_locale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    esci_label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Labeled,
    Catalogue,
}

/// Parsed contents of a data file.
#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Examples(Vec<Example>),
    Products(Vec<ProductRecord>),
}

fn required(field: Option<String>, name: &str) -> std::result::Result<String, String> {
    match field {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(format!("missing required field {name:?}")),
    }
}

fn split_bullets(s: Option<String>) -> Vec<String> {
    s.unwrap_or_default()
        .split('\n')
        .filter(|b| !b.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

impl WireRecord {
    fn into_product(self) -> std::result::Result<(ProductRecord, WireRest), String> {
        let locale = required(self.product_locale, "product_locale")?.parse::<Locale>()?;
        let product = ProductRecord {
            product_id: required(self.product_id, "product_id")?,
            title: self.product_title.unwrap_or_default(),
            description: self.product_description.unwrap_or_default(),
            bullet_points: split_bullets(self.product_bullet_point),
            brand: self.product_brand.unwrap_or_default(),
            color: self.product_color_name.unwrap_or_default(),
            locale,
        };
        let rest = WireRest {
            example_id: self.example_id,
            query_id: self.query_id,
            query: self.query,
            esci_label: self.esci_label,
        };
        Ok((product, rest))
    }

    fn from_product(p: &ProductRecord) -> Self {
        WireRecord {
            product_id: Some(p.product_id.clone()),
            product_title: Some(p.title.clone()),
            product_description: Some(p.description.clone()),
            product_bullet_point: Some(p.bullet_points.join("\n")),
            product_brand: Some(p.brand.clone()),
            product_color_name: Some(p.color.clone()),
            product_locale: Some(p.locale.as_str().to_owned()),
            ..Default::default()
        }
    }
}

struct WireRest {
    example_id: Option<String>,
    query_id: Option<String>,
    query: Option<String>,
    esci_label: Option<String>,
}

fn parse_line(line: &str, kind: RecordKind) -> std::result::Result<ParsedLine, String> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let (product, rest) = wire.into_product()?;
    match kind {
        RecordKind::Catalogue => {
            if !product.has_text() {
                return Err(format!("product {:?} has no text", product.product_id));
            }
            Ok(ParsedLine::Product(product))
        }
        RecordKind::Labeled => {
            let query = required(rest.query, "query")?;
            if query.trim().is_empty() {
                return Err("query is blank".into());
            }
            let esci_label = rest
                .esci_label
                .map(|l| l.parse::<EsciLabel>())
                .transpose()?;
            Ok(ParsedLine::Example(Example {
                example_id: required(rest.example_id, "example_id")?,
                query_id: rest.query_id.unwrap_or_else(|| query.clone()),
                query,
                product,
                esci_label,
            }))
        }
    }
}

enum ParsedLine {
    Example(Example),
    Product(ProductRecord),
}

/// Reads a JSON-lines data file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn load_records(path: &Path, kind: RecordKind) -> Result<Records> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut products = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, kind) {
            Ok(ParsedLine::Example(e)) => examples.push(e),
            Ok(ParsedLine::Product(p)) => products.push(p),
            Err(message) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message,
                })
            }
        }
    }
    Ok(match kind {
        RecordKind::Labeled => Records::Examples(examples),
        RecordKind::Catalogue => Records::Products(products),
    })
}

pub fn load_examples(path: &Path) -> Result<Vec<Example>> {
    match load_records(path, RecordKind::Labeled)? {
        Records::Examples(e) => Ok(e),
        Records::Products(_) => unreachable!(),
    }
}

pub fn load_products(path: &Path) -> Result<Vec<ProductRecord>> {
    match load_records(path, RecordKind::Catalogue)? {
        Records::Products(p) => Ok(p),
        Records::Examples(_) => unreachable!(),
    }
}

pub fn example_to_json(e: &Example) -> String {
    let mut wire = WireRecord::from_product(&e.product);
    wire.example_id = Some(e.example_id.clone());
    wire.query_id = Some(e.query_id.clone());
    wire.query = Some(e.query.clone());
    wire.esci_label = e.esci_label.map(|l| l.as_str().to_owned());
    serde_json::to_string(&wire).expect("plain strings serialize")
}

pub fn product_to_json(p: &ProductRecord) -> String {
    serde_json::to_string(&WireRecord::from_product(p)).expect("plain strings serialize")
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = Vec::new();
    for line in lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    write_lines(path, examples.iter().map(example_to_json))
}

pub fn write_products(path: &Path, products: &[ProductRecord]) -> Result<()> {
    write_lines(path, products.iter().map(product_to_json))
}

/// Distinct products referenced by `examples`, in first-seen order.
pub fn products_of(examples: &[Example]) -> Vec<ProductRecord> {
    let mut seen = std::collections::HashSet::new();
    examples
        .iter()
        .filter(|e| seen.insert(e.product.product_id.clone()))
        .map(|e| e.product.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_is_empty_list() {
        let f = write_tmp("");
        assert!(load_examples(f.path()).unwrap().is_empty());
        assert!(load_products(f.path()).unwrap().is_empty());
    }

    #[test]
    fn bad_label_names_line() {
        let good = r#"{"example_id":"1","query":"q","product_id":"p","product_title":"t","product_locale":"us","esci_label":"E"}"#;
        let bad = r#"{"example_id":"2","query":"q","product_id":"p","product_title":"t","product_locale":"us","esci_label":"X"}"#;
        let f = write_tmp(&format!("{good}\n{bad}\n"));
        match load_examples(f.path()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("esci_label"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_field() {
        let f = write_tmp(r#"{"example_id":"1","product_id":"p","product_locale":"us"}"#);
        let err = load_examples(f.path()).unwrap_err();
        assert!(err.to_string().contains("query"), "{err}");
        let f = write_tmp(r#"{"product_id":"p","product_title":"t"}"#);
        assert!(load_products(f.path()).is_err());
    }

    #[test]
    fn catalogue_requires_text() {
        let f = write_tmp(r#"{"product_id":"p","product_locale":"jp"}"#);
        assert!(load_products(f.path()).is_err());
    }

    #[test]
    fn optional_fields_default_empty() {
        let f = write_tmp(
            r#"{"example_id":"1","query":"red shoes","product_id":"p","product_title":"shoe","product_locale":"es"}"#,
        );
        let ex = &load_examples(f.path()).unwrap()[0];
        assert_eq!(ex.product.brand, "");
        assert!(ex.product.bullet_points.is_empty());
        assert_eq!(ex.esci_label, None);
        assert_eq!(ex.query_id, "red shoes");
        assert_eq!(ex.product.locale, Locale::Es);
    }

    fn text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 äöü日本]{0,12}"
    }

    fn example() -> impl Strategy<Value = Example> {
        (
            "[a-z0-9]{1,6}",
            "[a-z ]{1,10}",
            text(),
            prop::collection::vec("[a-z]{1,5}", 0..4),
            text(),
            0usize..3,
            prop::option::of(0usize..4),
        )
            .prop_map(|(id, q, title, bullets, brand, loc, label)| Example {
                example_id: id.clone(),
                query_id: format!("q{id}"),
                query: format!("x{q}"),
                product: ProductRecord {
                    product_id: format!("p{id}"),
                    title: title.clone(),
                    description: brand.clone(),
                    bullet_points: bullets,
                    brand,
                    color: title,
                    locale: Locale::ALL[loc],
                },
                esci_label: label.and_then(EsciLabel::from_index),
            })
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(examples in prop::collection::vec(example(), 0..6)) {
            let f = tempfile::NamedTempFile::new().unwrap();
            write_examples(f.path(), &examples).unwrap();
            prop_assert_eq!(load_examples(f.path()).unwrap(), examples);
        }
    }
}
