//! Seeded synthetic corpora with planted, rule-based labels.
//!
//! Products are built from a small world of categories, brands and colors.
//! A query names a brand and a category, and its ESCI label against a
//! product follows [`planted_label`]:
//!
//! - same category and same brand: Exact
//! - same category, other brand: Substitute
//! - the category's complement partner (phone/charger, ...): Complement
//! - anything else: Irrelevant

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::record::{EsciLabel, Example, Locale, ProductRecord};
use super::tokenize::split_words;
use crate::rng;

pub const CATEGORIES: [&str; 12] = [
    "phone", "charger", "laptop", "mouse", "camera", "tripod", "shoes", "socks", "lamp", "bulb",
    "kettle", "pillow",
];
pub const BRANDS: [&str; 8] = [
    "acme", "zento", "kora", "vexa", "lumo", "brisk", "nordy", "oxlo",
];
pub const COLORS: [&str; 6] = ["black", "white", "red", "blue", "green", "silver"];
const ADJECTIVES: [&str; 8] = [
    "portable",
    "premium",
    "compact",
    "classic",
    "smart",
    "durable",
    "lightweight",
    "deluxe",
];
const USES: [&str; 6] = ["home", "travel", "office", "outdoor", "kids", "daily"];
const FEATURES: [&str; 8] = [
    "warranty", "quality", "design", "fast", "easy", "setup", "soft", "strong",
];

/// Complement partner of a category index, if any.
pub fn complement_of(category: usize) -> Option<usize> {
    match category {
        0..=9 => Some(category ^ 1),
        _ => None,
    }
}

fn find(words: &[String], vocab: &[&str]) -> Option<usize> {
    words.iter().find_map(|w| vocab.iter().position(|v| v == w))
}

/// Category and brand a product carries in its title.
pub fn product_intent(product: &ProductRecord) -> Option<(usize, usize)> {
    let words = split_words(&product.title);
    Some((find(&words, &CATEGORIES)?, find(&words, &BRANDS)?))
}

/// The rule that generated every synthetic label.
pub fn planted_label(query: &str, product: &ProductRecord) -> Option<EsciLabel> {
    let words = split_words(query);
    let (q_cat, q_brand) = (find(&words, &CATEGORIES)?, find(&words, &BRANDS)?);
    let (p_cat, p_brand) = product_intent(product)?;
    Some(if q_cat == p_cat {
        if q_brand == p_brand {
            EsciLabel::Exact
        } else {
            EsciLabel::Substitute
        }
    } else if complement_of(p_cat) == Some(q_cat) {
        EsciLabel::Complement
    } else {
        EsciLabel::Irrelevant
    })
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub products: usize,
    pub examples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub products: Vec<ProductRecord>,
    pub examples: Vec<Example>,
}

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn make_product(i: usize, rng: &mut impl Rng) -> ProductRecord {
    let cat = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
    let brand = pick(rng, &BRANDS);
    let color = pick(rng, &COLORS);
    let roll = rng.random::<f64>();
    let locale = if roll < 0.6 {
        Locale::Us
    } else if roll < 0.85 {
        Locale::Es
    } else {
        Locale::Jp
    };
    let title = format!("{brand} {color} {} {cat}", pick(rng, &ADJECTIVES));
    let bullets = vec![
        format!("{} {cat} for {}", pick(rng, &ADJECTIVES), pick(rng, &USES)),
        format!("{} {} {color}", pick(rng, &FEATURES), pick(rng, &FEATURES)),
    ];
    let mut description = format!(
        "this {cat} from {brand} is {} and {} for {} use",
        pick(rng, &ADJECTIVES),
        pick(rng, &FEATURES),
        pick(rng, &USES)
    );
    if locale == Locale::Jp {
        description.push_str(" 高品質 送料無料");
    }
    ProductRecord {
        product_id: format!("p{i:04}"),
        title,
        description,
        bullet_points: bullets,
        brand: brand.to_string(),
        color: color.to_string(),
        locale,
    }
}

fn make_query(brand: usize, cat: usize, rng: &mut impl Rng) -> String {
    let (b, c) = (BRANDS[brand], CATEGORIES[cat]);
    match rng.random_range(0..4) {
        0 => format!("{b} {c}"),
        1 => format!("{c} {b}"),
        2 => format!("{b} {} {c}", pick(rng, &ADJECTIVES)),
        _ => format!("{} {c} {b}", pick(rng, &COLORS)),
    }
}

/// Generates a catalogue and labeled examples with balanced ESCI classes.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.products >= 1, "need at least one product");
    let mut r = rng::stream(cfg.seed, &[0x5157]);
    let mut products: Vec<ProductRecord> =
        (0..cfg.products).map(|i| make_product(i, &mut r)).collect();
    // Guarantee at least one product with a complement partner.
    if !products
        .iter()
        .any(|p| product_intent(p).and_then(|(c, _)| complement_of(c)).is_some())
    {
        let p = &mut products[0];
        let (cat, _) = product_intent(p).expect("generated title");
        p.title = p.title.replace(CATEGORIES[cat], CATEGORIES[0]);
        p.description = p.description.replace(CATEGORIES[cat], CATEGORIES[0]);
        p.bullet_points[0] = p.bullet_points[0].replace(CATEGORIES[cat], CATEGORIES[0]);
    }
    let with_complement: Vec<usize> = (0..products.len())
        .filter(|&i| complement_of(product_intent(&products[i]).unwrap().0).is_some())
        .collect();

    let mut examples = Vec::with_capacity(cfg.examples);
    for i in 0..cfg.examples {
        let label = EsciLabel::ALL[i % 4];
        let pi = if label == EsciLabel::Complement {
            with_complement[r.random_range(0..with_complement.len())]
        } else {
            r.random_range(0..products.len())
        };
        let product = &products[pi];
        let (p_cat, p_brand) = product_intent(product).expect("generated title");
        let other_brand = |r: &mut rng::Rng| {
            let b = r.random_range(0..BRANDS.len() - 1);
            if b >= p_brand {
                b + 1
            } else {
                b
            }
        };
        let (q_brand, q_cat) = match label {
            EsciLabel::Exact => (p_brand, p_cat),
            EsciLabel::Substitute => (other_brand(&mut r), p_cat),
            EsciLabel::Complement => (
                r.random_range(0..BRANDS.len()),
                complement_of(p_cat).expect("filtered"),
            ),
            EsciLabel::Irrelevant => {
                let banned = [Some(p_cat), complement_of(p_cat)];
                let candidates: Vec<usize> = (0..CATEGORIES.len())
                    .filter(|c| !banned.contains(&Some(*c)))
                    .collect();
                (
                    r.random_range(0..BRANDS.len()),
                    candidates[r.random_range(0..candidates.len())],
                )
            }
        };
        let query = make_query(q_brand, q_cat, &mut r);
        debug_assert_eq!(planted_label(&query, product), Some(label));
        examples.push(Example {
            example_id: format!("ex{i:05}"),
            query_id: query.clone(),
            query,
            product: product.clone(),
            esci_label: Some(label),
        });
    }
    // Shuffle so label order carries no signal.
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    let examples = order.into_iter().map(|i| examples[i].clone()).collect();
    SynthCorpus { products, examples }
}

/// Gaussian class clusters with a planted set of label flips.
#[derive(Clone, Debug)]
pub struct NoisyClusters {
    pub features: Vec<Vec<f64>>,
    pub true_labels: Vec<usize>,
    pub given_labels: Vec<usize>,
    /// Sorted ids whose given label differs from the true one.
    pub flipped: Vec<usize>,
}

/// `n` points in `classes` well-separated clusters; `round(flip_fraction·n)`
/// of them get a uniformly chosen wrong label. Flipped points sit inside
/// their true cluster, so a fitted classifier contradicts them confidently.
pub fn noisy_clusters(n: usize, classes: usize, flip_fraction: f64, seed: u64) -> NoisyClusters {
    assert!(classes >= 2);
    let dim = classes;
    let mut r = rng::stream(seed, &[0xC1u64]);
    let noise = Normal::new(0.0, 0.6).expect("valid");
    let mut features = Vec::with_capacity(n);
    let mut true_labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let mut x: Vec<f64> = (0..dim).map(|_| noise.sample(&mut r)).collect();
        x[c] += 4.0;
        features.push(x);
        true_labels.push(c);
    }
    let flips = (flip_fraction * n as f64).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut r);
    let mut flipped: Vec<usize> = ids[..flips].to_vec();
    flipped.sort_unstable();
    let mut given_labels = true_labels.clone();
    for &i in &flipped {
        given_labels[i] = (true_labels[i] + 1 + r.random_range(0..classes - 1)) % classes;
    }
    NoisyClusters {
        features,
        true_labels,
        given_labels,
        flipped,
    }
}
