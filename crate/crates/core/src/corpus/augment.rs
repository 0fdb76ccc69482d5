use super::record::{EsciLabel, Example};
use super::tokenize::split_words;

/// Maximum words per derived description chunk.
pub const DESCRIPTION_CHUNK: usize = 32;

fn description_chunks(text: &str) -> Vec<String> {
    let words = split_words(text);
    words
        .chunks(DESCRIPTION_CHUNK)
        .map(|c| c.join(" "))
        .collect()
}

/// Class-balancing augmentation for Complement and Irrelevant pairs.
///
/// Each such example is followed by up to `cap` derived copies, one per
/// non-empty bullet point and then one per description chunk. A derived
/// copy keeps query, label, locale and product metadata, carries only its
/// own text piece, and gets the id `<orig>#k` (k from 1). Originals are
/// always kept and other labels pass through unchanged.
pub fn split_augment(examples: &[Example], cap: usize) -> Vec<Example> {
    assert!(cap >= 1, "cap must be positive");
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        out.push(ex.clone());
        if !matches!(
            ex.esci_label,
            Some(EsciLabel::Complement) | Some(EsciLabel::Irrelevant)
        ) {
            continue;
        }
        let bullets = ex
            .product
            .bullet_points
            .iter()
            .filter(|b| !b.trim().is_empty())
            .map(|b| (vec![b.clone()], String::new()));
        let chunks = description_chunks(&ex.product.description)
            .into_iter()
            .map(|c| (Vec::new(), c));
        for (k, (bullet_points, description)) in bullets.chain(chunks).take(cap).enumerate() {
            let mut derived = ex.clone();
            derived.example_id = format!("{}#{}", ex.example_id, k + 1);
            derived.product.bullet_points = bullet_points;
            derived.product.description = description;
            out.push(derived);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::record::{Locale, ProductRecord};

    fn example(label: EsciLabel, bullets: usize, desc: &str) -> Example {
        Example {
            example_id: "e1".into(),
            query_id: "q".into(),
            query: "lamp".into(),
            product: ProductRecord {
                product_id: "p".into(),
                title: "desk lamp".into(),
                description: desc.into(),
                bullet_points: (0..bullets).map(|i| format!("bullet {i}")).collect(),
                brand: "acme".into(),
                color: "red".into(),
                locale: Locale::Us,
            },
            esci_label: Some(label),
        }
    }

    #[test]
    fn exact_passes_through() {
        let out = split_augment(&[example(EsciLabel::Exact, 3, "long text")], 10);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn irrelevant_two_bullets() {
        let out = split_augment(&[example(EsciLabel::Irrelevant, 2, "")], 10);
        assert_eq!(out.len(), 3);
        assert!(out
            .iter()
            .all(|e| e.esci_label == Some(EsciLabel::Irrelevant)));
        assert_eq!(out[1].example_id, "e1#1");
        assert_eq!(out[2].product.bullet_points, vec!["bullet 1".to_string()]);
    }

    #[test]
    fn complement_capped() {
        let out = split_augment(&[example(EsciLabel::Complement, 5, "")], 3);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn description_chunks_follow_bullets() {
        let desc = (0..70).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let out = split_augment(&[example(EsciLabel::Complement, 1, &desc)], 10);
        // one bullet + ceil(70/32) = 3 chunks
        assert_eq!(out.len(), 5);
        assert!(out[2].product.bullet_points.is_empty());
        assert_eq!(split_words(&out[2].product.description).len(), 32);
        assert_eq!(split_words(&out[4].product.description).len(), 6);
    }
}
