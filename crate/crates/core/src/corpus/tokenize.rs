use unicode_normalization::UnicodeNormalization;

use super::vocab::{Vocabulary, CLS, SEP, UNK};

/// NFKC normalization followed by lowercasing.
pub fn normalize(text: &str) -> String {
    text.nfkc().collect::<String>().to_lowercase()
}

/// Splits normalized text into word pieces on whitespace and punctuation.
/// Any non-alphanumeric character acts as a separator.
pub fn split_words(text: &str) -> Vec<String> {
    let norm = normalize(text);
    norm.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Word ids without the `[CLS]`/`[SEP]` wrapper. Words missing from the
/// vocabulary fall back to their characters, then to `[UNK]`.
pub fn word_ids(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    let mut out = Vec::new();
    for word in split_words(text) {
        if let Some(id) = vocab.id(&word) {
            out.push(id);
            continue;
        }
        let mut buf = [0u8; 4];
        for c in word.chars() {
            out.push(vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK));
        }
    }
    out
}

/// `[CLS] text [SEP]`, truncated so the result has at most `max_len` ids
/// and still ends with `[SEP]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let mut out = Vec::with_capacity(max_len);
    out.push(CLS);
    out.extend(word_ids(text, vocab).into_iter().take(max_len - 2));
    out.push(SEP);
    out
}

/// `[CLS] a [SEP] b [SEP]`. The second segment is truncated first.
pub fn tokenize_pair(a: &str, b: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 3, "max_len must leave room for three specials");
    let budget = max_len - 3;
    let mut left = word_ids(a, vocab);
    let mut right = word_ids(b, vocab);
    left.truncate(budget);
    right.truncate(budget - left.len());
    let mut out = Vec::with_capacity(left.len() + right.len() + 3);
    out.push(CLS);
    out.extend(left);
    out.push(SEP);
    out.extend(right);
    out.push(SEP);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::build_vocab;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        build_vocab(["shoes for running", "日本 red"].iter().copied(), 1, 100)
    }

    #[test]
    fn empty_text() {
        assert_eq!(tokenize("", &vocab(), 16), vec![CLS, SEP]);
    }

    #[test]
    fn known_and_unknown_words() {
        let v = vocab();
        assert_eq!(
            tokenize("Shoes", &v, 16),
            vec![CLS, v.id("shoes").unwrap(), SEP]
        );
        assert_eq!(tokenize("zzz", &v, 16), vec![CLS, UNK, UNK, UNK, SEP]);
        assert_eq!(tokenize("qqq", &vocab(), 3), vec![CLS, UNK, SEP]);
    }

    #[test]
    fn unseen_word_falls_back_to_characters() {
        let v = vocab();
        // "本日" is unseen as a word but both characters are known.
        let ids = tokenize("本日", &v, 16);
        assert_eq!(ids, vec![CLS, v.id("本").unwrap(), v.id("日").unwrap(), SEP]);
    }

    #[test]
    fn nfkc_and_punctuation() {
        assert_eq!(split_words("ＳＨＯＥＳ,for-Running!"), vec!["shoes", "for", "running"]);
    }

    #[test]
    fn pair_layout_and_truncation() {
        let v = vocab();
        let ids = tokenize_pair("red shoes", "shoes for running", &v, 7);
        assert_eq!(ids.len(), 7);
        assert_eq!(ids[0], CLS);
        assert_eq!(ids[3], SEP);
        assert_eq!(*ids.last().unwrap(), SEP);
    }

    proptest! {
        #[test]
        fn truncation_is_prefix_stable(text in "[a-z 日本]{0,40}", max_len in 2usize..12) {
            let v = vocab();
            let full = tokenize(&text, &v, 64);
            let cut = tokenize(&text, &v, max_len);
            prop_assert!(cut.len() <= max_len);
            prop_assert_eq!(*cut.last().unwrap(), SEP);
            let keep = cut.len() - 1;
            prop_assert_eq!(&cut[..keep], &full[..keep]);
            prop_assert_eq!(tokenize(&text, &v, max_len), cut);
        }
    }
}
