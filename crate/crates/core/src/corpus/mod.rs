//! Records, vocabularies, tokenization, augmentation and pre-training
//! instance construction.

mod augment;
mod pretrain;
mod record;
pub mod synth;
mod tokenize;
mod vocab;

pub use augment::{split_augment, DESCRIPTION_CHUNK};
pub use pretrain::{
    build_instances, mask_for_mlm, mix_task_batches, poisson_draw, sample_fake_query,
    InstanceConfig, Payload, PretrainInstance, TaskSet, TaskTag,
};
pub use record::{
    example_to_json, load_examples, load_products, load_records, product_to_json, products_of,
    write_examples, write_products, EsciLabel, Example, Locale, ProductRecord, RecordKind,
    Records,
};
pub use tokenize::{normalize, split_words, tokenize, tokenize_pair, word_ids};
pub use vocab::{
    build_vocab, is_special, ValueVocab, Vocabs, Vocabulary, CLS, MASK, NUM_SPECIALS, OOV, PAD,
    SEP, UNK,
};
