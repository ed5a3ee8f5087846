#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tgdial::backbone::ModelConfig;
use tgdial::corpus::{
    build_vocabulary, encode_all, load_dataset, DatasetSplit, KeywordInventory, TrainingExample,
    Vocabulary,
};
use tgdial::model::DialogueModel;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

pub fn tiny_split() -> (DatasetSplit, KeywordInventory) {
    load_dataset(&fixture_dir(), None).expect("tiny fixtures load")
}

pub fn small_config(vocab: &Vocabulary, d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        n_layers: 2,
        n_heads: 4,
        ffn_width: 2 * d_model,
        vocab_size: vocab.len(),
        max_src_len: 96,
        max_tgt_len: 32,
        dropout: 0.0,
        seed: 11,
    }
}

/// Vocabulary, untrained model and encoded train split for the tiny fixtures.
pub struct Tiny {
    pub split: DatasetSplit,
    pub inventory: KeywordInventory,
    pub vocab: Vocabulary,
    pub model: DialogueModel,
    pub train: Vec<TrainingExample>,
}

pub fn tiny(d_model: usize, m: usize) -> Tiny {
    let (split, inventory) = tiny_split();
    let vocab = build_vocabulary(&split.train, &inventory, 1);
    let cfg = small_config(&vocab, d_model);
    let model = DialogueModel::new(&cfg, inventory.n_types(), inventory.n_topics()).unwrap();
    let train = encode_all(&split.train, &vocab, &inventory, m, cfg.limits()).unwrap();
    Tiny {
        split,
        inventory,
        vocab,
        model,
        train,
    }
}
