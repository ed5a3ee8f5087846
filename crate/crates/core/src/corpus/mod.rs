//! Dialogue data model, JSONL ingestion, keyword inventories, vocabulary,
//! and conversion of samples into tensor-ready training examples.

mod encode;
mod inventory;
mod jsonl;
pub mod synth;
mod vocab;

pub use encode::{encode_all, encode_sample, EncodeLimits, TrainingExample};
pub use inventory::{build_inventory, verify_ood, KeywordInventory, OodReport};
pub use jsonl::{
    load_dataset, load_split_file, write_split_file, RawKeyword, RawSample, RawTurn,
    INVENTORY_FILE, SPLIT_FILES,
};
pub use vocab::{build_vocabulary, tokenize, Vocabulary, BOS, EOS, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

/// A (keyword-type, keyword-topic) pair, as indices into a [`KeywordInventory`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntentKeyword {
    pub type_id: usize,
    pub topic_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub keyword: Option<IntentKeyword>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// One generation instance: the system turn `reference` follows `history`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub history: Vec<Turn>,
    pub target: IntentKeyword,
    /// Key/value pairs in file order.
    pub profile: Vec<(String, String)>,
    pub knowledge: Vec<KnowledgeTriple>,
    /// Gold keywords from the reference turn to the end of the dialogue.
    pub bridge: Vec<IntentKeyword>,
    pub reference: String,
}

impl DialogueSample {
    /// The last system turn of a dialogue has nothing left to bridge to.
    pub fn is_final_turn(&self) -> bool {
        self.bridge.len() == 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<DialogueSample>,
    pub dev: Vec<DialogueSample>,
    pub test_id: Vec<DialogueSample>,
    pub test_ood: Vec<DialogueSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    TestId,
    TestOod,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::Dev,
        SplitName::TestId,
        SplitName::TestOod,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::TestId => "test_id",
            SplitName::TestOod => "test_ood",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                format!("unknown split '{s}' (expected train, dev, test_id or test_ood)")
            })
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &[DialogueSample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::TestId => &self.test_id,
            SplitName::TestOod => &self.test_ood,
        }
    }

    pub fn get_mut(&mut self, name: SplitName) -> &mut Vec<DialogueSample> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Dev => &mut self.dev,
            SplitName::TestId => &mut self.test_id,
            SplitName::TestOod => &mut self.test_ood,
        }
    }
}

/// Collapses runs of whitespace and trims.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
