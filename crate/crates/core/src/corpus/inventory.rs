use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, IntentKeyword, RawKeyword, RawSample};
use crate::error::{Error, Result};

/// Keyword-type and keyword-topic label sets with stable integer ids.
///
/// An id is the position of the string in its list, so save/load keeps the
/// mapping intact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "InventoryFile", into = "InventoryFile")]
pub struct KeywordInventory {
    types: Vec<String>,
    topics: Vec<String>,
    type_index: HashMap<String, usize>,
    topic_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct InventoryFile {
    types: Vec<String>,
    topics: Vec<String>,
}

impl TryFrom<InventoryFile> for KeywordInventory {
    type Error = Error;

    fn try_from(f: InventoryFile) -> Result<Self> {
        KeywordInventory::new(f.types, f.topics)
    }
}

impl From<KeywordInventory> for InventoryFile {
    fn from(inv: KeywordInventory) -> Self {
        InventoryFile {
            types: inv.types,
            topics: inv.topics,
        }
    }
}

fn index(list: &[String], what: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(list.len());
    for (i, s) in list.iter().enumerate() {
        if map.insert(s.clone(), i).is_some() {
            return Err(Error::Schema(format!("duplicate keyword {what} '{s}'")));
        }
    }
    Ok(map)
}

impl KeywordInventory {
    pub fn new(types: Vec<String>, topics: Vec<String>) -> Result<Self> {
        let type_index = index(&types, "type")?;
        let topic_index = index(&topics, "topic")?;
        Ok(Self {
            types,
            topics,
            type_index,
            topic_index,
        })
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    /// `x_a`
    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    /// `x_t`
    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn type_id(&self, s: &str) -> Option<usize> {
        self.type_index.get(s).copied()
    }

    pub fn topic_id(&self, s: &str) -> Option<usize> {
        self.topic_index.get(s).copied()
    }

    pub fn resolve(&self, k: &RawKeyword) -> Result<IntentKeyword> {
        let type_id = self
            .type_id(&k.kind)
            .ok_or_else(|| Error::Schema(format!("unknown keyword type '{}'", k.kind)))?;
        let topic_id = self
            .topic_id(&k.topic)
            .ok_or_else(|| Error::Schema(format!("unknown keyword topic '{}'", k.topic)))?;
        Ok(IntentKeyword { type_id, topic_id })
    }

    pub fn type_name(&self, id: usize) -> &str {
        &self.types[id]
    }

    pub fn topic_name(&self, id: usize) -> &str {
        &self.topics[id]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Sorted, deduplicated types and topics observed in bridges and targets.
pub fn build_inventory(samples: &[RawSample]) -> Result<KeywordInventory> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "cannot build an inventory from zero samples".into(),
        ));
    }
    let mut types = BTreeSet::new();
    let mut topics = BTreeSet::new();
    for (i, s) in samples.iter().enumerate() {
        if s.bridge.is_empty() {
            return Err(Error::Validation(format!("sample {i} has an empty bridge")));
        }
        for k in s.bridge.iter().chain(std::iter::once(&s.target)) {
            types.insert(k.kind.clone());
            topics.insert(k.topic.clone());
        }
    }
    KeywordInventory::new(types.into_iter().collect(), topics.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodReport {
    pub disjoint: bool,
    /// Topic strings that are targets in both train and test_ood.
    pub offenders: Vec<String>,
}

/// Checks that no test_ood target topic is also a train target topic.
pub fn verify_ood(split: &DatasetSplit, inventory: &KeywordInventory) -> OodReport {
    let train: BTreeSet<usize> = split.train.iter().map(|s| s.target.topic_id).collect();
    let overlap: BTreeSet<usize> = split
        .test_ood
        .iter()
        .map(|s| s.target.topic_id)
        .filter(|t| train.contains(t))
        .collect();
    OodReport {
        disjoint: overlap.is_empty(),
        offenders: overlap
            .into_iter()
            .map(|t| inventory.topic_name(t).to_string())
            .collect(),
    }
}
