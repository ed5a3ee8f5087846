use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    build_inventory, normalize_whitespace, DatasetSplit, DialogueSample, IntentKeyword,
    KeywordInventory, KnowledgeTriple, Speaker, SplitName, Turn,
};
use crate::error::{Error, Result};

/// File names expected inside a dataset directory, in [`SplitName::ALL`] order.
pub const INVENTORY_FILE: &str = "inventory.json";
pub const SPLIT_FILES: [&str; 4] = [
    "train.jsonl",
    "dev.jsonl",
    "test_id.jsonl",
    "test_ood.jsonl",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawKeyword {
    #[serde(rename = "type")]
    pub kind: String,
    pub topic: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<RawKeyword>,
}

/// One JSONL record exactly as it appears on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub history: Vec<RawTurn>,
    pub target: RawKeyword,
    pub profile: serde_json::Map<String, serde_json::Value>,
    pub knowledge: Vec<[String; 3]>,
    pub bridge: Vec<RawKeyword>,
    pub reference: String,
}

impl RawSample {
    fn check(&self, require_system_keywords: bool) -> std::result::Result<(), String> {
        for (i, turn) in self.history.iter().enumerate() {
            if normalize_whitespace(&turn.text).is_empty() {
                return Err(format!("history[{i}] has empty text"));
            }
            if require_system_keywords && turn.speaker == Speaker::System && turn.keyword.is_none()
            {
                return Err(format!("history[{i}] is a system turn without a keyword"));
            }
        }
        if self.knowledge.is_empty() {
            return Err("knowledge is empty".into());
        }
        if self.bridge.is_empty() {
            return Err("bridge is empty".into());
        }
        if normalize_whitespace(&self.reference).is_empty() {
            return Err("reference is empty".into());
        }
        for (k, v) in &self.profile {
            if !v.is_string() {
                return Err(format!("profile value for '{k}' is not a string"));
            }
        }
        Ok(())
    }

    pub(crate) fn resolve(&self, inv: &KeywordInventory) -> Result<DialogueSample> {
        let history = self
            .history
            .iter()
            .map(|t| {
                Ok(Turn {
                    speaker: t.speaker,
                    text: normalize_whitespace(&t.text),
                    keyword: t.keyword.as_ref().map(|k| inv.resolve(k)).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DialogueSample {
            history,
            target: inv.resolve(&self.target)?,
            profile: self
                .profile
                .iter()
                .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
                .collect(),
            knowledge: self
                .knowledge
                .iter()
                .map(|[s, r, o]| KnowledgeTriple {
                    subject: s.clone(),
                    relation: r.clone(),
                    object: o.clone(),
                })
                .collect(),
            bridge: self
                .bridge
                .iter()
                .map(|k| inv.resolve(k))
                .collect::<Result<_>>()?,
            reference: normalize_whitespace(&self.reference),
        })
    }

    pub fn from_sample(sample: &DialogueSample, inv: &KeywordInventory) -> Self {
        let kw = |k: &IntentKeyword| RawKeyword {
            kind: inv.types()[k.type_id].clone(),
            topic: inv.topics()[k.topic_id].clone(),
        };
        RawSample {
            history: sample
                .history
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    keyword: t.keyword.as_ref().map(kw),
                })
                .collect(),
            target: kw(&sample.target),
            profile: sample
                .profile
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
            knowledge: sample
                .knowledge
                .iter()
                .map(|t| [t.subject.clone(), t.relation.clone(), t.object.clone()])
                .collect(),
            bridge: sample.bridge.iter().map(kw).collect(),
            reference: sample.reference.clone(),
        }
    }
}

fn read_raw(path: &Path, require_system_keywords: bool) -> Result<Vec<RawSample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        raw.check(require_system_keywords).map_err(parse_err)?;
        out.push(raw);
    }
    Ok(out)
}

/// Loads and resolves a single JSONL file against a fixed inventory.
pub fn load_split_file(path: &Path, inventory: &KeywordInventory) -> Result<Vec<DialogueSample>> {
    read_raw(path, false)?
        .iter()
        .map(|r| r.resolve(inventory))
        .collect()
}

/// Writes samples in the on-disk JSONL schema, one record per line.
pub fn write_split_file(
    path: &Path,
    samples: &[DialogueSample],
    inventory: &KeywordInventory,
) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&RawSample::from_sample(s, inventory))?;
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads `train/dev/test_id/test_ood.jsonl` from `dir`.
///
/// With no inventory supplied, `dir/inventory.json` is used when present and
/// otherwise one is built from the train and dev keywords, in which case test
/// records must only use keywords seen there.
pub fn load_dataset(
    dir: &Path,
    inventory: Option<&KeywordInventory>,
) -> Result<(DatasetSplit, KeywordInventory)> {
    let mut raws = Vec::with_capacity(4);
    for (name, file) in SplitName::ALL.iter().zip(SPLIT_FILES) {
        raws.push(read_raw(&dir.join(file), *name == SplitName::Train)?);
    }
    let inventory = match inventory {
        Some(inv) => inv.clone(),
        None if dir.join(INVENTORY_FILE).exists() => {
            KeywordInventory::load(&dir.join(INVENTORY_FILE))?
        }
        None => {
            let seen: Vec<RawSample> = raws[0].iter().chain(raws[1].iter()).cloned().collect();
            build_inventory(&seen)?
        }
    };
    let mut split = DatasetSplit::default();
    for (name, raw) in SplitName::ALL.iter().zip(&raws) {
        *split.get_mut(*name) = raw
            .iter()
            .map(|r| r.resolve(&inventory))
            .collect::<Result<_>>()?;
    }
    Ok((split, inventory))
}
