use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueSample, KeywordInventory};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || "，。！？、：；“”‘’（）《》…".contains(c)
}

/// Lowercases, splits on whitespace, and emits each punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token ↔ id map. Ids `0..5` are reserved; the size is fixed at build time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Schema(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_reserved(&self) -> usize {
        RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Content tokens of `ids` joined by spaces; reserved markers are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len() || i == UNK)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Every string a sample contributes to the model's inputs or outputs.
fn sample_texts(s: &DialogueSample) -> impl Iterator<Item = &str> {
    s.history
        .iter()
        .map(|t| t.text.as_str())
        .chain(s.profile.iter().flat_map(|(k, v)| [k.as_str(), v.as_str()]))
        .chain(
            s.knowledge
                .iter()
                .flat_map(|t| [t.subject.as_str(), t.relation.as_str(), t.object.as_str()]),
        )
        .chain(std::iter::once(s.reference.as_str()))
}

/// Builds a vocabulary over the train samples' texts and the keyword strings
/// that render their targets.
pub fn build_vocabulary(
    samples: &[DialogueSample],
    inventory: &KeywordInventory,
    min_count: usize,
) -> Vocabulary {
    let texts = samples.iter().flat_map(|s| {
        sample_texts(s).chain([
            inventory.type_name(s.target.type_id),
            inventory.topic_name(s.target.topic_id),
        ])
    });
    Vocabulary::from_texts(texts, min_count)
}

impl Vocabulary {
    /// Tokens seen fewer than `min_count` times map to `<unk>`. Content ids are
    /// ordered by descending count, then lexicographically.
    pub fn from_texts<'a, I>(texts: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Vocabulary::try_from(tokens).expect("reserved prefix and unique tokens by construction")
    }
}
