use serde::{Deserialize, Serialize};

use super::{DialogueSample, KeywordInventory, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeLimits {
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

/// Token ids and keyword targets for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// Flattened `subject relation object <sep>` triples.
    pub knowledge_ids: Vec<usize>,
    /// Flattened `key value <sep>` pairs; may be empty.
    pub profile_ids: Vec<usize>,
    /// `[h; g]`: `<sep>`-prefixed history turns then the `<sep>`-prefixed target.
    pub context_ids: Vec<usize>,
    /// Reference tokens followed by `<eos>`.
    pub reference_ids: Vec<usize>,
    /// Multi-hot over `x_a + x_t` labels: types first, then topics.
    pub keyword_targets: Vec<f64>,
    pub n_types: usize,
}

impl TrainingExample {
    pub fn type_positives(&self) -> Vec<usize> {
        self.keyword_targets[..self.n_types]
            .iter()
            .enumerate()
            .filter(|(_, y)| **y > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn topic_positives(&self) -> Vec<usize> {
        self.keyword_targets[self.n_types..]
            .iter()
            .enumerate()
            .filter(|(_, y)| **y > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn popcount(&self) -> usize {
        self.keyword_targets.iter().filter(|y| **y > 0.5).count()
    }
}

fn segment(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut ids = vec![SEP];
    ids.extend(vocab.encode(text));
    ids
}

/// Converts a sample into model inputs.
///
/// History is trimmed oldest-turn-first until `[h; g]` fits `max_src_len`;
/// knowledge and profile are cut at the tail. The keyword targets mark every
/// distinct type and topic among the first `min(m, |bridge|)` bridge entries.
pub fn encode_sample(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    inventory: &KeywordInventory,
    m: usize,
    limits: EncodeLimits,
) -> Result<TrainingExample> {
    if m == 0 {
        return Err(Error::Encoding(
            "keyword window m must be at least 1".into(),
        ));
    }
    let target_seg = {
        let mut ids = segment(vocab, inventory.type_name(sample.target.type_id));
        ids.extend(vocab.encode(inventory.topic_name(sample.target.topic_id)));
        ids
    };
    if target_seg.len() > limits.max_src_len {
        return Err(Error::Encoding(format!(
            "target alone needs {} tokens, over the source cap {}",
            target_seg.len(),
            limits.max_src_len
        )));
    }
    let turns: Vec<Vec<usize>> = sample
        .history
        .iter()
        .map(|t| segment(vocab, &t.text))
        .collect();
    let mut first = 0;
    let mut len = target_seg.len() + turns.iter().map(Vec::len).sum::<usize>();
    while len > limits.max_src_len {
        len -= turns[first].len();
        first += 1;
    }
    let mut context_ids: Vec<usize> = turns[first..].concat();
    context_ids.extend(target_seg);

    let mut reference_ids = vocab.encode(&sample.reference);
    reference_ids.push(EOS);
    if reference_ids.len() > limits.max_tgt_len {
        return Err(Error::Encoding(format!(
            "reference has {} tokens including <eos>, over the target cap {}",
            reference_ids.len(),
            limits.max_tgt_len
        )));
    }

    let mut knowledge_ids = Vec::new();
    for t in &sample.knowledge {
        for part in [&t.subject, &t.relation, &t.object] {
            knowledge_ids.extend(vocab.encode(part));
        }
        knowledge_ids.push(SEP);
    }
    knowledge_ids.truncate(limits.max_src_len);

    let mut profile_ids = Vec::new();
    for (k, v) in &sample.profile {
        profile_ids.extend(vocab.encode(k));
        profile_ids.extend(vocab.encode(v));
        profile_ids.push(SEP);
    }
    profile_ids.truncate(limits.max_src_len);

    let n_types = inventory.n_types();
    let mut keyword_targets = vec![0.0; n_types + inventory.n_topics()];
    for k in sample.bridge.iter().take(m) {
        if k.type_id >= n_types || k.topic_id >= inventory.n_topics() {
            return Err(Error::Encoding(format!(
                "bridge keyword {k:?} is outside the inventory"
            )));
        }
        keyword_targets[k.type_id] = 1.0;
        keyword_targets[n_types + k.topic_id] = 1.0;
    }

    Ok(TrainingExample {
        knowledge_ids,
        profile_ids,
        context_ids,
        reference_ids,
        keyword_targets,
        n_types,
    })
}

/// Encodes every sample, tagging failures with the sample index.
pub fn encode_all(
    samples: &[DialogueSample],
    vocab: &Vocabulary,
    inventory: &KeywordInventory,
    m: usize,
    limits: EncodeLimits,
) -> Result<Vec<TrainingExample>> {
    samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            encode_sample(s, vocab, inventory, m, limits).map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
