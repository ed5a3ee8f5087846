//! Automatic evaluation: perplexity, word F1, BLEU-1/2, DIST-1/2, knowledge
//! F1 and target failure, plus split-level aggregation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bridging::SelectionMode;
use crate::corpus::{
    encode_sample, tokenize, DialogueSample, KeywordInventory, KnowledgeTriple, Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::{generate, score_reference, DecodeSettings, GenerationContext};
use crate::model::{Ablation, DialogueModel};

/// `exp(total NLL / total tokens)`.
pub fn perplexity(nlls: &[Vec<f64>]) -> Result<f64> {
    let n: usize = nlls.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Validation("perplexity over zero tokens".into()));
    }
    let total: f64 = nlls.iter().flatten().sum();
    Ok((total / n as f64).exp())
}

fn counts<T: AsRef<str>>(tokens: &[T]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

fn multiset_overlap<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let cb = counts(b);
    counts(a)
        .iter()
        .map(|(t, n)| (*n).min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

fn f1_from(overlap: usize, n_gen: usize, n_ref: usize) -> f64 {
    if overlap == 0 || n_gen == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_gen as f64;
    let r = overlap as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

/// Multiset token-overlap F1 in `[0, 1]`.
pub fn word_f1<T: AsRef<str>>(generated: &[T], reference: &[T]) -> f64 {
    f1_from(
        multiset_overlap(generated, reference),
        generated.len(),
        reference.len(),
    )
}

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> Vec<Vec<&str>> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect()
}

/// Sentence BLEU over orders `1..=max_n`: clipped n-gram precisions, a zero
/// match count replaced by `1 / (total + 1)`, geometric mean, brevity penalty.
pub fn bleu<T: AsRef<str>>(generated: &[T], reference: &[T], max_n: usize) -> f64 {
    if generated.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let gen = ngrams(generated, n);
        let mut ref_counts: HashMap<Vec<&str>, usize> = HashMap::new();
        for g in ngrams(reference, n) {
            *ref_counts.entry(g).or_insert(0) += 1;
        }
        let mut gen_counts: HashMap<Vec<&str>, usize> = HashMap::new();
        for g in &gen {
            *gen_counts.entry(g.clone()).or_insert(0) += 1;
        }
        let matched: usize = gen_counts
            .iter()
            .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (gen.len() as f64 + 1.0)
        } else {
            matched as f64 / gen.len() as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (generated.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Unique n-grams over total n-grams across the corpus.
pub fn distinct<T: AsRef<str>>(corpus: &[Vec<T>], n: usize) -> f64 {
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for utt in corpus {
        for g in ngrams(utt, n) {
            total += 1;
            seen.insert(g);
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "and", "or", "in", "on", "at", "for", "with", "is", "are", "was",
    "were", "be", "it", "this", "that", "i", "you", "he", "she", "we", "they", "me", "my", "your",
    "his", "her", "its", "our", "their", "do", "does", "did", "so", "but", "if", "by", "as",
    "from", "about", "can", "will", "would", "should", "have", "has", "had", "not", "no", "yes",
];

fn is_punct(token: &str) -> bool {
    token.chars().all(|c| !c.is_alphanumeric())
}

fn content_tokens(text: &str, stopwords: &HashSet<&str>) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_punct(t) && !stopwords.contains(t.as_str()))
        .collect()
}

/// Knowledge entries whose object tokens all occur in the reference.
pub fn grounded_knowledge<'a>(
    knowledge: &'a [KnowledgeTriple],
    reference: &str,
) -> Vec<&'a KnowledgeTriple> {
    let ref_tokens: HashSet<String> = tokenize(reference).into_iter().collect();
    knowledge
        .iter()
        .filter(|t| {
            let obj = tokenize(&t.object);
            !obj.is_empty() && obj.iter().all(|tok| ref_tokens.contains(tok))
        })
        .collect()
}

/// F1 between the generated content tokens and the object tokens of the
/// given knowledge entries, after dropping stopwords and punctuation.
pub fn knowledge_f1(generated: &str, gold: &[&KnowledgeTriple], stopwords: &[&str]) -> f64 {
    let stop: HashSet<&str> = stopwords.iter().copied().collect();
    let gen = content_tokens(generated, &stop);
    let gold_tokens: Vec<String> = gold
        .iter()
        .flat_map(|t| content_tokens(&t.object, &stop))
        .collect();
    word_f1(&gen, &gold_tokens)
}

fn normalized(text: &str) -> String {
    format!(" {} ", tokenize(text).join(" "))
}

/// Whether `utterance` mentions `topic`, comparing lowercased token
/// sequences on token boundaries.
pub fn target_achieved(utterance: &str, topic: &str) -> bool {
    let t = normalized(topic);
    t.trim().is_empty() || normalized(utterance).contains(&t)
}

/// Fraction of `(final utterance, target topic)` pairs that miss the target.
pub fn failure_rate<S: AsRef<str>, T: AsRef<str>>(dialogues: &[(S, T)]) -> Result<f64> {
    if dialogues.is_empty() {
        return Err(Error::Validation("failure rate over zero dialogues".into()));
    }
    let misses = dialogues
        .iter()
        .filter(|(u, t)| !target_achieved(u.as_ref(), t.as_ref()))
        .count();
    Ok(misses as f64 / dialogues.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_samples: usize,
    pub n_final: usize,
    pub n_grounded: usize,
    pub mode: SelectionMode,
    pub m: usize,
    pub delta: f64,
    pub lambda: f64,
    pub ablation: Ablation,
    pub ppl: f64,
    /// Percent.
    pub word_f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist1: f64,
    pub dist2: f64,
    /// Percent; absent when no sample has grounded knowledge.
    pub knowledge_f1: Option<f64>,
    /// Percent; absent when the split has no final turns.
    pub failure: Option<f64>,
}

impl EvalReport {
    pub const HEADER: [&'static str; 9] = [
        "Variant", "PPL", "W. F1", "BLEU-1", "BLEU-2", "DIST-1", "DIST-2", "K. F1", "Fail.",
    ];

    pub fn table_header() -> String {
        let mut s = format!("{:<30}", Self::HEADER[0]);
        for h in &Self::HEADER[1..] {
            let _ = write!(s, "{h:>9}");
        }
        s
    }

    pub fn table_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let label = format!("{} {} ({})", self.split, self.mode, self.ablation.label());
        format!(
            "{label:<30}{:>9.2}{:>9.2}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9}{:>9}",
            self.ppl,
            self.word_f1,
            self.bleu1,
            self.bleu2,
            self.dist1,
            self.dist2,
            opt(self.knowledge_f1),
            opt(self.failure)
        )
    }

    pub fn table(&self) -> String {
        format!("{}\n{}\n", Self::table_header(), self.table_row())
    }
}

/// Per-sample outputs kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub index: usize,
    pub generated: String,
    pub reference: String,
    pub final_turn: bool,
    pub achieved: Option<bool>,
}

/// Generates and scores every sample, then aggregates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &DialogueModel,
    vocab: &Vocabulary,
    inventory: &KeywordInventory,
    samples: &[DialogueSample],
    split: &str,
    settings: DecodeSettings,
    stopwords: &[&str],
) -> Result<(EvalReport, Vec<SampleOutput>)> {
    if samples.is_empty() {
        return Err(Error::Validation(format!("split {split} has no samples")));
    }
    let limits = model.config.limits();
    let mut nlls = Vec::with_capacity(samples.len());
    let mut generated_tokens = Vec::with_capacity(samples.len());
    let (mut f1_sum, mut b1_sum, mut b2_sum, mut kf1_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut n_grounded = 0;
    let mut finals = Vec::new();
    let mut outputs = Vec::with_capacity(samples.len());
    for (index, sample) in samples.iter().enumerate() {
        let wrap = |e: Error| Error::Sample {
            index,
            source: Box::new(e),
        };
        let ex = encode_sample(sample, vocab, inventory, settings.m, limits).map_err(wrap)?;
        let ctx = GenerationContext::prepare(model, &ex, settings).map_err(wrap)?;
        nlls.push(score_reference(model, &ctx, &ex.reference_ids).map_err(wrap)?);
        let result = generate(model, &ctx, vocab).map_err(wrap)?;
        let gen = tokenize(&result.text);
        let reference = tokenize(&sample.reference);
        f1_sum += word_f1(&gen, &reference);
        b1_sum += bleu(&gen, &reference, 1);
        b2_sum += bleu(&gen, &reference, 2);
        let grounded = grounded_knowledge(&sample.knowledge, &sample.reference);
        if !grounded.is_empty() {
            n_grounded += 1;
            kf1_sum += knowledge_f1(&result.text, &grounded, stopwords);
        }
        let achieved = sample.is_final_turn().then(|| {
            let topic = inventory.topic_name(sample.target.topic_id);
            finals.push((result.text.clone(), topic.to_string()));
            target_achieved(&result.text, topic)
        });
        outputs.push(SampleOutput {
            index,
            generated: result.text,
            reference: sample.reference.clone(),
            final_turn: sample.is_final_turn(),
            achieved,
        });
        generated_tokens.push(gen);
    }
    let n = samples.len() as f64;
    let report = EvalReport {
        split: split.to_string(),
        n_samples: samples.len(),
        n_final: finals.len(),
        n_grounded,
        mode: settings.mode,
        m: settings.m,
        delta: settings.delta,
        lambda: settings.lambda,
        ablation: settings.ablation,
        ppl: perplexity(&nlls)?,
        word_f1: 100.0 * f1_sum / n,
        bleu1: b1_sum / n,
        bleu2: b2_sum / n,
        dist1: distinct(&generated_tokens, 1),
        dist2: distinct(&generated_tokens, 2),
        knowledge_f1: (n_grounded > 0).then(|| 100.0 * kf1_sum / n_grounded as f64),
        failure: if finals.is_empty() {
            None
        } else {
            Some(100.0 * failure_rate(&finals)?)
        },
    };
    Ok((report, outputs))
}
