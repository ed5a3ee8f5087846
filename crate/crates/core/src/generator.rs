//! Greedy response generation under the scenario bias and bridge-augmented
//! memory, plus teacher-forced reference scoring.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{DecoderCache, EncoderState};
use crate::bridging::{
    select_hard, select_soft, BridgeSelection, KeywordDistribution, SelectionMode,
};
use crate::corpus::{TrainingExample, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{distribution, Ablation, DialogueModel};
use crate::nn::Dropout;
use crate::scenario::{scenario_bias, PooledScenario, ScenarioBias};
use crate::tape::{softmax_rows, Graph, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub mode: SelectionMode,
    pub m: usize,
    pub delta: f64,
    pub lambda: f64,
    pub ablation: Ablation,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Hard,
            m: 4,
            delta: 0.2,
            lambda: 1.0,
            ablation: Ablation::default(),
            max_len: 100,
        }
    }
}

impl DecodeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!(
                "delta = {} outside [0, 1]",
                self.delta
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the decoder needs besides the parameters.
#[derive(Clone, Debug)]
pub struct GenerationContext {
    pub context_enc: EncoderState,
    pub pooled: PooledScenario,
    /// Uniform when the scenario module is off.
    pub bias: ScenarioBias,
    pub distribution: Option<KeywordDistribution>,
    pub selection: Option<BridgeSelection>,
    pub bridge: Option<Mat>,
    pub settings: DecodeSettings,
}

impl GenerationContext {
    pub fn prepare(
        model: &DialogueModel,
        ex: &TrainingExample,
        settings: DecodeSettings,
    ) -> Result<Self> {
        settings.validate()?;
        let ablation = settings.ablation;
        let mut g = Graph::new(&model.store);
        let cond = model.condition(&mut g, ex, ablation, &mut Dropout::eval())?;
        let d = model.config.d_model;
        let vec_of =
            |v: Option<_>| v.map_or_else(|| Array1::zeros(d), |v| g.value(v).row(0).to_owned());
        let pooled = PooledScenario {
            f_k: vec_of(cond.f_k),
            f_u: vec_of(cond.f_u),
        };
        let bias = if ablation.use_csm {
            scenario_bias(&pooled, model.scenario.bias_matrix(&model.store))?
        } else {
            ScenarioBias::uniform(model.config.vocab_size)
        };
        let (distribution, selection, bridge) = match cond.keyword_logits {
            Some(l) => {
                let dist = distribution(
                    g.value(l).row(0).as_slice().expect("contiguous row"),
                    model.n_types(),
                );
                let sel = match settings.mode {
                    SelectionMode::Hard => select_hard(&dist, settings.m)?,
                    SelectionMode::Soft => select_soft(&dist, settings.delta)?,
                };
                let bridge = model.bridging.bridge_state(&model.store, &sel)?;
                (Some(dist), Some(sel), Some(bridge))
            }
            None => (None, None, None),
        };
        let context_enc = EncoderState {
            hidden: g.value(cond.context.hidden).clone(),
            mask: cond.context.mask.clone(),
        };
        Ok(Self {
            context_enc,
            pooled,
            bias,
            distribution,
            selection,
            bridge,
            settings,
        })
    }

    /// `λ · s` when the scenario module is on.
    pub fn logit_bias(&self) -> Option<Array1<f64>> {
        self.settings
            .ablation
            .use_csm
            .then(|| &self.bias.logits * self.settings.lambda)
    }

    pub fn memory(&self) -> Result<(Mat, Vec<bool>)> {
        build_memory(
            &self.context_enc,
            self.bridge.as_ref(),
            self.settings.ablation.use_ikb,
        )
    }
}

/// Prepends the two bridge rows to the encoder memory when bridging is on.
pub fn build_memory(
    context_enc: &EncoderState,
    bridge: Option<&Mat>,
    use_ikb: bool,
) -> Result<(Mat, Vec<bool>)> {
    if !use_ikb {
        return Ok((context_enc.hidden.clone(), context_enc.mask.clone()));
    }
    let Some(bridge) = bridge else {
        return Err(Error::Validation(
            "bridging is on but no bridge state was given".into(),
        ));
    };
    if bridge.ncols() != context_enc.hidden.ncols() {
        return Err(Error::Shape(format!(
            "bridge width {} != memory width {}",
            bridge.ncols(),
            context_enc.hidden.ncols()
        )));
    }
    let mem = ndarray::concatenate(Axis(0), &[bridge.view(), context_enc.hidden.view()])
        .expect("equal widths");
    let mut mask = vec![true; bridge.nrows()];
    mask.extend(&context_enc.mask);
    Ok((mem, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token_id: usize,
    /// Five highest final logits as `(id, logit)`.
    pub top: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids, without the closing `<eos>`.
    pub token_ids: Vec<usize>,
    pub text: String,
    pub steps: Vec<StepRecord>,
    pub selection: Option<BridgeSelection>,
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn top_n(v: &Array1<f64>, n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i, v[i])).collect()
}

/// Greedy decoding; ties go to the lower token id.
pub fn generate(
    model: &DialogueModel,
    ctx: &GenerationContext,
    vocab: &Vocabulary,
) -> Result<GenerationResult> {
    let (memory, mask) = ctx.memory()?;
    let bias = ctx.logit_bias();
    let cap = ctx.settings.max_len.min(model.config.max_tgt_len);
    let mut cache = DecoderCache::default();
    let mut next = BOS;
    let mut token_ids = Vec::new();
    let mut steps = Vec::new();
    for step in 0..cap {
        let (logits, _) = model.backbone.decode_next(
            &model.store,
            &mut cache,
            &[next],
            &memory,
            &mask,
            bias.as_ref(),
        )?;
        if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "logit for token {bad} at decoding step {step}"
            )));
        }
        next = argmax(&logits);
        steps.push(StepRecord {
            token_id: next,
            top: top_n(&logits, 5),
        });
        if next == EOS {
            break;
        }
        token_ids.push(next);
    }
    Ok(GenerationResult {
        text: vocab.decode(&token_ids),
        token_ids,
        steps,
        selection: ctx.selection.clone(),
    })
}

/// Teacher-forced per-token NLL of `reference_ids` under the same biased
/// logits used for generation.
pub fn score_reference(
    model: &DialogueModel,
    ctx: &GenerationContext,
    reference_ids: &[usize],
) -> Result<Vec<f64>> {
    if reference_ids.is_empty() {
        return Err(Error::Validation("reference is empty".into()));
    }
    let (memory, mask) = ctx.memory()?;
    let mut g = Graph::new(&model.store);
    let mem = g.constant(memory);
    let mut inputs = vec![BOS];
    inputs.extend(&reference_ids[..reference_ids.len() - 1]);
    let hidden =
        model
            .backbone
            .decode_graph(&mut g, &inputs, mem, &mask, None, &mut Dropout::eval())?;
    let logits = model.backbone.logits_graph(&mut g, hidden);
    let mut logits = g.value(logits).clone();
    if let Some(b) = ctx.logit_bias() {
        logits += &b;
    }
    let mut out = Vec::with_capacity(reference_ids.len());
    for (row, &t) in logits.rows().into_iter().zip(reference_ids) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let nll = lse - row[t];
        if !nll.is_finite() {
            return Err(Error::NonFinite(format!(
                "reference token {t} has non-finite NLL"
            )));
        }
        out.push(nll);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub token: String,
    pub top5: Vec<(String, f64)>,
    pub bias_top5: Vec<(String, f64)>,
}

/// One JSON object per decoding step.
pub fn trace_lines(
    result: &GenerationResult,
    ctx: &GenerationContext,
    vocab: &Vocabulary,
) -> Vec<TraceLine> {
    let bias_top5: Vec<(String, f64)> = ctx
        .bias
        .top_k(vocab, 5)
        .into_iter()
        .map(|e| (e.token, e.prob))
        .collect();
    result
        .steps
        .iter()
        .enumerate()
        .map(|(step, s)| TraceLine {
            step,
            token: vocab.token(s.token_id).to_string(),
            top5: s
                .top
                .iter()
                .map(|(i, l)| (vocab.token(*i).to_string(), *l))
                .collect(),
            bias_top5: bias_top5.clone(),
        })
        .collect()
}

pub fn trace_jsonl(lines: &[TraceLine]) -> String {
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("serializable") + "\n")
        .collect()
}

/// Next-token distribution at the last position of `prefix`, for inspection.
pub fn next_token_probs(
    model: &DialogueModel,
    ctx: &GenerationContext,
    prefix: &[usize],
) -> Result<Array1<f64>> {
    let (memory, mask) = ctx.memory()?;
    let (logits, _) = model.backbone.decode_step(
        &model.store,
        prefix,
        &memory,
        &mask,
        ctx.logit_bias().as_ref(),
    )?;
    Ok(softmax_rows(&logits.insert_axis(Axis(0))).row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 32,
            vocab_size: 30,
            max_src_len: 32,
            max_tgt_len: 16,
            dropout: 0.0,
            seed: 9,
        }
    }

    fn vocab() -> Vocabulary {
        let words: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        Vocabulary::from_texts([words.join(" ").as_str()], 1)
    }

    fn example() -> TrainingExample {
        let mut targets = vec![0.0; 10];
        targets[1] = 1.0;
        targets[6] = 1.0;
        TrainingExample {
            knowledge_ids: vec![7, 8, 9, 4],
            profile_ids: vec![10, 11, 4],
            context_ids: vec![4, 12, 13, 14, 4, 15, 16],
            reference_ids: vec![17, 18, 19, EOS],
            keyword_targets: targets,
            n_types: 4,
        }
    }

    fn bare_greedy(model: &DialogueModel, ex: &TrainingExample, cap: usize) -> Vec<usize> {
        let enc = model
            .backbone
            .encode(&model.store, &ex.context_ids)
            .unwrap();
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..cap {
            let (l, _) = model
                .backbone
                .decode_step(&model.store, &prefix, &enc.hidden, &enc.mask, None)
                .unwrap();
            let t = argmax(&l);
            if t == EOS {
                break;
            }
            out.push(t);
            prefix.push(t);
        }
        out
    }

    #[test]
    fn full_ablation_matches_bare_backbone() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let s = DecodeSettings {
            ablation: Ablation::BARE,
            max_len: 12,
            ..DecodeSettings::default()
        };
        let ctx = GenerationContext::prepare(&model, &example(), s).unwrap();
        let r = generate(&model, &ctx, &vocab()).unwrap();
        assert_eq!(r.token_ids, bare_greedy(&model, &example(), 12));
        assert!(r.selection.is_none());
        assert!(ctx.logit_bias().is_none());
    }

    #[test]
    fn memory_shapes() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let ctx = GenerationContext::prepare(
            &model,
            &example(),
            DecodeSettings {
                m: 2,
                ..DecodeSettings::default()
            },
        )
        .unwrap();
        let (mem, mask) = ctx.memory().unwrap();
        assert_eq!(mem.nrows(), 9);
        assert_eq!(mask.len(), 9);
        let (plain, _) = build_memory(&ctx.context_enc, ctx.bridge.as_ref(), false).unwrap();
        assert_eq!(plain, ctx.context_enc.hidden);
        assert!(build_memory(&ctx.context_enc, None, true).is_err());
        assert!(build_memory(&ctx.context_enc, Some(&Mat::zeros((2, 3))), true).is_err());
    }

    #[test]
    fn masked_bridge_rows_match_no_bridge() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let ctx = GenerationContext::prepare(
            &model,
            &example(),
            DecodeSettings {
                m: 2,
                ..DecodeSettings::default()
            },
        )
        .unwrap();
        let (mem, mut mask) = ctx.memory().unwrap();
        mask[0] = false;
        mask[1] = false;
        let bias = ctx.logit_bias();
        let (a, _) = model
            .backbone
            .decode_step(&model.store, &[BOS, 5], &mem, &mask, bias.as_ref())
            .unwrap();
        let (b, _) = model
            .backbone
            .decode_step(
                &model.store,
                &[BOS, 5],
                &ctx.context_enc.hidden,
                &ctx.context_enc.mask,
                bias.as_ref(),
            )
            .unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() <= 1e-6));
    }

    #[test]
    fn spike_bias_forces_first_token() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let mut ctx =
            GenerationContext::prepare(&model, &example(), DecodeSettings::default()).unwrap();
        ctx.bias.logits[21] = 1e9;
        let r = generate(&model, &ctx, &vocab()).unwrap();
        assert_eq!(r.steps[0].token_id, 21);
    }

    #[test]
    fn deterministic_and_capped() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let s = DecodeSettings {
            mode: SelectionMode::Soft,
            max_len: 5,
            ..DecodeSettings::default()
        };
        let a = generate(
            &model,
            &GenerationContext::prepare(&model, &example(), s).unwrap(),
            &vocab(),
        )
        .unwrap();
        let b = generate(
            &model,
            &GenerationContext::prepare(&model, &example(), s).unwrap(),
            &vocab(),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.steps.len() <= 5);
    }

    #[test]
    fn uniform_model_scores_log_vocab() {
        let mut model = DialogueModel::new(&config(), 4, 6).unwrap();
        let emb = model.backbone.tok_emb();
        model.store.get_mut(emb).fill(0.0);
        let s = DecodeSettings {
            ablation: Ablation::BARE,
            ..DecodeSettings::default()
        };
        let ctx = GenerationContext::prepare(&model, &example(), s).unwrap();
        let nll = score_reference(&model, &ctx, &[17, 18, EOS]).unwrap();
        for v in nll {
            assert!((v - (30f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_beats_single_token_perturbations() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let ctx = GenerationContext::prepare(
            &model,
            &example(),
            DecodeSettings {
                max_len: 6,
                ..DecodeSettings::default()
            },
        )
        .unwrap();
        let r = generate(&model, &ctx, &vocab()).unwrap();
        let seq: Vec<usize> = r.steps.iter().map(|s| s.token_id).collect();
        let base = score_reference(&model, &ctx, &seq).unwrap();
        for pos in 0..seq.len() {
            for alt in [5, 11, 23] {
                if alt == seq[pos] {
                    continue;
                }
                let mut p = seq.clone();
                p[pos] = alt;
                let s = score_reference(&model, &ctx, &p).unwrap();
                assert!(base[pos] <= s[pos] + 1e-12);
            }
        }
    }

    #[test]
    fn trace_has_one_line_per_step() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let ctx = GenerationContext::prepare(
            &model,
            &example(),
            DecodeSettings {
                max_len: 4,
                ..DecodeSettings::default()
            },
        )
        .unwrap();
        let r = generate(&model, &ctx, &vocab()).unwrap();
        let lines = trace_lines(&r, &ctx, &vocab());
        let text = trace_jsonl(&lines);
        assert_eq!(text.lines().count(), r.steps.len());
        for (line, want) in text.lines().zip(&lines) {
            let back: TraceLine = serde_json::from_str(line).unwrap();
            assert_eq!(&back, want);
            assert_eq!(back.top5.len(), 5);
        }
    }

    #[test]
    fn bad_settings_rejected() {
        let model = DialogueModel::new(&config(), 4, 6).unwrap();
        let s = DecodeSettings {
            delta: 1.5,
            ..DecodeSettings::default()
        };
        assert!(GenerationContext::prepare(&model, &example(), s).is_err());
        let s = DecodeSettings {
            m: 5,
            ..DecodeSettings::default()
        };
        assert!(GenerationContext::prepare(&model, &example(), s).is_err());
    }
}
