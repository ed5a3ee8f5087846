//! The complete model: backbone, scenario module and bridging module sharing
//! one parameter store, plus the joint training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Encoded, ModelConfig};
use crate::bridging::{select_hard, teacher_selection, BridgingModule, KeywordDistribution};
use crate::corpus::{TrainingExample, BOS};
use crate::error::{Error, Result};
use crate::nn::Dropout;
use crate::scenario::{ScenarioModule, ScenarioSource};
use crate::tape::{logistic, Graph, Mat, ParamId, ParamStore, Var};

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_csm: bool,
    pub use_ikb: bool,
    pub drop_k: bool,
    pub drop_u: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_csm: true,
            use_ikb: true,
            drop_k: false,
            drop_u: false,
        }
    }
}

impl Ablation {
    pub const BARE: Ablation = Ablation {
        use_csm: false,
        use_ikb: false,
        drop_k: false,
        drop_u: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_csm {
            parts.push("w/o CSM");
        } else {
            if self.drop_k {
                parts.push("-F_k");
            }
            if self.drop_u {
                parts.push("-F_u");
            }
        }
        if !self.use_ikb {
            parts.push("w/o IKB");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join(", ")
        }
    }
}

/// Which keyword ids feed the bridge state during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSelection {
    #[default]
    Teacher,
    /// The model's own top-`m` picks.
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub ablation: Ablation,
    pub lambda: f64,
    pub m: usize,
    pub selection: TrainSelection,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            ablation: Ablation::default(),
            lambda: 1.0,
            m: 4,
            selection: TrainSelection::Teacher,
        }
    }
}

/// Graph handles of the objective terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lm: Var,
    pub cls: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub lm: f64,
    pub cls: f64,
    pub total: f64,
}

/// Intermediate graph values shared by training and generation.
pub struct Conditioning {
    pub context: Encoded,
    pub f_k: Option<Var>,
    pub f_u: Option<Var>,
    /// `1 × |V|` raw scenario logits, present when the scenario module is on.
    pub bias: Option<Var>,
    /// `1 × (x_a + x_t)` head logits, present when bridging is on.
    pub keyword_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DialogueModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub scenario: ScenarioModule,
    pub bridging: BridgingModule,
}

impl DialogueModel {
    /// Fresh model seeded from `config.seed`.
    pub fn new(config: &ModelConfig, n_types: usize, n_topics: usize) -> Result<Self> {
        if n_types == 0 || n_topics == 0 {
            return Err(Error::Config(
                "keyword inventory must have at least one type and one topic".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(config, &mut store, &mut rng)?;
        let scenario = ScenarioModule::new(&mut store, config.d_model, config.vocab_size, &mut rng);
        let bridging = BridgingModule::new(&mut store, config.d_model, n_types, n_topics, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            scenario,
            bridging,
        })
    }

    pub fn n_types(&self) -> usize {
        self.bridging.n_types()
    }

    pub fn n_topics(&self) -> usize {
        self.bridging.n_topics()
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        let owned: std::collections::HashSet<ParamId> = self
            .scenario
            .params()
            .into_iter()
            .chain(self.bridging.params())
            .collect();
        self.store.ids().filter(|id| !owned.contains(id)).collect()
    }

    /// Encodes the context and, as the switches allow, the scenario vectors,
    /// the vocabulary bias and the keyword logits.
    pub fn condition(
        &self,
        g: &mut Graph,
        ex: &TrainingExample,
        ablation: Ablation,
        drop: &mut Dropout,
    ) -> Result<Conditioning> {
        let context = self.backbone.encode_graph(g, &ex.context_ids, drop)?;
        let (mut f_k, mut f_u) = (None, None);
        if ablation.use_csm {
            if !ablation.drop_k && !ex.knowledge_ids.is_empty() {
                let enc = self.backbone.encode_graph(g, &ex.knowledge_ids, drop)?;
                f_k = Some(
                    self.scenario
                        .pool_graph(g, &enc, ScenarioSource::Knowledge)?,
                );
            }
            if !ablation.drop_u && !ex.profile_ids.is_empty() {
                let enc = self.backbone.encode_graph(g, &ex.profile_ids, drop)?;
                f_u = Some(self.scenario.pool_graph(g, &enc, ScenarioSource::Profile)?);
            }
        }
        let bias = if ablation.use_csm {
            let sum = match (f_k, f_u) {
                (Some(k), Some(u)) => Some(g.add(k, u)),
                (one, None) | (None, one) => one,
            };
            Some(match sum {
                Some(s) => self.scenario.bias_graph(g, s),
                None => g.constant(Mat::zeros((1, self.config.vocab_size))),
            })
        } else {
            None
        };
        let keyword_logits = if ablation.use_ikb {
            let d = self.config.d_model;
            let k = f_k.unwrap_or_else(|| g.constant(Mat::zeros((1, d))));
            let u = f_u.unwrap_or_else(|| g.constant(Mat::zeros((1, d))));
            let fused = self.bridging.fuse_graph(g, &context, k, u)?;
            Some(self.bridging.logits_graph(g, fused))
        } else {
            None
        };
        Ok(Conditioning {
            context,
            f_k,
            f_u,
            bias,
            keyword_logits,
        })
    }

    /// Decoder memory: bridge rows (if any) prepended to the context.
    pub fn memory_graph(
        &self,
        g: &mut Graph,
        context: &Encoded,
        bridge: Option<Var>,
    ) -> (Var, Vec<bool>) {
        match bridge {
            Some(b) => {
                let mem = g.concat_rows(&[b, context.hidden]);
                let mut mask = vec![true; g.shape(b).0];
                mask.extend(&context.mask);
                (mem, mask)
            }
            None => (context.hidden, context.mask.clone()),
        }
    }

    /// Builds `L_lm + L_cls` for one example.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        ex: &TrainingExample,
        opts: &LossOptions,
        drop: &mut Dropout,
    ) -> Result<LossVars> {
        if ex.reference_ids.is_empty() {
            return Err(Error::Validation("reference is empty".into()));
        }
        let cond = self.condition(g, ex, opts.ablation, drop)?;
        let (cls, bridge) = match cond.keyword_logits {
            Some(logits) => {
                if ex.keyword_targets.len() != self.n_types() + self.n_topics() {
                    return Err(Error::Shape(format!(
                        "keyword targets have {} labels, model has {}",
                        ex.keyword_targets.len(),
                        self.n_types() + self.n_topics()
                    )));
                }
                if ex.popcount() == 0 {
                    return Err(Error::Validation(
                        "keyword targets have no positives".into(),
                    ));
                }
                let cls = g.bce_with_logits(logits, &ex.keyword_targets);
                let selection = match opts.selection {
                    TrainSelection::Teacher => teacher_selection(ex)?,
                    TrainSelection::Predicted => {
                        let dist = distribution(
                            g.value(logits).row(0).as_slice().expect("row"),
                            self.n_types(),
                        );
                        select_hard(&dist, opts.m)?
                    }
                };
                (Some(cls), Some(self.bridging.bridge_graph(g, &selection)?))
            }
            None => (None, None),
        };
        let (memory, mask) = self.memory_graph(g, &cond.context, bridge);
        let mut inputs = vec![BOS];
        inputs.extend(&ex.reference_ids[..ex.reference_ids.len() - 1]);
        let hidden = self
            .backbone
            .decode_graph(g, &inputs, memory, &mask, None, drop)?;
        let mut logits = self.backbone.logits_graph(g, hidden);
        if let Some(b) = cond.bias {
            let scaled = g.scale(b, opts.lambda);
            logits = g.add_row(logits, scaled);
        }
        let lm = g.cross_entropy(logits, &ex.reference_ids);
        let total = match cls {
            Some(c) => g.add(lm, c),
            None => lm,
        };
        Ok(LossVars { lm, cls, total })
    }

    /// Eval-mode objective values for one example.
    pub fn loss_values(&self, ex: &TrainingExample, opts: &LossOptions) -> Result<LossValues> {
        let mut g = Graph::new(&self.store);
        let v = self.loss_graph(&mut g, ex, opts, &mut Dropout::eval())?;
        Ok(LossValues {
            lm: g.scalar(v.lm),
            cls: v.cls.map_or(0.0, |c| g.scalar(c)),
            total: g.scalar(v.total),
        })
    }
}

/// Splits concatenated head logits into per-head logistic probabilities.
pub fn distribution(logits: &[f64], n_types: usize) -> KeywordDistribution {
    KeywordDistribution {
        type_probs: logits[..n_types].iter().map(|&z| logistic(z)).collect(),
        topic_probs: logits[n_types..].iter().map(|&z| logistic(z)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;

    pub(crate) fn tiny_config() -> ModelConfig {
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

    pub(crate) fn example() -> TrainingExample {
        let mut targets = vec![0.0; 4 + 6];
        targets[1] = 1.0;
        targets[4 + 2] = 1.0;
        targets[4 + 5] = 1.0;
        TrainingExample {
            knowledge_ids: vec![7, 8, 9, 4],
            profile_ids: vec![10, 11, 4],
            context_ids: vec![4, 12, 13, 14, 4, 15, 16],
            reference_ids: vec![17, 18, 19, EOS],
            keyword_targets: targets,
            n_types: 4,
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let model = DialogueModel::new(&tiny_config(), 4, 6).unwrap();
        let v = model
            .loss_values(&example(), &LossOptions::default())
            .unwrap();
        assert_eq!(v.total, v.lm + v.cls);
        assert!(v.cls > 0.0 && v.lm > 0.0);
        let off = LossOptions {
            ablation: Ablation {
                use_ikb: false,
                ..Ablation::default()
            },
            ..LossOptions::default()
        };
        let w = model.loss_values(&example(), &off).unwrap();
        assert_eq!(w.cls, 0.0);
        assert_eq!(w.total, w.lm);
    }

    #[test]
    fn teacher_and_equivalent_hard_selection_agree() {
        let model = DialogueModel::new(&tiny_config(), 4, 6).unwrap();
        let ex = example();
        let mut g = Graph::new(&model.store);
        let teacher = teacher_selection(&ex).unwrap();
        let a = model.bridging.bridge_graph(&mut g, &teacher).unwrap();
        let hard = crate::bridging::BridgeSelection {
            mode: crate::bridging::SelectionMode::Hard,
            ..teacher.clone()
        };
        let b = model.bridging.bridge_graph(&mut g, &hard).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn ikb_off_leaves_bridging_without_gradient() {
        let model = DialogueModel::new(&tiny_config(), 4, 6).unwrap();
        let opts = LossOptions {
            ablation: Ablation {
                use_ikb: false,
                ..Ablation::default()
            },
            ..LossOptions::default()
        };
        let mut g = Graph::new(&model.store);
        let v = model
            .loss_graph(&mut g, &example(), &opts, &mut Dropout::eval())
            .unwrap();
        let mut grads = model.store.zeros_like();
        g.backward_into(v.total, &mut grads);
        for id in model.bridging.params() {
            assert!(
                grads.get(id).iter().all(|x| *x == 0.0),
                "{}",
                model.store.name(id)
            );
        }
        assert!(grads
            .get(model.scenario.bias_proj)
            .iter()
            .any(|x| *x != 0.0));
    }

    #[test]
    fn predicted_selection_runs() {
        let model = DialogueModel::new(&tiny_config(), 4, 6).unwrap();
        let opts = LossOptions {
            selection: TrainSelection::Predicted,
            m: 2,
            ..LossOptions::default()
        };
        assert!(model
            .loss_values(&example(), &opts)
            .unwrap()
            .total
            .is_finite());
    }

    #[test]
    fn backbone_param_partition() {
        let model = DialogueModel::new(&tiny_config(), 4, 6).unwrap();
        let total = model.backbone_params().len()
            + model.scenario.params().len()
            + model.bridging.params().len();
        assert_eq!(total, model.store.len());
        assert!(model
            .backbone_params()
            .iter()
            .all(|id| model.store.name(*id).starts_with("backbone.")));
    }

    #[test]
    fn ablation_labels() {
        assert_eq!(Ablation::default().label(), "full");
        assert_eq!(Ablation::BARE.label(), "w/o CSM, w/o IKB");
        assert_eq!(
            Ablation {
                drop_u: true,
                ..Ablation::default()
            }
            .label(),
            "-F_u"
        );
    }
}
