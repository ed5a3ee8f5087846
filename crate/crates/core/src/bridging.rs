//! Intent-keyword bridging: fuse context and scenario vectors, predict the
//! keyword types and topics of the upcoming turns, select a subset, and
//! max-pool their embeddings into a two-row bridge state.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoded, EncoderState};
use crate::corpus::{KeywordInventory, TrainingExample};
use crate::error::{Error, Result};
use crate::nn::{normal_mat, Linear, INIT_STD};
use crate::tape::{logistic, Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Hard,
    Soft,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Hard => "hard",
            SelectionMode::Soft => "soft",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(SelectionMode::Hard),
            "soft" => Ok(SelectionMode::Soft),
            other => Err(Error::Config(format!(
                "mode must be `hard` or `soft`, got `{other}`"
            ))),
        }
    }
}

/// Independent per-label probabilities for each head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordDistribution {
    pub type_probs: Vec<f64>,
    pub topic_probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub id: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSelection {
    pub mode: SelectionMode,
    pub type_picks: Vec<Pick>,
    pub topic_picks: Vec<Pick>,
    /// Per head, whether the soft threshold selected nothing and the argmax
    /// was used instead.
    #[serde(default)]
    pub fallback: [bool; 2],
}

impl BridgeSelection {
    pub fn type_ids(&self) -> Vec<usize> {
        self.type_picks.iter().map(|p| p.id).collect()
    }

    pub fn topic_ids(&self) -> Vec<usize> {
        self.topic_picks.iter().map(|p| p.id).collect()
    }
}

fn sort_picks(picks: &mut [Pick]) {
    picks.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.id.cmp(&b.id)));
}

fn top_m(probs: &[f64], m: usize) -> Vec<Pick> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(m)
        .map(|id| Pick { id, weight: 1.0 })
        .collect()
}

/// The `m` most probable ids per head, ties to the lower id, weight 1.
pub fn select_hard(dist: &KeywordDistribution, m: usize) -> Result<BridgeSelection> {
    let cap = dist.type_probs.len().min(dist.topic_probs.len());
    if m == 0 || m > cap {
        return Err(Error::Validation(format!("m = {m} outside 1..={cap}")));
    }
    Ok(BridgeSelection {
        mode: SelectionMode::Hard,
        type_picks: top_m(&dist.type_probs, m),
        topic_picks: top_m(&dist.topic_probs, m),
        fallback: [false, false],
    })
}

fn threshold(probs: &[f64], delta: f64) -> (Vec<Pick>, bool) {
    let mut picks: Vec<Pick> = probs
        .iter()
        .enumerate()
        .filter(|(_, p)| **p >= delta)
        .map(|(id, &weight)| Pick { id, weight })
        .collect();
    let fallback = picks.is_empty();
    if fallback {
        picks = top_m(probs, 1);
        picks[0].weight = probs[picks[0].id];
    }
    sort_picks(&mut picks);
    (picks, fallback)
}

/// Every id with probability at least `delta`, weighted by that probability.
/// A head with no such id falls back to its argmax.
pub fn select_soft(dist: &KeywordDistribution, delta: f64) -> Result<BridgeSelection> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Validation(format!("delta = {delta} outside [0, 1]")));
    }
    if dist.type_probs.is_empty() || dist.topic_probs.is_empty() {
        return Err(Error::Validation(
            "keyword distribution has an empty head".into(),
        ));
    }
    let (type_picks, fa) = threshold(&dist.type_probs, delta);
    let (topic_picks, ft) = threshold(&dist.topic_probs, delta);
    Ok(BridgeSelection {
        mode: SelectionMode::Soft,
        type_picks,
        topic_picks,
        fallback: [fa, ft],
    })
}

/// Hard-mode selection of exactly the gold positives.
pub fn teacher_selection(example: &TrainingExample) -> Result<BridgeSelection> {
    let types = example.type_positives();
    let topics = example.topic_positives();
    if types.is_empty() || topics.is_empty() {
        return Err(Error::Validation(
            "keyword targets need at least one type and one topic positive".into(),
        ));
    }
    let picks = |ids: Vec<usize>| ids.into_iter().map(|id| Pick { id, weight: 1.0 }).collect();
    Ok(BridgeSelection {
        mode: SelectionMode::Hard,
        type_picks: picks(types),
        topic_picks: picks(topics),
        fallback: [false, false],
    })
}

/// Element-wise max over `weight · emb[id]` rows.
pub fn max_pool(picks: &[Pick], emb: &Mat) -> Result<Array1<f64>> {
    let Some(first) = picks.first() else {
        return Err(Error::Validation("cannot pool an empty selection".into()));
    };
    let check = |p: &Pick| {
        if p.id >= emb.nrows() {
            Err(Error::Validation(format!(
                "pick id {} outside table of {}",
                p.id,
                emb.nrows()
            )))
        } else {
            Ok(())
        }
    };
    check(first)?;
    let mut out = emb.row(first.id).mapv(|v| v * first.weight);
    for p in &picks[1..] {
        check(p)?;
        for (o, v) in out.iter_mut().zip(emb.row(p.id)) {
            *o = o.max(v * p.weight);
        }
    }
    Ok(out)
}

/// `[H^a; H^t]`, a `2 × d` matrix.
pub fn bridge_state(selection: &BridgeSelection, emb_a: &Mat, emb_t: &Mat) -> Result<Mat> {
    let a = max_pool(&selection.type_picks, emb_a)?;
    let t = max_pool(&selection.topic_picks, emb_t)?;
    if a.len() != t.len() {
        return Err(Error::Shape(format!(
            "type width {} != topic width {}",
            a.len(),
            t.len()
        )));
    }
    Ok(ndarray::stack(Axis(0), &[a.view(), t.view()]).expect("equal widths"))
}

/// Per-source projection plus a sigmoid gate scaled to `(0, 2)`, so the
/// zero-initialized gate starts at exactly 1.
#[derive(Clone, Debug)]
struct GatedSource {
    proj: Linear,
    gate: Linear,
}

impl GatedSource {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            gate: Linear::zeros(store, &format!("{name}.gate"), d, d),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.proj.forward(g, x);
        let z = self.gate.forward(g, x);
        let s = g.sigmoid(z);
        let s = g.scale(s, 2.0);
        g.mul(s, p)
    }
}

#[derive(Clone, Debug)]
pub struct BridgingModule {
    context: GatedSource,
    knowledge: GatedSource,
    profile: GatedSource,
    fusion_out: Linear,
    pub cls_a: Linear,
    pub cls_t: Linear,
    pub emb_a: ParamId,
    pub emb_t: ParamId,
    n_types: usize,
    n_topics: usize,
}

impl BridgingModule {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        n_types: usize,
        n_topics: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            context: GatedSource::new(store, "bridging.fusion.context", d, rng),
            knowledge: GatedSource::new(store, "bridging.fusion.knowledge", d, rng),
            profile: GatedSource::new(store, "bridging.fusion.profile", d, rng),
            fusion_out: Linear::new(store, "bridging.fusion.out", d, d, rng),
            cls_a: Linear::new(store, "bridging.cls_a", d, n_types, rng),
            cls_t: Linear::new(store, "bridging.cls_t", d, n_topics, rng),
            emb_a: store.add("bridging.emb_a", normal_mat(rng, n_types, d, INIT_STD)),
            emb_t: store.add("bridging.emb_t", normal_mat(rng, n_topics, d, INIT_STD)),
            n_types,
            n_topics,
        }
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn n_topics(&self) -> usize {
        self.n_topics
    }

    /// `out(tanh(Σ gate_s ⊙ proj_s(x_s)))` over the context mean, `f_k` and `f_u`.
    pub fn fuse_graph(&self, g: &mut Graph, context: &Encoded, f_k: Var, f_u: Var) -> Result<Var> {
        if !context.mask.iter().any(|m| *m) {
            return Err(Error::Validation("context encoding is fully masked".into()));
        }
        let mean = g.mean_rows(context.hidden, &context.mask);
        let c = self.context.forward(g, mean);
        let k = self.knowledge.forward(g, f_k);
        let u = self.profile.forward(g, f_u);
        let s = g.add(c, k);
        let s = g.add(s, u);
        let s = g.tanh(s);
        Ok(self.fusion_out.forward(g, s))
    }

    /// Head logits, types then topics, as one `1 × (x_a + x_t)` row.
    pub fn logits_graph(&self, g: &mut Graph, fused: Var) -> Var {
        let a = self.cls_a.forward(g, fused);
        let t = self.cls_t.forward(g, fused);
        g.concat_cols(&[a, t])
    }

    /// Max-pooled bridge rows inside the graph, so embeddings receive gradient.
    pub fn bridge_graph(&self, g: &mut Graph, selection: &BridgeSelection) -> Result<Var> {
        let mut rows = Vec::with_capacity(2);
        for (picks, table, n) in [
            (&selection.type_picks, self.emb_a, self.n_types),
            (&selection.topic_picks, self.emb_t, self.n_topics),
        ] {
            if picks.is_empty() {
                return Err(Error::Validation("cannot pool an empty selection".into()));
            }
            if let Some(p) = picks.iter().find(|p| p.id >= n) {
                return Err(Error::Validation(format!(
                    "pick id {} outside table of {n}",
                    p.id
                )));
            }
            let ids: Vec<usize> = picks.iter().map(|p| p.id).collect();
            let weights: Vec<f64> = picks.iter().map(|p| p.weight).collect();
            let t = g.param(table);
            let e = g.gather(t, &ids);
            let e = if weights.iter().all(|w| *w == 1.0) {
                e
            } else {
                g.scale_rows(e, &weights)
            };
            rows.push(g.max_rows(e));
        }
        Ok(g.concat_rows(&rows))
    }

    pub fn fuse(
        &self,
        store: &ParamStore,
        context: &EncoderState,
        f_k: &Array1<f64>,
        f_u: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new(store);
        let h = g.constant(context.hidden.clone());
        let k = g.constant(f_k.clone().insert_axis(Axis(0)));
        let u = g.constant(f_u.clone().insert_axis(Axis(0)));
        let fused = self.fuse_graph(
            &mut g,
            &Encoded {
                hidden: h,
                mask: context.mask.clone(),
            },
            k,
            u,
        )?;
        Ok(g.value(fused).row(0).to_owned())
    }

    pub fn predict_keywords(&self, store: &ParamStore, fused: &Array1<f64>) -> KeywordDistribution {
        let x = fused.clone().insert_axis(Axis(0));
        let a = self.cls_a.apply(store, &x);
        let t = self.cls_t.apply(store, &x);
        KeywordDistribution {
            type_probs: a.row(0).iter().map(|&z| logistic(z)).collect(),
            topic_probs: t.row(0).iter().map(|&z| logistic(z)).collect(),
        }
    }

    pub fn bridge_state(&self, store: &ParamStore, selection: &BridgeSelection) -> Result<Mat> {
        bridge_state(selection, store.get(self.emb_a), store.get(self.emb_t))
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for s in [&self.context, &self.knowledge, &self.profile] {
            v.extend(s.proj.params());
            v.extend(s.gate.params());
        }
        v.extend(self.fusion_out.params());
        v
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fusion_params();
        v.extend(self.cls_a.params());
        v.extend(self.cls_t.params());
        v.push(self.emb_a);
        v.push(self.emb_t);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub prob: f64,
    pub picked: bool,
}

/// Per-label dump of a prediction and its selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    #[serde(rename = "type")]
    pub types: Vec<LabelEntry>,
    #[serde(rename = "topic")]
    pub topics: Vec<LabelEntry>,
    pub fallback: [bool; 2],
}

impl PredictionDump {
    pub fn new(
        dist: &KeywordDistribution,
        selection: &BridgeSelection,
        inventory: &KeywordInventory,
    ) -> Self {
        let entries = |probs: &[f64], picks: &[Pick], name: &dyn Fn(usize) -> String| {
            probs
                .iter()
                .enumerate()
                .map(|(i, &prob)| LabelEntry {
                    name: name(i),
                    prob,
                    picked: picks.iter().any(|p| p.id == i),
                })
                .collect()
        };
        Self {
            types: entries(&dist.type_probs, &selection.type_picks, &|i| {
                inventory.type_name(i).to_string()
            }),
            topics: entries(&dist.topic_probs, &selection.topic_picks, &|i| {
                inventory.topic_name(i).to_string()
            }),
            fallback: selection.fallback,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dist(a: &[f64], t: &[f64]) -> KeywordDistribution {
        KeywordDistribution {
            type_probs: a.to_vec(),
            topic_probs: t.to_vec(),
        }
    }

    fn module(d: usize, xa: usize, xt: usize) -> (BridgingModule, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = BridgingModule::new(&mut store, d, xa, xt, &mut rng);
        (m, store)
    }

    #[test]
    fn hard_selection_examples() {
        let d = dist(&[0.1, 0.9, 0.5], &[0.3, 0.3, 0.3]);
        let s = select_hard(&d, 2).unwrap();
        assert_eq!(s.type_ids(), [1, 2]);
        assert_eq!(s.topic_ids(), [0, 1]);
        assert!(s.type_picks.iter().all(|p| p.weight == 1.0));
        assert_eq!(select_hard(&d, 3).unwrap().type_ids(), [1, 2, 0]);
        assert!(select_hard(&d, 0).is_err());
        assert!(select_hard(&d, 4).is_err());
    }

    #[test]
    fn soft_selection_examples() {
        let d = dist(&[0.1, 0.9, 0.5], &[0.05, 0.1, 0.15]);
        let s = select_soft(&d, 0.2).unwrap();
        assert_eq!(
            s.type_picks,
            [Pick { id: 1, weight: 0.9 }, Pick { id: 2, weight: 0.5 }]
        );
        assert_eq!(
            s.topic_picks,
            [Pick {
                id: 2,
                weight: 0.15
            }]
        );
        assert_eq!(s.fallback, [false, true]);
        assert_eq!(select_soft(&d, 0.0).unwrap().type_picks.len(), 3);
        assert!(select_soft(&d, 1.5).is_err());
        // threshold is inclusive
        assert_eq!(select_soft(&d, 0.5).unwrap().type_ids(), [1, 2]);
    }

    #[test]
    fn teacher_picks_gold_ids() {
        let mut targets = vec![0.0; 6 + 13];
        for i in [3, 5, 6 + 10, 6 + 12] {
            targets[i] = 1.0;
        }
        let ex = TrainingExample {
            knowledge_ids: vec![],
            profile_ids: vec![],
            context_ids: vec![],
            reference_ids: vec![],
            keyword_targets: targets,
            n_types: 6,
        };
        let s = teacher_selection(&ex).unwrap();
        assert_eq!(s.type_ids(), [3, 5]);
        assert_eq!(s.topic_ids(), [10, 12]);
        let none = TrainingExample {
            keyword_targets: vec![0.0; 19],
            ..ex
        };
        assert!(teacher_selection(&none).is_err());
    }

    #[test]
    fn pooling_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (n, d) = (rng.random_range(1..9), rng.random_range(1..7));
            let emb = Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            let k = rng.random_range(1..=n);
            let picks: Vec<Pick> = (0..k)
                .map(|_| Pick {
                    id: rng.random_range(0..n),
                    weight: rng.random_range(0.0..1.0),
                })
                .collect();
            let got = max_pool(&picks, &emb).unwrap();
            for j in 0..d {
                let mut best = f64::NEG_INFINITY;
                for p in &picks {
                    for (r, row) in emb.outer_iter().enumerate() {
                        if r == p.id {
                            best = best.max(p.weight * row[j]);
                        }
                    }
                }
                assert!((got[j] - best).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn dominant_row_wins_and_singleton_is_identity() {
        let emb = Mat::from_shape_vec((2, 3), vec![2.0, 3.0, 4.0, 1.0, 3.0, -1.0]).unwrap();
        let both = [Pick { id: 1, weight: 1.0 }, Pick { id: 0, weight: 1.0 }];
        assert_eq!(max_pool(&both, &emb).unwrap(), emb.row(0));
        assert_eq!(max_pool(&both[..1], &emb).unwrap(), emb.row(1));
        assert!(max_pool(&[], &emb).is_err());
    }

    #[test]
    fn graph_bridge_matches_plain() {
        let (m, store) = module(8, 5, 7);
        let sel = select_soft(
            &dist(
                &[0.9, 0.1, 0.6, 0.3, 0.2],
                &[0.4, 0.2, 0.7, 0.1, 0.9, 0.3, 0.25],
            ),
            0.25,
        )
        .unwrap();
        let plain = m.bridge_state(&store, &sel).unwrap();
        let mut g = Graph::new(&store);
        let v = m.bridge_graph(&mut g, &sel).unwrap();
        assert_eq!(g.value(v), &plain);
        assert_eq!(plain.dim(), (2, 8));
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = BridgingModule::new(&mut store, 4, 13, 20, &mut rng);
        m.cls_a = Linear::zeros(&mut store, "za", 4, 13);
        m.cls_t = Linear::zeros(&mut store, "zt", 4, 20);
        let p = m.predict_keywords(&store, &Array1::zeros(4));
        assert_eq!(p.type_probs.len(), 13);
        assert!(p.type_probs.iter().chain(&p.topic_probs).all(|&x| x == 0.5));
    }

    #[test]
    fn heads_match_affine_logistic_oracle() {
        let (mut m, mut store) = module(6, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in m.cls_a.params().into_iter().chain(m.cls_t.params()) {
            let (r, c) = store.get(id).dim();
            *store.get_mut(id) = Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        }
        m.n_types = 4;
        let x = Array1::from_shape_fn(6, |_| rng.random_range(-2.0..2.0));
        let p = m.predict_keywords(&store, &x);
        let w = store.get(m.cls_t.w);
        let b = store.get(m.cls_t.b);
        for o in 0..9 {
            let mut z = b[[0, o]];
            for i in 0..6 {
                z += x[i] * w[[i, o]];
            }
            assert!((p.topic_probs[o] - 1.0 / (1.0 + (-z).exp())).abs() <= 1e-6);
        }
    }

    #[test]
    fn fusion_at_init_is_projection_of_context_mean() {
        let (m, store) = module(5, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hidden = Mat::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let ctx = EncoderState {
            hidden: hidden.clone(),
            mask: vec![true, true, false],
        };
        let zero = Array1::zeros(5);
        let got = m.fuse(&store, &ctx, &zero, &zero).unwrap();

        let mean: Vec<f64> = (0..5)
            .map(|j| (hidden[[0, j]] + hidden[[1, j]]) / 2.0)
            .collect();
        let affine = |lin: &Linear, x: &[f64]| -> Vec<f64> {
            let (w, b) = (store.get(lin.w), store.get(lin.b));
            (0..5)
                .map(|o| b[[0, o]] + (0..5).map(|i| x[i] * w[[i, o]]).sum::<f64>())
                .collect()
        };
        let proj: Vec<f64> = affine(&m.context.proj, &mean)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let want = affine(&m.fusion_out, &proj);
        for j in 0..5 {
            assert!((got[j] - want[j]).abs() < 1e-12);
        }
        assert_eq!(got, m.fuse(&store, &ctx, &zero, &zero).unwrap());
        let masked = EncoderState {
            hidden,
            mask: vec![false; 3],
        };
        assert!(m.fuse(&store, &masked, &zero, &zero).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!(
            "soft".parse::<SelectionMode>().unwrap(),
            SelectionMode::Soft
        );
        assert!("medium".parse::<SelectionMode>().is_err());
    }

    #[test]
    fn dump_flags_picked_labels() {
        let inv = KeywordInventory::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into()])
            .unwrap();
        let d = dist(&[0.7, 0.1], &[0.1, 0.05]);
        let sel = select_soft(&d, 0.2).unwrap();
        let dump = PredictionDump::new(&d, &sel, &inv);
        assert!(dump.types[0].picked && !dump.types[1].picked);
        assert!(dump.topics[0].picked);
        assert_eq!(dump.fallback, [false, true]);
        let json = serde_json::to_value(&dump).unwrap();
        assert!(json.get("type").is_some() && json.get("topic").is_some());
    }
}
