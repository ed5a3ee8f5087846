//! Conversational scenario modeling: knowledge and profile encodings are
//! mean-pooled, passed through per-source perceptrons, summed, and projected
//! onto the vocabulary as an additive logit bias.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Encoded, EncoderState};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{normal_mat, Linear, INIT_STD};
use crate::tape::{softmax_rows, Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioSource {
    Knowledge,
    Profile,
}

/// Two-layer perceptron `d → d → d` with a tanh between.
#[derive(Clone, Debug)]
pub struct PoolMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl PoolMlp {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.tanh(h);
        self.out.forward(g, h)
    }
}

/// Pooled scenario vectors `F_k(H^k)` and `F_u(H^u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledScenario {
    pub f_k: Array1<f64>,
    pub f_u: Array1<f64>,
}

impl PooledScenario {
    pub fn zeros(d: usize) -> Self {
        Self {
            f_k: Array1::zeros(d),
            f_u: Array1::zeros(d),
        }
    }
}

/// Vocabulary bias: raw logits `s = B·(f_k + f_u)` and `softmax(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioBias {
    pub logits: Array1<f64>,
    pub normalized: Array1<f64>,
}

impl ScenarioBias {
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            logits: Array1::zeros(vocab_size),
            normalized: Array1::from_elem(vocab_size, 1.0 / vocab_size as f64),
        }
    }

    /// The `k` most probable tokens, highest first (ties by ascending id).
    pub fn top_k(&self, vocab: &Vocabulary, k: usize) -> Vec<BiasEntry> {
        let mut idx: Vec<usize> = (0..self.normalized.len()).collect();
        idx.sort_by(|&a, &b| {
            self.normalized[b]
                .total_cmp(&self.normalized[a])
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .take(k)
            .map(|i| BiasEntry {
                token: vocab.token(i).to_string(),
                prob: self.normalized[i],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasEntry {
    pub token: String,
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioModule {
    pub f_k: PoolMlp,
    pub f_u: PoolMlp,
    /// `B`, `|V| × d`.
    pub bias_proj: ParamId,
}

impl ScenarioModule {
    pub fn new(store: &mut ParamStore, d: usize, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            f_k: PoolMlp::new(store, "scenario.f_k", d, rng),
            f_u: PoolMlp::new(store, "scenario.f_u", d, rng),
            bias_proj: store.add(
                "scenario.bias_proj",
                normal_mat(rng, vocab_size, d, INIT_STD),
            ),
        }
    }

    fn mlp(&self, which: ScenarioSource) -> &PoolMlp {
        match which {
            ScenarioSource::Knowledge => &self.f_k,
            ScenarioSource::Profile => &self.f_u,
        }
    }

    /// Masked mean over rows followed by the source's perceptron; `1 × d`.
    pub fn pool_graph(&self, g: &mut Graph, enc: &Encoded, which: ScenarioSource) -> Result<Var> {
        if !enc.mask.iter().any(|m| *m) {
            return Err(Error::Validation(format!(
                "{which:?} encoding is fully masked"
            )));
        }
        let mean = g.mean_rows(enc.hidden, &enc.mask);
        Ok(self.mlp(which).forward(g, mean))
    }

    /// `B · x` for a `1 × d` row; returns `1 × |V|`.
    pub fn bias_graph(&self, g: &mut Graph, scenario_sum: Var) -> Var {
        let b = g.param(self.bias_proj);
        g.matmul_t(scenario_sum, b)
    }

    pub fn pool_scenario(
        &self,
        store: &ParamStore,
        enc: &EncoderState,
        which: ScenarioSource,
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new(store);
        let h = g.constant(enc.hidden.clone());
        let v = self.pool_graph(
            &mut g,
            &Encoded {
                hidden: h,
                mask: enc.mask.clone(),
            },
            which,
        )?;
        Ok(g.value(v).row(0).to_owned())
    }

    pub fn bias_matrix<'s>(&self, store: &'s ParamStore) -> &'s Mat {
        store.get(self.bias_proj)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for mlp in [&self.f_k, &self.f_u] {
            v.extend(mlp.hidden.params());
            v.extend(mlp.out.params());
        }
        v.push(self.bias_proj);
        v
    }
}

/// `logits = B·(f_k + f_u)`, `normalized = softmax(logits)`.
pub fn scenario_bias(pooled: &PooledScenario, bias_proj: &Mat) -> Result<ScenarioBias> {
    let d = bias_proj.ncols();
    if pooled.f_k.len() != d || pooled.f_u.len() != d {
        return Err(Error::Shape(format!(
            "pooled vectors have widths {} and {}, bias matrix expects {d}",
            pooled.f_k.len(),
            pooled.f_u.len()
        )));
    }
    if !pooled
        .f_k
        .iter()
        .chain(pooled.f_u.iter())
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("pooled scenario vector".into()));
    }
    let sum = &pooled.f_k + &pooled.f_u;
    let logits = bias_proj.dot(&sum);
    let normalized = softmax_rows(&logits.clone().insert_axis(Axis(0)))
        .row(0)
        .to_owned();
    Ok(ScenarioBias { logits, normalized })
}

/// Zeroes the knowledge and/or profile component.
pub fn ablate(pooled: &PooledScenario, drop_k: bool, drop_u: bool) -> PooledScenario {
    let zero = |v: &Array1<f64>| Array1::zeros(v.len());
    PooledScenario {
        f_k: if drop_k {
            zero(&pooled.f_k)
        } else {
            pooled.f_k.clone()
        },
        f_u: if drop_u {
            zero(&pooled.f_u)
        } else {
            pooled.f_u.clone()
        },
    }
}
