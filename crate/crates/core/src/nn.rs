//! Parameterized building blocks shared by every model component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Graph, Mat, ParamId, ParamStore, Var};

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;

pub fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_std(store, name, d_in, d_out, rng, INIT_STD)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal_mat(rng, d_in, d_out, std));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, d_out)));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Mat::zeros((d_in, d_out)));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, d_out)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    /// Plain-matrix evaluation, for callers outside a graph.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.w)) + store.get(self.b).row(0)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::ones((1, d)));
        let beta = store.add(format!("{name}.beta"), Mat::zeros((1, d)));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Inverted dropout. Without an RNG it is the identity (eval mode).
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let (r, c) = g.shape(x);
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}
