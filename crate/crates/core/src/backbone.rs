//! Pre-norm transformer encoder–decoder with learned positions and a tied
//! output projection.
//!
//! The decoder takes its cross-attention memory and an additive logit bias
//! from the caller, which is how scenario bias and bridge rows reach it.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodeLimits, BOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{normal_mat, Dropout, LayerNorm, Linear, INIT_STD};
use crate::tape::{Graph, Mat, ParamId, ParamStore, Var, MASK_NEG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 128,
            vocab_size: 512,
            max_src_len: 128,
            max_tgt_len: 100,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn limits(&self) -> EncodeLimits {
        EncodeLimits {
            max_src_len: self.max_src_len,
            max_tgt_len: self.max_tgt_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_width", self.ffn_width),
            ("vocab_size", self.vocab_size),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Encoder output for one sequence. Padding rows are zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub hidden: Mat,
    pub mask: Vec<bool>,
}

impl EncoderState {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Graph-side encoder output.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    /// Multi-head attention of projected queries over projected keys/values.
    /// `mask` is additive, `n_q × n_k`.
    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mat, n_heads: usize) -> Var {
        let d = g.shape(q).1;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = g.constant(mask.clone());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let s = g.add(s, mask);
            let p = g.softmax_rows(s);
            heads.push(g.matmul(p, vh));
        }
        let cat = if n_heads == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.o.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, f, rng),
            down: Linear::new(store, &format!("{name}.down"), f, d, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, drop: &mut Dropout) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        let h = drop.apply(g, h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Per-layer key/value memo for incremental decoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub self_k: Option<Mat>,
    pub self_v: Option<Mat>,
    pub cross_k: Option<Mat>,
    pub cross_v: Option<Mat>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderCache {
    pub layers: Vec<LayerCache>,
    /// Number of positions already decoded.
    pub len: usize,
}

/// State after one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepState {
    pub last_hidden: Array1<f64>,
    pub cache: DecoderCache,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out_bias: ParamId,
}

fn key_mask(n_q: usize, key_valid: &[bool]) -> Mat {
    Mat::from_shape_fn((n_q, key_valid.len()), |(_, j)| {
        if key_valid[j] {
            0.0
        } else {
            MASK_NEG
        }
    })
}

impl Backbone {
    /// Registers backbone parameters in `store`, drawing from `rng`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = store.add(
            "backbone.tok_emb",
            normal_mat(rng, config.vocab_size, d, INIT_STD),
        );
        let enc_pos = store.add(
            "backbone.enc_pos",
            normal_mat(rng, config.max_src_len, d, INIT_STD),
        );
        let dec_pos = store.add(
            "backbone.dec_pos",
            normal_mat(rng, config.max_tgt_len, d, INIT_STD),
        );
        let enc_layers = (0..config.n_layers)
            .map(|i| {
                let n = format!("backbone.enc.{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{n}.ln_attn"), d),
                    attn: Attention::new(store, &format!("{n}.attn"), d, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, config.ffn_width, rng),
                }
            })
            .collect();
        let enc_ln = LayerNorm::new(store, "backbone.enc_ln", d);
        let dec_layers = (0..config.n_layers)
            .map(|i| {
                let n = format!("backbone.dec.{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d),
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, rng),
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, config.ffn_width, rng),
                }
            })
            .collect();
        let dec_ln = LayerNorm::new(store, "backbone.dec_ln", d);
        let out_bias = store.add("backbone.out_bias", Mat::zeros((1, config.vocab_size)));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            enc_pos,
            dec_pos,
            enc_layers,
            enc_ln,
            dec_layers,
            dec_ln,
            out_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tok_emb(&self) -> ParamId {
        self.tok_emb
    }

    pub fn encode_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        drop: &mut Dropout,
    ) -> Result<Encoded> {
        if tokens.is_empty() {
            return Err(Error::Shape("cannot encode an empty sequence".into()));
        }
        if tokens.len() > self.config.max_src_len {
            return Err(Error::Shape(format!(
                "input length {} exceeds max_src_len {}",
                tokens.len(),
                self.config.max_src_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let emb = g.param(self.tok_emb);
        let pos = g.param(self.enc_pos);
        let te = g.gather(emb, tokens);
        let pe = g.gather(pos, &positions);
        let mut x = g.add(te, pe);
        x = drop.apply(g, x);
        let attn_mask = key_mask(tokens.len(), &mask);
        for layer in &self.enc_layers {
            let h = layer.ln_attn.forward(g, x);
            let q = layer.attn.q.forward(g, h);
            let k = layer.attn.k.forward(g, h);
            let v = layer.attn.v.forward(g, h);
            let a = layer
                .attn
                .attend(g, q, k, v, &attn_mask, self.config.n_heads);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let h = layer.ln_ffn.forward(g, x);
            let f = layer.ffn.forward(g, h, drop);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        let out = self.enc_ln.forward(g, x);
        let keep: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let hidden = g.scale_rows(out, &keep);
        Ok(Encoded { hidden, mask })
    }

    /// Runs the decoder over `inputs` placed at positions `start..`.
    ///
    /// Without a cache, `start` must be 0 and self-attention is causal over
    /// `inputs`. With a cache, cached keys/values of earlier positions are
    /// reused and extended; cross-attention keys/values are computed once and
    /// memoized.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        inputs: &[usize],
        memory: Var,
        memory_mask: &[bool],
        mut cache: Option<&mut DecoderCache>,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let start = cache.as_ref().map_or(0, |c| c.len);
        let n = inputs.len();
        if n == 0 {
            return Err(Error::Shape(
                "decoder needs at least one input token".into(),
            ));
        }
        if start + n > self.config.max_tgt_len {
            return Err(Error::Shape(format!(
                "decoder position {} exceeds max_tgt_len {}",
                start + n,
                self.config.max_tgt_len
            )));
        }
        let (m_rows, m_cols) = g.shape(memory);
        if m_rows == 0 || m_rows != memory_mask.len() {
            return Err(Error::Shape(format!(
                "memory has {m_rows} rows but mask has {}",
                memory_mask.len()
            )));
        }
        if m_cols != self.config.d_model {
            return Err(Error::Shape(format!(
                "memory width {m_cols} != d_model {}",
                self.config.d_model
            )));
        }
        if let Some(&t) = inputs.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(c) = cache.as_deref_mut() {
            if c.layers.is_empty() {
                c.layers = vec![LayerCache::default(); self.dec_layers.len()];
            }
        }

        let positions: Vec<usize> = (start..start + n).collect();
        let emb = g.param(self.tok_emb);
        let pos = g.param(self.dec_pos);
        let te = g.gather(emb, inputs);
        let pe = g.gather(pos, &positions);
        let mut x = g.add(te, pe);
        x = drop.apply(g, x);

        let total = start + n;
        let causal = Mat::from_shape_fn(
            (n, total),
            |(i, j)| if j <= start + i { 0.0 } else { MASK_NEG },
        );
        let cross_mask = key_mask(n, memory_mask);

        for (li, layer) in self.dec_layers.iter().enumerate() {
            let h = layer.ln_self.forward(g, x);
            let q = layer.self_attn.q.forward(g, h);
            let k_new = layer.self_attn.k.forward(g, h);
            let v_new = layer.self_attn.v.forward(g, h);
            let (k, v) = match cache.as_deref_mut() {
                Some(c) => {
                    let lc = &mut c.layers[li];
                    let k_all = append_rows(&lc.self_k, g.value(k_new));
                    let v_all = append_rows(&lc.self_v, g.value(v_new));
                    lc.self_k = Some(k_all.clone());
                    lc.self_v = Some(v_all.clone());
                    if start == 0 {
                        (k_new, v_new)
                    } else {
                        (g.constant(k_all), g.constant(v_all))
                    }
                }
                None => (k_new, v_new),
            };
            let a = layer
                .self_attn
                .attend(g, q, k, v, &causal, self.config.n_heads);
            let a = drop.apply(g, a);
            x = g.add(x, a);

            let h = layer.ln_cross.forward(g, x);
            let q = layer.cross_attn.q.forward(g, h);
            let (k, v) = match cache.as_deref_mut() {
                Some(c) => {
                    let lc = &mut c.layers[li];
                    match (&lc.cross_k, &lc.cross_v) {
                        (Some(k), Some(v)) => {
                            let (k, v) = (k.clone(), v.clone());
                            (g.constant(k), g.constant(v))
                        }
                        _ => {
                            let k = layer.cross_attn.k.forward(g, memory);
                            let v = layer.cross_attn.v.forward(g, memory);
                            lc.cross_k = Some(g.value(k).clone());
                            lc.cross_v = Some(g.value(v).clone());
                            (k, v)
                        }
                    }
                }
                None => {
                    let k = layer.cross_attn.k.forward(g, memory);
                    let v = layer.cross_attn.v.forward(g, memory);
                    (k, v)
                }
            };
            let a = layer
                .cross_attn
                .attend(g, q, k, v, &cross_mask, self.config.n_heads);
            let a = drop.apply(g, a);
            x = g.add(x, a);

            let h = layer.ln_ffn.forward(g, x);
            let f = layer.ffn.forward(g, h, drop);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        if let Some(c) = cache {
            c.len = total;
        }
        Ok(self.dec_ln.forward(g, x))
    }

    /// `hidden · Eᵀ + output_bias`, with `E` the tied token embedding.
    pub fn logits_graph(&self, g: &mut Graph, hidden: Var) -> Var {
        let emb = g.param(self.tok_emb);
        let bias = g.param(self.out_bias);
        let l = g.matmul_t(hidden, emb);
        g.add_row(l, bias)
    }

    /// Eval-mode encoding of one sequence.
    pub fn encode(&self, store: &ParamStore, tokens: &[usize]) -> Result<EncoderState> {
        let mut g = Graph::new(store);
        let enc = self.encode_graph(&mut g, tokens, &mut Dropout::eval())?;
        Ok(EncoderState {
            hidden: g.value(enc.hidden).clone(),
            mask: enc.mask,
        })
    }

    /// Full (uncached) decode of `prefix`; returns the last position's logits
    /// plus `logit_bias`, and a cache primed with the whole prefix.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        prefix: &[usize],
        memory: &Mat,
        memory_mask: &[bool],
        logit_bias: Option<&Array1<f64>>,
    ) -> Result<(Array1<f64>, DecoderStepState)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::Shape("decoder prefix must start with <bos>".into()));
        }
        let mut cache = DecoderCache::default();
        let (logits, last_hidden) =
            self.decode_next(store, &mut cache, prefix, memory, memory_mask, logit_bias)?;
        Ok((logits, DecoderStepState { last_hidden, cache }))
    }

    /// Feeds `tokens` after whatever `cache` already holds and returns the
    /// last position's biased logits and hidden state.
    pub fn decode_next(
        &self,
        store: &ParamStore,
        cache: &mut DecoderCache,
        tokens: &[usize],
        memory: &Mat,
        memory_mask: &[bool],
        logit_bias: Option<&Array1<f64>>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        if let Some(b) = logit_bias {
            if b.len() != self.config.vocab_size {
                return Err(Error::Shape(format!(
                    "logit bias has {} entries, vocab is {}",
                    b.len(),
                    self.config.vocab_size
                )));
            }
            if !b.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("logit bias".into()));
            }
        }
        let mut g = Graph::new(store);
        let mem = g.constant(memory.clone());
        let h = self.decode_graph(
            &mut g,
            tokens,
            mem,
            memory_mask,
            Some(cache),
            &mut Dropout::eval(),
        )?;
        let last_row = g.shape(h).0 - 1;
        let last = g.value(h).row(last_row).to_owned();
        let lv = g.constant(last.clone().insert_axis(Axis(0)));
        let logits = self.logits_graph(&mut g, lv);
        let mut out = g.value(logits).row(0).to_owned();
        if let Some(b) = logit_bias {
            out += b;
        }
        Ok((out, last))
    }
}

fn append_rows(prev: &Option<Mat>, new: &Mat) -> Mat {
    match prev {
        Some(p) => ndarray::concatenate(Axis(0), &[p.view(), new.view()]).expect("matching widths"),
        None => new.clone(),
    }
}

/// Closed-form backbone parameter count for a config.
pub fn backbone_param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let f = c.ffn_width;
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let enc_layer = ln + attn + ln + ffn;
    let dec_layer = ln + attn + ln + attn + ln + ffn;
    c.vocab_size * d
        + c.max_src_len * d
        + c.max_tgt_len * d
        + c.n_layers * (enc_layer + dec_layer)
        + 2 * ln
        + c.vocab_size
}

/// Builds a standalone backbone with its own store, seeded from the config.
pub fn init_backbone(config: &ModelConfig) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bb = Backbone::new(config, &mut store, &mut rng)?;
    Ok((bb, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 32,
            vocab_size: 40,
            max_src_len: 24,
            max_tgt_len: 12,
            dropout: 0.0,
            seed: 3,
        }
    }

    fn param_total(store: &ParamStore) -> usize {
        store.iter().map(|(_, p)| p.value.len()).sum()
    }

    #[test]
    fn same_seed_same_weights() {
        let (_, a) = init_backbone(&small()).unwrap();
        let (_, b) = init_backbone(&small()).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let (_, c) = init_backbone(&ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.get(ParamId(0)), c.get(ParamId(0)));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let (_, store) = init_backbone(&cfg).unwrap();
        assert_eq!(param_total(&store), 215_552);
        assert_eq!(backbone_param_count(&cfg), 215_552);
        let (_, s) = init_backbone(&small()).unwrap();
        assert_eq!(param_total(&s), backbone_param_count(&small()));
    }

    #[test]
    fn head_split_must_divide() {
        let cfg = ModelConfig {
            d_model: 65,
            ..ModelConfig::default()
        };
        assert!(matches!(init_backbone(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_shapes_and_masks() {
        let cfg = ModelConfig {
            vocab_size: 50,
            ..ModelConfig::default()
        };
        let (bb, store) = init_backbone(&cfg).unwrap();
        let st = bb.encode(&store, &[5, 6, 7, 8, 9, 10, 11]).unwrap();
        assert_eq!(st.hidden.dim(), (7, 64));
        assert_eq!(st.n_valid(), 7);
        let padded = bb.encode(&store, &[5, 6, PAD, PAD]).unwrap();
        assert_eq!(padded.mask, [true, true, false, false]);
        assert!(padded.hidden.row(3).iter().all(|v| *v == 0.0));
        let all_pad = bb.encode(&store, &[PAD, PAD]).unwrap();
        assert_eq!(all_pad.n_valid(), 0);
        assert!(all_pad.hidden.iter().all(|v| v.is_finite()));
        assert!(bb.encode(&store, &[]).is_err());
        assert!(bb.encode(&store, &[50]).is_err());
        assert!(bb.encode(&store, &vec![5; 129]).is_err());
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let (bb, store) = init_backbone(&small()).unwrap();
        let a = bb.encode(&store, &[5, 6, 7]).unwrap();
        let b = bb.encode(&store, &[6, 5, 7]).unwrap();
        assert_ne!(a.hidden.row(2), b.hidden.row(2));
    }

    fn memory(bb: &Backbone, store: &ParamStore) -> EncoderState {
        bb.encode(store, &[5, 9, 12, 7]).unwrap()
    }

    #[test]
    fn bias_is_added_to_logits() {
        let (bb, store) = init_backbone(&small()).unwrap();
        let mem = memory(&bb, &store);
        let (plain, _) = bb
            .decode_step(&store, &[BOS, 6], &mem.hidden, &mem.mask, None)
            .unwrap();
        let zero = Array1::zeros(40);
        let (z, _) = bb
            .decode_step(&store, &[BOS, 6], &mem.hidden, &mem.mask, Some(&zero))
            .unwrap();
        assert_eq!(plain, z);
        let mut spike = Array1::zeros(40);
        spike[17] = 1e9;
        let (s, _) = bb
            .decode_step(&store, &[BOS, 6], &mem.hidden, &mem.mask, Some(&spike))
            .unwrap();
        let argmax = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 17);
        let probs = crate::tape::softmax_rows(&plain.clone().insert_axis(Axis(0)));
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        assert!(bb
            .decode_step(
                &store,
                &[BOS],
                &mem.hidden,
                &mem.mask,
                Some(&Array1::zeros(39))
            )
            .is_err());
        let mut nan = Array1::zeros(40);
        nan[0] = f64::NAN;
        assert!(bb
            .decode_step(&store, &[BOS], &mem.hidden, &mem.mask, Some(&nan))
            .is_err());
        assert!(bb
            .decode_step(&store, &[6], &mem.hidden, &mem.mask, None)
            .is_err());
    }

    #[test]
    fn extra_memory_rows_matter_unless_masked() {
        let (bb, store) = init_backbone(&small()).unwrap();
        let mem = memory(&bb, &store);
        let (base, _) = bb
            .decode_step(&store, &[BOS, 6], &mem.hidden, &mem.mask, None)
            .unwrap();
        let extra = normal_mat(&mut ChaCha8Rng::seed_from_u64(1), 2, 16, 1.0);
        let stacked = ndarray::concatenate(Axis(0), &[extra.view(), mem.hidden.view()]).unwrap();
        let mut mask = vec![true, true];
        mask.extend(&mem.mask);
        let (with, _) = bb
            .decode_step(&store, &[BOS, 6], &stacked, &mask, None)
            .unwrap();
        assert!((&with - &base).iter().any(|d| d.abs() > 1e-9));
        mask[0] = false;
        mask[1] = false;
        let (masked, _) = bb
            .decode_step(&store, &[BOS, 6], &stacked, &mask, None)
            .unwrap();
        assert!((&masked - &base).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn incremental_matches_full_decode() {
        let (bb, store) = init_backbone(&small()).unwrap();
        let mem = memory(&bb, &store);
        let seq = [BOS, 8, 13, 21, 4, EOS];
        let mut g = Graph::new(&store);
        let m = g.constant(mem.hidden.clone());
        let h = bb
            .decode_graph(&mut g, &seq, m, &mem.mask, None, &mut Dropout::eval())
            .unwrap();
        let full = bb.logits_graph(&mut g, h);
        let full = g.value(full).clone();

        let mut cache = DecoderCache::default();
        for (i, &t) in seq.iter().enumerate() {
            let (step, _) = bb
                .decode_next(&store, &mut cache, &[t], &mem.hidden, &mem.mask, None)
                .unwrap();
            for j in 0..40 {
                assert!((step[j] - full[[i, j]]).abs() < 1e-5, "position {i}");
            }
        }
        assert_eq!(cache.len, seq.len());
        // prefix priming then single steps
        let (_, mut st) = bb
            .decode_step(&store, &seq[..3], &mem.hidden, &mem.mask, None)
            .unwrap();
        let (l, _) = bb
            .decode_next(
                &store,
                &mut st.cache,
                &seq[3..4],
                &mem.hidden,
                &mem.mask,
                None,
            )
            .unwrap();
        for j in 0..40 {
            assert!((l[j] - full[[3, j]]).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_length_cap() {
        let (bb, store) = init_backbone(&small()).unwrap();
        let mem = memory(&bb, &store);
        let long = vec![BOS; 13];
        assert!(bb
            .decode_step(&store, &long, &mem.hidden, &mem.mask, None)
            .is_err());
    }
}
