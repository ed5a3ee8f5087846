//! Joint optimization of the language-model and keyword losses.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::corpus::{DialogueSample, KeywordInventory, TrainingExample, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::DecodeSettings;
use crate::metrics::{evaluate_split, EvalReport, DEFAULT_STOPWORDS};
use crate::model::{DialogueModel, LossOptions, LossValues, TrainSelection};
use crate::nn::Dropout;
use crate::tape::{Gradients, Graph, Mat, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` means 5% of the total step count.
    pub warmup_steps: Option<usize>,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// From this epoch on, the bridge is built from the model's own top-`m`
    /// picks instead of the gold keywords.
    pub predicted_bridge_from_epoch: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 8,
            epochs: 50,
            warmup_steps: None,
            clip_norm: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            predicted_bridge_from_epoch: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("optimizer.{name} {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return field("clip_norm", "must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return field("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return field("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return field("eps", "must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    pub fn warmup(&self, n_train: usize) -> usize {
        let total = self.total_steps(n_train);
        let w = self
            .warmup_steps
            .unwrap_or_else(|| (total as f64 * 0.05).ceil() as usize);
        if total > 0 {
            w.min(total - 1)
        } else {
            0
        }
    }
}

/// Linear warmup to `base`, then constant. Steps count from 1.
pub fn learning_rate_at(step: usize, warmup: usize, base: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        base
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// First and second moment estimates, aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &DialogueModel) -> Self {
        let zeros: Vec<Mat> = model
            .store
            .iter()
            .map(|(_, p)| Mat::zeros(p.value.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Decoupled-weight-decay Adam update.
    pub fn step(
        &mut self,
        model: &mut DialogueModel,
        grads: &Gradients,
        lr: f64,
        cfg: &OptimizerConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = model.store.get_mut(id);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
                });
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss_lm: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    pub best_dev_loss: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_lm: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

pub struct Trainer {
    pub model: DialogueModel,
    pub adam: AdamState,
    pub state: TrainState,
    pub opt: OptimizerConfig,
    pub loss: LossOptions,
}

impl Trainer {
    pub fn new(model: DialogueModel, opt: OptimizerConfig, loss: LossOptions) -> Result<Self> {
        opt.validate()?;
        let adam = AdamState::new(&model);
        Ok(Self {
            model,
            adam,
            state: TrainState::default(),
            opt,
            loss,
        })
    }

    /// Restores a trainer from a checkpoint written by [`fit`]. A checkpoint
    /// without optimizer state starts a fresh optimizer at step 0.
    pub fn resume(ckpt: Checkpoint) -> Result<(Self, Vocabulary, KeywordInventory)> {
        let Checkpoint {
            meta,
            model,
            vocab,
            inventory,
            adam,
            state,
        } = ckpt;
        let mut trainer = Trainer::new(model, meta.optimizer, meta.loss)?;
        if let (Some(adam), Some(state)) = (adam, state) {
            trainer.adam = adam;
            trainer.state = state;
        }
        Ok((trainer, vocab, inventory))
    }

    fn loss_options_for_epoch(&self, epoch: usize) -> LossOptions {
        let mut l = self.loss;
        if self
            .opt
            .predicted_bridge_from_epoch
            .is_some_and(|e| epoch >= e)
        {
            l.selection = TrainSelection::Predicted;
        }
        l
    }

    /// Mean-over-batch gradients of the objective, before clipping.
    pub fn batch_gradients(
        &self,
        batch: &[&TrainingExample],
        loss: &LossOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Gradients, LossValues)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut grads = self.model.store.zeros_like();
        let mut sum = LossValues::default();
        for ex in batch {
            let mut drop = if self.model.config.dropout > 0.0 {
                Dropout::train(
                    self.model.config.dropout,
                    ChaCha8Rng::seed_from_u64(rng.random()),
                )
            } else {
                Dropout::eval()
            };
            let mut g = Graph::new(&self.model.store);
            let v = self.model.loss_graph(&mut g, ex, loss, &mut drop)?;
            let total = g.scalar(v.total);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {}: lm={} cls={:?} reference={:?}",
                    self.state.step + 1,
                    g.scalar(v.lm),
                    v.cls.map(|c| g.scalar(c)),
                    ex.reference_ids
                )));
            }
            g.backward_into(v.total, &mut grads);
            sum.lm += g.scalar(v.lm);
            sum.cls += v.cls.map_or(0.0, |c| g.scalar(c));
            sum.total += total;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok((
            grads,
            LossValues {
                lm: sum.lm / n,
                cls: sum.cls / n,
                total: sum.total / n,
            },
        ))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(
        &mut self,
        batch: &[&TrainingExample],
        warmup: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepLog> {
        let loss = self.loss_options_for_epoch(self.state.epoch);
        let (mut grads, values) = self.batch_gradients(batch, &loss, rng)?;
        let grad_norm = clip_global_norm(&mut grads, self.opt.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm at step {}",
                self.state.step + 1
            )));
        }
        self.state.step += 1;
        let lr = learning_rate_at(self.state.step, warmup, self.opt.learning_rate);
        self.adam.step(&mut self.model, &grads, lr, &self.opt);
        self.state.lr = lr;
        self.state.loss_lm = values.lm;
        self.state.loss_cls = values.cls;
        self.state.loss_total = values.total;
        Ok(StepLog {
            step: self.state.step,
            lr,
            loss_lm: values.lm,
            loss_cls: values.cls,
            loss_total: values.total,
            grad_norm,
        })
    }

    /// One pass over `train` in an order fixed by the seed and epoch number.
    pub fn run_epoch(
        &mut self,
        train: &[TrainingExample],
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let warmup = self.opt.warmup(train.len());
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.opt.seed ^ (self.state.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0;
        for chunk in order.chunks(self.opt.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let log = self.train_step(&batch, warmup, &mut rng)?;
            total += log.loss_total * batch.len() as f64;
            n += batch.len();
            on_step(&log)?;
        }
        self.state.epoch += 1;
        Ok(total / n as f64)
    }

    /// Mean eval-mode objective over `examples`.
    pub fn mean_loss(&self, examples: &[TrainingExample]) -> Result<LossValues> {
        mean_loss(&self.model, examples, &self.loss)
    }
}

pub fn mean_loss(
    model: &DialogueModel,
    examples: &[TrainingExample],
    loss: &LossOptions,
) -> Result<LossValues> {
    if examples.is_empty() {
        return Err(Error::Validation("no examples to score".into()));
    }
    let mut acc = LossValues::default();
    for ex in examples {
        let v = model.loss_values(ex, loss)?;
        acc.lm += v.lm;
        acc.cls += v.cls;
        acc.total += v.total;
    }
    let n = examples.len() as f64;
    Ok(LossValues {
        lm: acc.lm / n,
        cls: acc.cls / n,
        total: acc.total / n,
    })
}

/// Inputs to [`fit`].
pub struct FitData<'a> {
    pub train: &'a [TrainingExample],
    pub dev: &'a [TrainingExample],
    /// Raw dev samples for the closing evaluation; may be empty.
    pub dev_samples: &'a [DialogueSample],
    pub vocab: &'a Vocabulary,
    pub inventory: &'a KeywordInventory,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub dev_report: Option<EvalReport>,
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const DEV_REPORT: &str = "dev_report.json";

fn append_jsonl<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

/// Trains until `opt.epochs` epochs are complete, keeping the checkpoint
/// with the lowest dev loss under `out/best` and the latest under
/// `out/last`. A trainer restored from `out/last` resumes where it stopped.
pub fn fit(
    trainer: &mut Trainer,
    data: &FitData,
    out: &Path,
    eval: Option<DecodeSettings>,
    mut on_epoch: impl FnMut(&EpochLog, bool),
) -> Result<FitOutcome> {
    if data.train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let best = out.join(BEST_DIR);
    let last = out.join(LAST_DIR);
    let log_path = out.join(TRAIN_LOG);
    let epoch_path = out.join(EPOCH_LOG);
    let mut step_log = open_append(&log_path)?;
    let mut epoch_log = open_append(&epoch_path)?;
    let meta = CheckpointMeta::new(&trainer.model, trainer.loss, trainer.opt.clone());

    let save = |t: &Trainer, dir: &Path| {
        save_checkpoint(
            dir,
            &meta,
            &t.model,
            data.vocab,
            data.inventory,
            Some((&t.adam, &t.state)),
        )
    };
    if trainer.state.epoch == 0 && trainer.state.step == 0 {
        save(trainer, &last)?;
        if !best.exists() {
            save(trainer, &best)?;
        }
    }

    let mut epochs = Vec::new();
    while trainer.state.epoch < trainer.opt.epochs {
        let train_loss = trainer.run_epoch(data.train, |log| {
            append_jsonl(&mut step_log, &log_path, log)
        })?;
        let dev_loss = if data.dev.is_empty() {
            None
        } else {
            Some(trainer.mean_loss(data.dev)?.total)
        };
        let entry = EpochLog {
            epoch: trainer.state.epoch,
            step: trainer.state.step,
            train_loss,
            dev_loss,
        };
        append_jsonl(&mut epoch_log, &epoch_path, &entry)?;
        step_log
            .flush()
            .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        epoch_log
            .flush()
            .map_err(|e| Error::io(format!("writing {}", epoch_path.display()), e))?;
        let score = dev_loss.unwrap_or(train_loss);
        let improved = trainer.state.best_dev_loss.is_none_or(|b| score < b);
        if improved {
            trainer.state.best_dev_loss = Some(score);
            trainer.state.best_epoch = Some(trainer.state.epoch);
        }
        save(trainer, &last)?;
        if improved {
            save(trainer, &best)?;
        }
        on_epoch(&entry, improved);
        epochs.push(entry);
    }

    let dev_report = match eval {
        Some(settings) if !data.dev_samples.is_empty() => {
            let (report, _) = evaluate_split(
                &trainer.model,
                data.vocab,
                data.inventory,
                data.dev_samples,
                "dev",
                settings,
                DEFAULT_STOPWORDS,
            )?;
            let path = out.join(DEV_REPORT);
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(&path, text)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            Some(report)
        }
        _ => None,
    };
    Ok(FitOutcome {
        best,
        last,
        epochs,
        dev_report,
    })
}

/// Which part of the model a parameter belongs to, for stratified checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    BiasProjection,
    TypeEmbedding,
    TopicEmbedding,
    KnowledgeMlp,
    ProfileMlp,
    TypeHead,
    TopicHead,
    Fusion,
    Backbone,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::BiasProjection,
        ParamGroup::TypeEmbedding,
        ParamGroup::TopicEmbedding,
        ParamGroup::KnowledgeMlp,
        ParamGroup::ProfileMlp,
        ParamGroup::TypeHead,
        ParamGroup::TopicHead,
        ParamGroup::Fusion,
        ParamGroup::Backbone,
    ];

    pub fn of(name: &str) -> ParamGroup {
        match name {
            "scenario.bias_proj" => ParamGroup::BiasProjection,
            "bridging.emb_a" => ParamGroup::TypeEmbedding,
            "bridging.emb_t" => ParamGroup::TopicEmbedding,
            n if n.starts_with("scenario.f_k") => ParamGroup::KnowledgeMlp,
            n if n.starts_with("scenario.f_u") => ParamGroup::ProfileMlp,
            n if n.starts_with("bridging.cls_a") => ParamGroup::TypeHead,
            n if n.starts_with("bridging.cls_t") => ParamGroup::TopicHead,
            n if n.starts_with("bridging.fusion") => ParamGroup::Fusion,
            _ => ParamGroup::Backbone,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub group: ParamGroup,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Denominator floor for [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn batch_loss(model: &DialogueModel, batch: &[TrainingExample], loss: &LossOptions) -> Result<f64> {
    Ok(mean_loss(model, batch, loss)?.total)
}

/// Redraws per coordinate while the analytic gradient there is exactly zero,
/// e.g. embedding rows no example in the batch touches.
const LIVE_COORD_ATTEMPTS: usize = 16;

/// Compares analytic gradients of the mean batch objective with central
/// differences on `n_coords` coordinates, spread round-robin over every
/// parameter group present and preferring coordinates with a nonzero
/// analytic gradient.
pub fn grad_check(
    model: &mut DialogueModel,
    batch: &[TrainingExample],
    loss: &LossOptions,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut loss = *loss;
    loss.selection = TrainSelection::Teacher;
    let trainer_grads = {
        let refs: Vec<&TrainingExample> = batch.iter().collect();
        let mut grads = model.store.zeros_like();
        for ex in &refs {
            let mut g = Graph::new(&model.store);
            let v = model.loss_graph(&mut g, ex, &loss, &mut Dropout::eval())?;
            g.backward_into(v.total, &mut grads);
        }
        grads.scale(1.0 / refs.len().max(1) as f64);
        grads
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<(ParamGroup, Vec<ParamId>)> =
        ParamGroup::ALL.iter().map(|g| (*g, Vec::new())).collect();
    for id in model.store.ids() {
        let grp = ParamGroup::of(model.store.name(id));
        groups
            .iter_mut()
            .find(|(g, _)| *g == grp)
            .expect("known group")
            .1
            .push(id);
    }
    groups.retain(|(_, ids)| !ids.is_empty());

    let mut entries = Vec::with_capacity(n_coords);
    for k in 0..n_coords {
        let (group, ids) = &groups[k % groups.len()];
        let mut pick = || {
            let id = ids[rng.random_range(0..ids.len())];
            let (rows, cols) = model.store.get(id).dim();
            (id, rng.random_range(0..rows), rng.random_range(0..cols))
        };
        let mut coord = pick();
        for _ in 0..LIVE_COORD_ATTEMPTS {
            if trainer_grads.get(coord.0)[[coord.1, coord.2]] != 0.0 {
                break;
            }
            coord = pick();
        }
        let (id, r, c) = coord;
        let orig = model.store.get(id)[[r, c]];
        model.store.get_mut(id)[[r, c]] = orig + epsilon;
        let plus = batch_loss(model, batch, &loss);
        model.store.get_mut(id)[[r, c]] = orig - epsilon;
        let minus = batch_loss(model, batch, &loss);
        model.store.get_mut(id)[[r, c]] = orig;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let analytic = trainer_grads.get(id)[[r, c]];
        entries.push(GradCheckEntry {
            param: model.store.name(id).to_string(),
            group: *group,
            row: r,
            col: c,
            analytic,
            numeric,
            abs_error: (analytic - numeric).abs(),
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        max_rel_error,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::corpus::EOS;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            vocab_size: 24,
            max_src_len: 16,
            max_tgt_len: 8,
            dropout: 0.0,
            seed: 2,
        }
    }

    fn examples() -> Vec<TrainingExample> {
        (0..3)
            .map(|i| {
                let mut t = vec![0.0; 3 + 4];
                t[i % 3] = 1.0;
                t[3 + (i + 1) % 4] = 1.0;
                TrainingExample {
                    knowledge_ids: vec![5 + i, 6, 4],
                    profile_ids: if i == 0 { vec![] } else { vec![9, 10, 4] },
                    context_ids: vec![4, 11 + i, 12, 4, 13],
                    reference_ids: vec![14 + i, 15, EOS],
                    keyword_targets: t,
                    n_types: 3,
                }
            })
            .collect()
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        for s in 1..=10 {
            assert!((learning_rate_at(s, 10, 3e-5) - 3e-5 * s as f64 / 10.0).abs() <= 1e-12);
        }
        assert_eq!(learning_rate_at(11, 10, 3e-5), 3e-5);
        assert_eq!(learning_rate_at(1, 0, 3e-5), 3e-5);
        let o = OptimizerConfig {
            epochs: 10,
            batch_size: 8,
            ..OptimizerConfig::default()
        };
        assert_eq!(o.total_steps(80), 100);
        assert_eq!(o.warmup(80), 5);
    }

    #[test]
    fn clipping_scales_to_limit() {
        let model = DialogueModel::new(&config(), 3, 4).unwrap();
        let mut g = model.store.zeros_like();
        g.get_mut(ParamId(0))[[0, 0]] = 6.0;
        g.get_mut(ParamId(1))[[0, 0]] = 8.0;
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
        let mut h = g.clone();
        clip_global_norm(&mut h, f64::INFINITY);
        assert_eq!(h.get(ParamId(0)), g.get(ParamId(0)));
    }

    #[test]
    fn infinite_clip_matches_unclipped_update() {
        let exs = examples();
        let refs: Vec<&TrainingExample> = exs.iter().collect();
        let model = DialogueModel::new(&config(), 3, 4).unwrap();
        let opt = OptimizerConfig {
            clip_norm: f64::INFINITY,
            learning_rate: 1e-2,
            ..OptimizerConfig::default()
        };
        let mut t = Trainer::new(model.clone(), opt.clone(), LossOptions::default()).unwrap();
        t.train_step(&refs, 0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();

        let mut reference = model;
        let mut adam = AdamState::new(&reference);
        let mut grads = reference.store.zeros_like();
        for ex in &refs {
            let mut g = Graph::new(&reference.store);
            let v = reference
                .loss_graph(&mut g, ex, &LossOptions::default(), &mut Dropout::eval())
                .unwrap();
            g.backward_into(v.total, &mut grads);
        }
        grads.scale(1.0 / 3.0);
        adam.step(&mut reference, &grads, 1e-2, &opt);
        for ((_, a), (_, b)) in t.model.store.iter().zip(reference.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn loss_decreases_on_tiny_batch() {
        let exs = examples();
        let model = DialogueModel::new(&config(), 3, 4).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 1e-2,
            batch_size: 3,
            epochs: 1,
            warmup_steps: Some(0),
            ..OptimizerConfig::default()
        };
        let mut t = Trainer::new(model, opt, LossOptions::default()).unwrap();
        let start = t.mean_loss(&exs).unwrap().total;
        for _ in 0..30 {
            t.run_epoch(&exs, |_| Ok(())).unwrap();
        }
        let end = t.mean_loss(&exs).unwrap().total;
        assert!(end < 0.5 * start, "{start} -> {end}");
        assert_eq!(t.state.step, 30);
        assert_eq!(t.state.epoch, 30);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = DialogueModel::new(&config(), 3, 4).unwrap();
        let report = grad_check(
            &mut model,
            &examples(),
            &LossOptions::default(),
            1e-5,
            36,
            1,
        )
        .unwrap();
        let groups: std::collections::HashSet<ParamGroup> =
            report.entries.iter().map(|e| e.group).collect();
        assert_eq!(groups.len(), ParamGroup::ALL.len());
        assert!(report.max_rel_error <= 1e-4, "{report:#?}");
    }

    #[test]
    fn invalid_optimizer_config_names_field() {
        let o = OptimizerConfig {
            batch_size: 0,
            ..OptimizerConfig::default()
        };
        let msg = o.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size"));
    }
}
