//! Mini-batch training of [`MtpModel`]s.
//!
//! Each epoch shuffles the sequences, buckets them by length so padding stays
//! small, shuffles the bucket order and takes one optimizer step per batch.
//! All randomness comes from `derive_seed(seed, "shuffle", epoch)`, so a run
//! is reproducible bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MtpModel, TokenBatch};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Applied to matrices only; biases, gains and the injection scale are
    /// not decayed.
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        // lr = 0 is allowed: it freezes the parameters, which tests rely on.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("bad clip norm {c}")));
            }
        }
        Ok(())
    }
}

/// Mean losses of one epoch, weighted by sequences per batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    /// `l_1 .. l_K`.
    pub steps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: MtpModel,
    pub history: Vec<EpochStats>,
}

/// `epoch,total,l1,l2,...` with one row per epoch.
pub fn history_csv(history: &[EpochStats]) -> String {
    let k = history.first().map_or(1, |e| e.steps.len());
    let mut s = String::from("epoch,total");
    for j in 1..=k {
        write!(s, ",l{j}").unwrap();
    }
    s.push('\n');
    for e in history {
        write!(s, "{},{}", e.epoch, e.total).unwrap();
        for l in &e.steps {
            write!(s, ",{l}").unwrap();
        }
        s.push('\n');
    }
    s
}

struct Moments {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Moments {
    fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| p.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        Self {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

fn clip(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= c);
    }
}

fn step(params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut Moments, cfg: &TrainConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t);
    let bc2 = 1.0 - cfg.beta2.powi(state.t);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let wd = if decays(t.shape()) { cfg.weight_decay } else { 0.0 };
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in t.data_mut().iter_mut().zip(g) {
                    *p -= cfg.lr * (g + wd * *p);
                }
            }
            OptimizerKind::AdamW => {
                let m = state.m.get_mut(name).unwrap();
                let v = state.v.get_mut(name).unwrap();
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                    *p -= cfg.lr * (update + wd * *p);
                }
            }
        }
    }
}

/// Batches of sequence indices for one epoch.
fn epoch_batches(seqs: &[Vec<usize>], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "shuffle", epoch as u64));
    if cfg.shuffle {
        order.shuffle(&mut rng);
    }
    // Stable sort keeps the shuffled order within each length.
    order.sort_by_key(|&i| seqs[i].len());
    let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if cfg.shuffle {
        batches.shuffle(&mut rng);
    }
    batches
}

fn check_data(config: &ModelConfig, seqs: &[Vec<usize>]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::InvalidArgument(
                "training sequences need at least two tokens".into(),
            ));
        }
        if s.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: config.max_seq_len,
            });
        }
        if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Train a freshly initialised model.
pub fn train(config: ModelConfig, model_seed: u64, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = MtpModel::new(config, model_seed)?;
    train_model(model, seqs, cfg, |_| {})
}

/// Continue training `model`; `on_epoch` sees each epoch's statistics.
pub fn train_model(
    mut model: MtpModel,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(&model.config, seqs)?;
    let k = model.config.mtp_steps;
    let pad = model.config.vocab_size - 1;
    let mut state = Moments::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut total, mut steps, mut weight) = (0.0, vec![0.0; k], 0.0);
        for idx in epoch_batches(seqs, cfg, epoch) {
            let batch_seqs: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let batch = TokenBatch::new(&batch_seqs, pad)?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let loss = model.mtp_loss(&mut tape, &p, &batch)?;
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            tape.backward(loss.total)?;
            let mut grads = p.grads(&tape);
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            step(&mut model.params, &grads, &mut state, cfg);

            let w = idx.len() as f64;
            total += w * value;
            for (acc, s) in steps.iter_mut().zip(&loss.steps) {
                *acc += w * tape.value(*s).item();
            }
            weight += w;
        }
        let stats = EpochStats {
            epoch,
            total: total / weight,
            steps: steps.iter().map(|s| s / weight).collect(),
        };
        if !stats.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: stats.total,
            });
        }
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}
