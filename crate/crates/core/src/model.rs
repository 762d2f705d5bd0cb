//! GPT-style backbone with multi-token prediction heads.
//!
//! Block layout (pre-norm, no attention output projection):
//!
//! ```text
//! a   = MHA(LN1(x)) + x
//! out = FFN(LN2(a)) + a,   FFN(z) = relu(z W1 + b1) W2 + b2
//! ```
//!
//! Step-1 logits always come from the shared output head `W_o`. Steps
//! `j = 2..K` use one of:
//!
//! * shared head + linear transfer: `(W_o h~) T_(j-1)` with `T` acting on logits,
//! * shared head + Transformer transfer: `W_o Stack_(j-1)(h~)`,
//! * independent heads: `h W_o^(j)`.
//!
//! With next-token injection, `h~ = h + k * W_t[u_(n+1)]` during training;
//! otherwise `h~ = h`. Inference only ever evaluates step-1 logits.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub const INIT_STD: f64 = 0.02;
pub const NTI_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArchitecture {
    SharedHeadTransfer,
    IndependentHeads,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferKind {
    /// `M x M` matrix acting on step-1 logits.
    Linear,
    /// Stack of pre-norm Transformer blocks acting on the hidden state.
    Transformer { depth: usize },
}

/// How a Transformer transfer block sees a single hidden vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferAttention {
    /// The hidden vector is a length-1 sequence; attention reduces to the
    /// value path.
    SinglePosition,
    /// The hidden vector is split into `dim / width` tokens of size `width`
    /// that attend to each other without a causal mask.
    DimensionTokens { width: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Number of predicted offsets `K`; 1 is plain next-token prediction.
    pub mtp_steps: usize,
    pub head_arch: HeadArchitecture,
    pub transfer: TransferKind,
    pub transfer_attention: TransferAttention,
    pub nti: bool,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// One-layer, one-head, next-token-only model.
    pub fn next_token(vocab_size: usize, dim: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            dim,
            depth: 1,
            heads: 1,
            mtp_steps: 1,
            head_arch: HeadArchitecture::SharedHeadTransfer,
            transfer: TransferKind::Linear,
            transfer_attention: TransferAttention::SinglePosition,
            nti: false,
            max_seq_len,
        }
    }

    pub fn with_mtp(mut self, steps: usize, transfer: TransferKind, nti: bool) -> Self {
        self.mtp_steps = steps;
        self.transfer = transfer;
        self.nti = nti;
        self
    }

    pub fn independent(mut self, steps: usize) -> Self {
        self.mtp_steps = steps;
        self.head_arch = HeadArchitecture::IndependentHeads;
        self.nti = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 2 || self.dim == 0 || self.depth == 0 || self.max_seq_len == 0 {
            return bad(format!("degenerate model config {self:?}"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.mtp_steps == 0 {
            return bad("mtp_steps must be >= 1".into());
        }
        if let TransferKind::Transformer { depth } = self.transfer {
            if depth == 0 {
                return bad("transformer transfer depth must be >= 1".into());
            }
        }
        if let TransferAttention::DimensionTokens { width } = self.transfer_attention {
            if width == 0 || !self.dim.is_multiple_of(width) {
                return bad(format!("dim {} not divisible by token width {width}", self.dim));
            }
        }
        if self.nti && self.head_arch == HeadArchitecture::IndependentHeads {
            return bad("next-token injection requires the shared-head architecture".into());
        }
        Ok(())
    }

    fn uses_transfer(&self) -> bool {
        self.mtp_steps >= 2 && self.head_arch == HeadArchitecture::SharedHeadTransfer
    }

    pub fn has_nti(&self) -> bool {
        self.nti && self.uses_transfer()
    }

    /// Width of the Transformer transfer blocks.
    fn transfer_width(&self) -> usize {
        match self.transfer_attention {
            TransferAttention::SinglePosition => self.dim,
            TransferAttention::DimensionTokens { width } => width,
        }
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (m, d) = (self.vocab_size, self.dim);
        let mut out = vec![
            ("tok_emb".to_string(), vec![m, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.depth {
            block_shapes(&format!("block{l}"), d, &mut out);
        }
        out.push(("head.out".into(), vec![d, m]));
        if self.mtp_steps >= 2 {
            match self.head_arch {
                HeadArchitecture::IndependentHeads => {
                    for j in 2..=self.mtp_steps {
                        out.push((format!("head{j}.out"), vec![d, m]));
                    }
                }
                HeadArchitecture::SharedHeadTransfer => {
                    for j in 1..self.mtp_steps {
                        match self.transfer {
                            TransferKind::Linear => out.push((format!("transfer{j}.matrix"), vec![m, m])),
                            TransferKind::Transformer { depth } => {
                                for l in 0..depth {
                                    block_shapes(&format!("transfer{j}.block{l}"), self.transfer_width(), &mut out);
                                }
                            }
                        }
                    }
                    if self.nti {
                        out.push(("nti.k".into(), vec![1]));
                    }
                }
            }
        }
        out
    }
}

fn block_shapes(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for (name, shape) in [
        ("ln1.gain", vec![d]),
        ("ln1.bias", vec![d]),
        ("attn.wq", vec![d, d]),
        ("attn.wk", vec![d, d]),
        ("attn.wv", vec![d, d]),
        ("ln2.gain", vec![d]),
        ("ln2.bias", vec![d]),
        ("ffn.w1", vec![d, 4 * d]),
        ("ffn.b1", vec![4 * d]),
        ("ffn.w2", vec![4 * d, d]),
        ("ffn.b2", vec![d]),
    ] {
        out.push((format!("{prefix}.{name}"), shape));
    }
}

fn initial_value(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let last = name.rsplit('.').next().unwrap_or(name);
    if last == "gain" {
        return Tensor::filled(shape, 1.0);
    }
    if name == "nti.k" {
        return Tensor::filled(shape, NTI_INIT);
    }
    if last.starts_with('b') && shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut rng = rng_from_seed(derive_seed(seed, name, 0));
    let numel: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
    if last == "matrix" {
        // Linear transfer starts near the identity.
        let m = shape[0];
        for i in 0..m {
            data[i * m + i] += 1.0;
        }
    }
    Tensor::new(shape, data).expect("shape")
}

/// Token ids of a right-padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Right-pad `seqs` with `pad` to the longest length.
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("empty batch or empty sequence".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn token(&self, b: usize, p: usize) -> usize {
        self.ids[b * self.len + p]
    }

    /// Targets `u_(n+offset)` for every position, `None` past each sequence.
    pub fn shifted_targets(&self, offset: usize) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.ids.len());
        for b in 0..self.batch {
            for p in 0..self.len {
                out.push((p + offset < self.lengths[b]).then(|| self.token(b, p + offset)));
            }
        }
        out
    }
}

/// Whether ground-truth continuations may be used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Tape handles produced by the backbone.
pub struct BackboneOutput {
    /// `[B, N, d]`.
    pub hidden: Var,
    /// Attention probabilities `[B, N, N]` per layer, per head.
    pub attention: Vec<Vec<Var>>,
}

/// Per-step losses on a tape.
pub struct LossOutput {
    pub total: Var,
    pub steps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtpModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    params: ParamStore,
}

impl MtpModel {
    /// Gaussian(0, 0.02) weights, zero biases, unit gains, identity-plus-noise
    /// linear transfers and `k = 1`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = initial_value(&name, &shape, seed);
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// All weights zero except LayerNorm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.require(name)
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Schema(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
            ));
        }
        *slot = t;
        Ok(())
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states with causal masking, shape `[B, N, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, batch: &TokenBatch) -> Result<BackboneOutput> {
        self.check_batch(batch)?;
        let (b, n, d) = (batch.batch, batch.len, self.config.dim);
        let tok = tape.embedding(p.var("tok_emb"), &batch.ids, &[b, n])?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(p.var("pos_emb"), &positions, &[n])?;
        let mut x = tape.add(tok, pos)?;
        let mut attention = Vec::with_capacity(self.config.depth);
        for l in 0..self.config.depth {
            let (y, probs) = block(tape, p, &format!("block{l}"), x, self.config.heads, true)?;
            x = y;
            attention.push(probs);
        }
        debug_assert_eq!(tape.value(x).shape(), &[b, n, d]);
        Ok(BackboneOutput { hidden: x, attention })
    }

    /// `h W_o`, shape `[B, N, M]`.
    pub fn step1_logits(&self, tape: &mut Tape, p: &BoundParams, hidden: Var) -> Result<Var> {
        tape.matmul(hidden, p.var("head.out"))
    }

    /// Logits for offset `step` (2..=K).
    pub fn mtp_logits(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        hidden: Var,
        batch: &TokenBatch,
        step: usize,
        mode: Mode,
        teacher_forcing: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        if step < 2 || step > cfg.mtp_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside 2..={}",
                cfg.mtp_steps
            )));
        }
        if teacher_forcing && mode == Mode::Inference {
            return Err(Error::InvalidArgument(
                "teacher forcing is only available during training".into(),
            ));
        }
        match cfg.head_arch {
            HeadArchitecture::IndependentHeads => tape.matmul(hidden, p.var(&format!("head{step}.out"))),
            HeadArchitecture::SharedHeadTransfer => {
                let h = if cfg.nti && teacher_forcing {
                    self.inject_next_token(tape, p, hidden, batch)?
                } else {
                    hidden
                };
                let j = step - 1;
                match cfg.transfer {
                    TransferKind::Linear => {
                        let logits = tape.matmul(h, p.var("head.out"))?;
                        tape.matmul(logits, p.var(&format!("transfer{j}.matrix")))
                    }
                    TransferKind::Transformer { depth } => {
                        let z = self.transfer_stack(tape, p, h, j, depth)?;
                        tape.matmul(z, p.var("head.out"))
                    }
                }
            }
        }
    }

    /// `h + k * W_t[u_(n+1)]`; positions without a successor get the pad row
    /// and are masked out of every loss that reads them.
    fn inject_next_token(&self, tape: &mut Tape, p: &BoundParams, hidden: Var, batch: &TokenBatch) -> Result<Var> {
        let (b, n) = (batch.batch, batch.len);
        let pad = self.config.vocab_size - 1;
        let mut next = Vec::with_capacity(b * n);
        for bi in 0..b {
            for pi in 0..n {
                next.push(if pi + 1 < n { batch.token(bi, pi + 1) } else { pad });
            }
        }
        let emb = tape.embedding(p.var("tok_emb"), &next, &[b, n])?;
        let scaled = tape.scale_by(emb, p.var("nti.k"))?;
        tape.add(hidden, scaled)
    }

    fn transfer_stack(&self, tape: &mut Tape, p: &BoundParams, h: Var, j: usize, depth: usize) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (tokens, width, causal) = match self.config.transfer_attention {
            TransferAttention::SinglePosition => (1, d, false),
            TransferAttention::DimensionTokens { width } => (d / width, width, false),
        };
        let mut z = tape.reshape(h, &[b * n, tokens, width])?;
        for l in 0..depth {
            z = block(tape, p, &format!("transfer{j}.block{l}"), z, 1, causal)?.0;
        }
        tape.reshape(z, &[b, n, d])
    }

    /// `l = sum_j l_j`, `l_j` the mean cross-entropy of step-`j` logits at
    /// positions `1..=N-j` against `u_(n+j)`.
    pub fn mtp_loss(&self, tape: &mut Tape, p: &BoundParams, batch: &TokenBatch) -> Result<LossOutput> {
        let out = self.forward(tape, p, batch)?;
        let mut steps = Vec::with_capacity(self.config.mtp_steps);
        let logits1 = self.step1_logits(tape, p, out.hidden)?;
        steps.push(tape.cross_entropy(logits1, &batch.shifted_targets(1))?);
        for j in 2..=self.config.mtp_steps {
            let logits = self.mtp_logits(tape, p, out.hidden, batch, j, Mode::Train, true)?;
            steps.push(tape.cross_entropy(logits, &batch.shifted_targets(j))?);
        }
        let mut total = steps[0];
        for &s in &steps[1..] {
            total = tape.add(total, s)?;
        }
        Ok(LossOutput { total, steps })
    }

    /// Step-1 logits at the last real position of every sequence.
    pub fn next_token_logits(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let batch = TokenBatch::new(seqs, self.config.vocab_size - 1)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, &batch)?;
        let logits = self.step1_logits(&mut tape, &p, out.hidden)?;
        let m = self.config.vocab_size;
        let data = tape.value(logits).data();
        Ok((0..batch.batch)
            .map(|b| {
                let row = b * batch.len + batch.lengths[b] - 1;
                data[row * m..(row + 1) * m].to_vec()
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            config: self.config,
            params: self.params.clone(),
        })
        .expect("checkpoint serializes")
    }

    /// Parse a checkpoint and check every parameter against the config.
    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.config.validate()?;
        let expected = ck.config.parameter_shapes();
        if expected.len() != ck.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, config implies {}",
                ck.params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let t = ck.params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "{name}: checkpoint shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: ck.config,
            params: ck.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// One pre-norm block over `x: [B, N, D]`; returns the output and the
/// attention probabilities of each head (empty for length-1 sequences).
fn block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let var = |name: &str| p.var(&format!("{prefix}.{name}"));
    let shape = tape.value(x).shape().to_vec();
    let (n, d) = (shape[1], shape[2]);
    let a = tape.layer_norm(x, var("ln1.gain"), var("ln1.bias"))?;
    let v = tape.matmul(a, var("attn.wv"))?;
    let mut probs = Vec::new();
    let mha = if n == 1 {
        // Softmax over a single key is exactly 1.
        v
    } else {
        let q = tape.matmul(a, var("attn.wq"))?;
        let k = tape.matmul(a, var("attn.wk"))?;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, h * dk, dk)?,
                    tape.slice(k, h * dk, dk)?,
                    tape.slice(v, h * dk, dk)?,
                )
            };
            let scores = tape.batch_matmul(qh, kh, true)?;
            let scores = tape.scale(scores, scale);
            let pr = if causal {
                tape.causal_row_softmax(scores)?
            } else {
                tape.row_softmax(scores)
            };
            probs.push(pr);
            outs.push(tape.batch_matmul(pr, vh, false)?);
        }
        if heads == 1 {
            outs[0]
        } else {
            tape.concat(&outs)?
        }
    };
    let r = tape.add(mha, x)?;
    let z = tape.layer_norm(r, var("ln2.gain"), var("ln2.bias"))?;
    let f = tape.matmul(z, var("ffn.w1"))?;
    let f = tape.add(f, var("ffn.b1"))?;
    let f = tape.relu(f);
    let f = tape.matmul(f, var("ffn.w2"))?;
    let f = tape.add(f, var("ffn.b2"))?;
    Ok((tape.add(f, r)?, probs))
}
