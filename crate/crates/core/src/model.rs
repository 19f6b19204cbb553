//! Tiny BERT-style encoder with a masked-token prediction head.
//!
//! Parameters live in one flat [`ParamVector`]; [`ParamLayout`] maps named
//! slots onto it in declaration order (embeddings, then each block in index
//! order, then the output head). Every flat vector in the crate (parameters,
//! gradients, Fisher weights) uses this order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradient, Scalar, Tape, Tensor, Var};
use crate::corpus::MaskedBatch;
use crate::error::{Error, Result};
use crate::rng::{RngStreams, Stream};

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const CLS: u32 = 3;
pub const N_SPECIAL: u32 = 4;

/// Upper bound on the parameter count of a valid config.
pub const MAX_PARAMS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("model.{name} must be positive")));
        }
        if self.vocab_size <= N_SPECIAL as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves no room beyond the {N_SPECIAL} special tokens",
                self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        match self.checked_param_count() {
            Some(n) if n <= MAX_PARAMS => Ok(()),
            _ => Err(Error::InvalidConfig(format!("model exceeds {MAX_PARAMS} parameters"))),
        }
    }

    /// Short hex digest identifying this configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        self.checked_param_count().expect("parameter count overflows usize")
    }

    fn checked_param_count(&self) -> Option<usize> {
        let (v, l, d, f) = (self.vocab_size, self.max_seq_len, self.d_model, self.d_ff);
        let embeddings = v.checked_mul(d)?.checked_add(l.checked_mul(d)?)?.checked_add(d.checked_mul(2)?)?;
        let dd = d.checked_mul(d)?;
        let df = d.checked_mul(f)?;
        let block = dd
            .checked_add(d)?
            .checked_mul(4)?
            .checked_add(d.checked_mul(4)?)?
            .checked_add(df.checked_mul(2)?)?
            .checked_add(f)?
            .checked_add(d)?;
        let head = v.checked_mul(d)?.checked_add(v)?;
        embeddings.checked_add(self.n_layers.checked_mul(block)?)?.checked_add(head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Embedding,
    Bias,
    Gain,
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Embeddings,
    Block(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
    pub region: Region,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Canonical placement of every named parameter in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (v, l, d, f) = (config.vocab_size, config.max_seq_len, config.d_model, config.d_ff);
        let mut layout = ParamLayout {
            slots: Vec::new(),
            len: 0,
        };
        let mut add = |name: String, shape: Vec<usize>, kind, region| {
            let len: usize = shape.iter().product();
            layout.slots.push(ParamSlot {
                name,
                offset: layout.len,
                shape,
                kind,
                region,
            });
            layout.len += len;
        };
        use SlotKind::*;
        add("tok_emb".into(), vec![v, d], Embedding, Region::Embeddings);
        add("pos_emb".into(), vec![l, d], Embedding, Region::Embeddings);
        add("emb_ln.gain".into(), vec![d], Gain, Region::Embeddings);
        add("emb_ln.bias".into(), vec![d], Bias, Region::Embeddings);
        for i in 0..config.n_layers {
            let r = Region::Block(i);
            for proj in ["q", "k", "v", "o"] {
                add(format!("block{i}.attn.w{proj}"), vec![d, d], Weight, r);
                add(format!("block{i}.attn.b{proj}"), vec![d], Bias, r);
            }
            add(format!("block{i}.ln1.gain"), vec![d], Gain, r);
            add(format!("block{i}.ln1.bias"), vec![d], Bias, r);
            add(format!("block{i}.ff.w1"), vec![d, f], Weight, r);
            add(format!("block{i}.ff.b1"), vec![f], Bias, r);
            add(format!("block{i}.ff.w2"), vec![f, d], Weight, r);
            add(format!("block{i}.ff.b2"), vec![d], Bias, r);
            add(format!("block{i}.ln2.gain"), vec![d], Gain, r);
            add(format!("block{i}.ln2.bias"), vec![d], Bias, r);
        }
        add("head.w".into(), vec![d, v], Weight, Region::Head);
        add("head.b".into(), vec![v], Bias, Region::Head);
        layout
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Flat indices belonging to `region`.
    pub fn indices(&self, pred: impl Fn(Region) -> bool) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| pred(s.region))
            .flat_map(|s| s.range())
            .collect()
    }
}

/// Flat model parameters tagged with the digest of the config that
/// interprets them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f32>,
    pub config_hash: String,
}

impl ParamVector {
    pub fn new(config: &ModelConfig, values: Vec<f32>) -> Result<Self> {
        let expected = config.param_count();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                what: "parameter vector vs config",
                left: values.len(),
                right: expected,
            });
        }
        Ok(Self {
            values,
            config_hash: config.digest(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.digest();
        if self.config_hash != expected || self.values.len() != config.param_count() {
            return Err(Error::IncompatibleCheckpoint {
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// Splits into per-slot tensors.
    pub fn unflatten(&self, layout: &ParamLayout) -> Vec<Tensor<f32>> {
        layout
            .slots()
            .iter()
            .map(|s| Tensor::new(s.shape.clone(), self.values[s.range()].to_vec()).expect("slot shape"))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(config: &ModelConfig, parts: &[Tensor<f32>]) -> Result<Self> {
        let values = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self::new(config, values)
    }
}

/// Deterministic initialization: uniform weights scaled by `1/sqrt(fan_in)`,
/// zero biases, unit layer-norm gains.
pub fn init_params(config: &ModelConfig) -> Result<ParamVector> {
    config.validate()?;
    let layout = ParamLayout::new(config);
    let mut streams = RngStreams::new(config.seed);
    let rng = streams.get(Stream::Init);
    let mut values = vec![0.0f32; layout.len()];
    for slot in layout.slots() {
        let dst = &mut values[slot.range()];
        match slot.kind {
            SlotKind::Bias => {}
            SlotKind::Gain => dst.fill(1.0),
            SlotKind::Weight | SlotKind::Embedding => {
                let fan_in = if slot.kind == SlotKind::Weight {
                    slot.shape[0]
                } else {
                    slot.shape[1]
                };
                let a = 1.0 / (fan_in as f32).sqrt();
                for x in dst.iter_mut() {
                    *x = rng.gen_range(-a..a);
                }
            }
        }
    }
    ParamVector::new(config, values)
}

/// The network bound to a configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
}

struct BlockVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2: (Var, Var),
}

/// Parameter leaves of one forward pass.
pub struct ModelVars {
    tok_emb: Var,
    pos_emb: Var,
    emb_ln: (Var, Var),
    blocks: Vec<BlockVars>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Result of encoding a batch on a tape.
pub struct Encoded {
    pub vars: ModelVars,
    /// Embedding output followed by every block output, each `[B*L, d]`.
    pub hidden: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        Ok(Self { config, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    fn check_batch(&self, batch: &MaskedBatch) -> Result<()> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "batch sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(&id) = batch.input_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records parameter leaves (at `offset` in the flat gradient) and the
    /// encoder forward pass.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[T],
        offset: usize,
        batch: &MaskedBatch,
    ) -> Result<Encoded> {
        if params.len() != self.layout.len() {
            return Err(Error::LengthMismatch {
                what: "parameters vs layout",
                left: params.len(),
                right: self.layout.len(),
            });
        }
        self.check_batch(batch)?;
        let leaves: Vec<Var> = self
            .layout
            .slots()
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), params[s.range()].to_vec()).expect("slot shape");
                tape.param(t, offset + s.offset)
            })
            .collect();
        let mut leaves = leaves.into_iter();
        let mut next = || leaves.next().expect("layout slot");
        let tok_emb = next();
        let pos_emb = next();
        let emb_ln = (next(), next());
        let blocks: Vec<BlockVars> = (0..self.config.n_layers)
            .map(|_| BlockVars {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1: (next(), next()),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2: (next(), next()),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        let vars = ModelVars {
            tok_emb,
            pos_emb,
            emb_ln,
            blocks,
            head_w,
            head_b,
        };

        let (b, l) = (batch.batch_size, batch.seq_len);
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let ids: Vec<usize> = batch.input_ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let tok = tape.gather_rows(vars.tok_emb, ids)?;
        let pos = tape.gather_rows(vars.pos_emb, positions)?;
        let sum = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(sum, vars.emb_ln.0, vars.emb_ln.1)?;
        let mut hidden = vec![x];
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for blk in &vars.blocks {
            let proj = |tape: &mut Tape<T>, w, bias| -> Result<Var> {
                let y = tape.matmul(x, w)?;
                tape.add_bias(y, bias)
            };
            let q = proj(tape, blk.wq, blk.bq)?;
            let k = proj(tape, blk.wk, blk.bk)?;
            let v = proj(tape, blk.wv, blk.bv)?;
            let q = tape.split_heads(q, b, l, h)?;
            let k = tape.split_heads(k, b, l, h)?;
            let v = tape.split_heads(v, b, l, h)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.mask_keys(scores, batch.attention_mask.clone(), h)?;
            let probs = tape.softmax(scores)?;
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = tape.merge_heads(ctx, b, l, h)?;
            let attn = tape.matmul(ctx, blk.wo)?;
            let attn = tape.add_bias(attn, blk.bo)?;
            let res = tape.add(x, attn)?;
            let x1 = tape.layer_norm(res, blk.ln1.0, blk.ln1.1)?;
            let ff = tape.matmul(x1, blk.w1)?;
            let ff = tape.add_bias(ff, blk.b1)?;
            let ff = tape.gelu(ff)?;
            let ff = tape.matmul(ff, blk.w2)?;
            let ff = tape.add_bias(ff, blk.b2)?;
            let res = tape.add(x1, ff)?;
            x = tape.layer_norm(res, blk.ln2.0, blk.ln2.1)?;
            hidden.push(x);
        }
        Ok(Encoded { vars, hidden })
    }

    /// Output-head logits at every masked position, `[M, V]`.
    pub fn masked_logits_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        encoded: &Encoded,
        batch: &MaskedBatch,
    ) -> Result<Var> {
        let rows = batch.flat_mask_positions();
        if rows.is_empty() {
            return Err(Error::NoMaskedPositions);
        }
        let last = *encoded.hidden.last().expect("at least the embedding output");
        let sel = tape.gather_rows(last, rows)?;
        let logits = tape.matmul(sel, encoded.vars.head_w)?;
        tape.add_bias(logits, encoded.vars.head_b)
    }

    /// Records the full masked-LM loss; returns the scalar loss node.
    pub fn mlm_loss_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[T],
        batch: &MaskedBatch,
    ) -> Result<Var> {
        if batch.masked_count() == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let encoded = self.encode(tape, params, 0, batch)?;
        let logits = self.masked_logits_on_tape(tape, &encoded, batch)?;
        let labels = batch.flat_labels().into_iter().map(|t| t as usize).collect();
        tape.cross_entropy(logits, labels)
    }

    /// Mean cross-entropy over masked positions evaluated in precision `T`.
    pub fn mlm_loss_in<T: Scalar>(&self, params: &[T], batch: &MaskedBatch) -> Result<T> {
        let mut tape = Tape::new();
        let loss = self.mlm_loss_on_tape(&mut tape, params, batch)?;
        Ok(tape.value(loss).item())
    }

    pub fn mlm_loss(&self, params: &ParamVector, batch: &MaskedBatch) -> Result<f32> {
        self.mlm_loss_in(&params.values, batch)
    }

    pub fn mlm_loss_and_gradient(&self, params: &ParamVector, batch: &MaskedBatch) -> Result<(f32, Gradient)> {
        let mut tape = Tape::new();
        let loss = self.mlm_loss_on_tape(&mut tape, &params.values, batch)?;
        let grad = tape.gradient(loss, self.layout.len())?;
        Ok((tape.value(loss).item(), Gradient(grad)))
    }

    /// Head logits at masked positions, `[M, V]`.
    pub fn masked_logits(&self, params: &ParamVector, batch: &MaskedBatch) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let encoded = self.encode(&mut tape, &params.values, 0, batch)?;
        let logits = self.masked_logits_on_tape(&mut tape, &encoded, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Gradient of the soft cross-entropy between `teacher_probs` and this
    /// model's masked-position predictions.
    pub fn distillation_loss_and_gradient(
        &self,
        params: &ParamVector,
        batch: &MaskedBatch,
        teacher_probs: &Tensor<f32>,
    ) -> Result<(f32, Gradient)> {
        let mut tape = Tape::new();
        let encoded = self.encode(&mut tape, &params.values, 0, batch)?;
        let logits = self.masked_logits_on_tape(&mut tape, &encoded, batch)?;
        if tape.value(logits).shape() != teacher_probs.shape() {
            return Err(Error::ShapeMismatch {
                op: "distillation",
                lhs: teacher_probs.shape().to_vec(),
                rhs: tape.value(logits).shape().to_vec(),
            });
        }
        let loss = tape.soft_cross_entropy(logits, teacher_probs.data().to_vec())?;
        let grad = tape.gradient(loss, self.layout.len())?;
        Ok((tape.value(loss).item(), Gradient(grad)))
    }

    /// Per-example concatenation of the mean-pooled embedding output and
    /// every block output; `(n_layers + 1) * d_model` values each.
    pub fn hidden_representations(&self, params: &ParamVector, batch: &MaskedBatch) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let encoded = self.encode(&mut tape, &params.values, 0, batch)?;
        let d = self.config.d_model;
        let mut reps = vec![Vec::with_capacity((self.config.n_layers + 1) * d); batch.batch_size];
        for &hv in &encoded.hidden {
            let pooled = tape.mean_pool_valid(hv, batch.attention_mask.clone(), batch.seq_len)?;
            for (rep, row) in reps.iter_mut().zip(tape.value(pooled).data().chunks(d)) {
                rep.extend_from_slice(row);
            }
        }
        Ok(reps)
    }

    /// Mean-pooled final hidden state per example, `d_model` values each.
    pub fn pooled_output(&self, params: &ParamVector, batch: &MaskedBatch) -> Result<Vec<Vec<f32>>> {
        let d = self.config.d_model;
        let reps = self.hidden_representations(params, batch)?;
        Ok(reps.into_iter().map(|r| r[r.len() - d..].to_vec()).collect())
    }
}
