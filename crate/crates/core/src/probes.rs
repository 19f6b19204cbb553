//! Synthetic downstream probes, the mutual-information probe and
//! domain-shift evaluation.
//!
//! A probe task labels each token row by whether a designated token occurs
//! more often than its median count. Source and target variants share one
//! [`LabelRule`] and differ only in the domain their rows come from.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::corpus::{generate_domain, pack_sequences, Domain, DomainSpec, MaskedBatch, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector, N_SPECIAL};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::trainer::DivergenceGuard;

/// Candidate tokens drawn when fitting a label rule.
pub const LABEL_RULE_ATTEMPTS: usize = 10;
/// Smallest acceptable minority-class share.
pub const MIN_MINORITY: f64 = 0.2;
/// Rows per forward pass when extracting features.
const FEATURE_BATCH: usize = 64;

/// `label = 1` iff `token` occurs more than `threshold` times in the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub token: u32,
    pub threshold: usize,
}

impl LabelRule {
    pub fn count(&self, row: &[u32]) -> usize {
        row.iter().filter(|&&t| t == self.token).count()
    }

    pub fn label(&self, row: &[u32]) -> usize {
        usize::from(self.count(row) > self.threshold)
    }

    /// Share of rows labelled 1.
    pub fn positive_rate(&self, rows: &[Vec<u32>]) -> f64 {
        rows.iter().map(|r| self.label(r)).sum::<usize>() as f64 / rows.len() as f64
    }

    /// Draws candidate tokens weighted by frequency, thresholds each at
    /// its median count, and keeps the most balanced candidate. Fails if
    /// none leaves at least [`MIN_MINORITY`] in the smaller class.
    pub fn fit<R: Rng>(rows: &[Vec<u32>], rng: &mut R) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("probe rows"));
        }
        let max_id = rows.iter().flatten().copied().max().unwrap_or(0) as usize;
        let mut freq = vec![0usize; max_id + 1];
        for &t in rows.iter().flatten() {
            if t >= N_SPECIAL {
                freq[t as usize] += 1;
            }
        }
        let dist = WeightedIndex::new(&freq).map_err(|_| Error::Empty("regular tokens"))?;
        let mut best: Option<(f64, LabelRule)> = None;
        for _ in 0..LABEL_RULE_ATTEMPTS {
            let token = dist.sample(rng) as u32;
            let mut counts: Vec<usize> = rows.iter().map(|r| r.iter().filter(|&&t| t == token).count()).collect();
            counts.sort_unstable();
            let rule = LabelRule {
                token,
                threshold: counts[(counts.len() - 1) / 2],
            };
            let p = rule.positive_rate(rows);
            let minority = p.min(1.0 - p);
            if minority >= MIN_MINORITY && best.as_ref().is_none_or(|(m, _)| minority > *m) {
                best = Some((minority, rule));
            }
        }
        best.map(|(_, r)| r).ok_or(Error::DegenerateLabels(LABEL_RULE_ATTEMPTS))
    }
}

/// Labelled rows of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub domain: Domain,
    pub rule: LabelRule,
    pub seq_len: usize,
    pub train_rows: Vec<Vec<u32>>,
    pub train_labels: Vec<usize>,
    pub test_rows: Vec<Vec<u32>>,
    pub test_labels: Vec<usize>,
    pub seed: u64,
}

impl ProbeTask {
    /// Replaces the labels (for chance-level controls).
    pub fn with_labels(mut self, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        if train.len() != self.train_rows.len() || test.len() != self.test_rows.len() {
            return Err(Error::LengthMismatch {
                what: "labels vs rows",
                left: train.len() + test.len(),
                right: self.train_rows.len() + self.test_rows.len(),
            });
        }
        self.train_labels = train;
        self.test_labels = test;
        Ok(self)
    }
}

/// Builds a labelled task from fresh rows of `spec`.
///
/// With `rule = None` the rule is fitted on the new training rows; passing
/// the rule of another task yields its counterpart in this domain.
pub fn make_probe_task(
    spec: &DomainSpec,
    kind: Domain,
    n_train: usize,
    n_test: usize,
    seq_len: usize,
    seed: u64,
    rule: Option<LabelRule>,
) -> Result<ProbeTask> {
    if n_train + n_test < 100 || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(format!(
            "probe tasks need at least 100 examples split across train and test, got {n_train}+{n_test}"
        )));
    }
    let row_seed = derive_seed(seed, &format!("probe-rows-{}", kind.name()));
    let sampler = DomainSpec {
        seed: row_seed,
        ..spec.clone()
    };
    let stream = generate_domain(&sampler, (n_train + n_test) * seq_len, kind, Split::Train)?;
    let mut rows = pack_sequences(&stream, seq_len);
    let test_rows = rows.split_off(n_train);
    let train_rows = rows;
    let rule = match rule {
        Some(r) => r,
        None => LabelRule::fit(&train_rows, &mut stream_rng(seed, "probe-label-rule"))?,
    };
    Ok(ProbeTask {
        domain: kind,
        rule,
        seq_len,
        train_labels: train_rows.iter().map(|r| rule.label(r)).collect(),
        test_labels: test_rows.iter().map(|r| rule.label(r)).collect(),
        train_rows,
        test_rows,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Train the encoder jointly with the head.
    #[serde(default)]
    pub finetune_encoder: bool,
    /// Share of the training rows used.
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    64
}

fn default_steps() -> usize {
    500
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    3e-3
}

fn default_fraction() -> f64 {
    1.0
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_dim: default_hidden(),
            steps: default_steps(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            finetune_encoder: false,
            train_fraction: default_fraction(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("probe hidden_dim, steps and batch_size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "probe train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    fn train_count(&self, n: usize) -> usize {
        ((n as f64 * self.train_fraction).ceil() as usize).clamp(1, n)
    }
}

/// Two-layer classifier `softmax(tanh(x W1 + b1) W2 + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    /// `W1 [in, hidden]`, `b1`, `W2 [hidden, classes]`, `b2`, flattened.
    pub params: Vec<f32>,
}

impl ProbeHead {
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(Self::len_for(input_dim, hidden_dim, classes));
        let a1 = 1.0 / (input_dim as f32).sqrt();
        params.extend((0..input_dim * hidden_dim).map(|_| rng.gen_range(-a1..a1)));
        params.extend(std::iter::repeat_n(0.0, hidden_dim));
        let a2 = 1.0 / (hidden_dim as f32).sqrt();
        params.extend((0..hidden_dim * classes).map(|_| rng.gen_range(-a2..a2)));
        params.extend(std::iter::repeat_n(0.0, classes));
        Self {
            input_dim,
            hidden_dim,
            classes,
            params,
        }
    }

    fn len_for(i: usize, h: usize, k: usize) -> usize {
        i * h + h + h * k + k
    }

    /// Records the head on `tape` with its leaves at `offset`; returns the
    /// `[rows, classes]` logits.
    fn logits_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, params: &[T], offset: usize, x: Var) -> Result<Var> {
        let (i, h, k) = (self.input_dim, self.hidden_dim, self.classes);
        let mut at = 0;
        let mut leaf = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, params[at..at + n].to_vec()).expect("head slot");
            let v = tape.param(t, offset + at);
            at += n;
            v
        };
        let (w1, b1, w2, b2) = (leaf(vec![i, h]), leaf(vec![h]), leaf(vec![h, k]), leaf(vec![k]));
        let z = tape.matmul(x, w1)?;
        let z = tape.add_bias(z, b1)?;
        let z = tape.tanh(z)?;
        let z = tape.matmul(z, w2)?;
        tape.add_bias(z, b2)
    }

    /// Per-row log class probabilities.
    pub fn log_probs(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(feature_tensor(features, self.input_dim)?);
        let z = self.logits_on_tape(&mut tape, &self.params, 0, x)?;
        let logits = tape.value(z);
        Ok(logits
            .data()
            .chunks(self.classes)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter().map(|v| v - lse).collect()
            })
            .collect())
    }

    /// Accuracy and mean log-likelihood of the true labels.
    pub fn score(&self, features: &[Vec<f32>], labels: &[usize]) -> Result<(f64, f64)> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::LengthMismatch {
                what: "features vs labels",
                left: features.len(),
                right: labels.len(),
            });
        }
        let lp = self.log_probs(features)?;
        let mut correct = 0usize;
        let mut ll = 0.0;
        for (row, &y) in lp.iter().zip(labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += usize::from(pred == y);
            ll += row[y];
        }
        let n = labels.len() as f64;
        Ok((correct as f64 / n, ll / n))
    }
}

fn feature_tensor(features: &[Vec<f32>], dim: usize) -> Result<Tensor<f32>> {
    if features.is_empty() {
        return Err(Error::Empty("features"));
    }
    let mut data = Vec::with_capacity(features.len() * dim);
    for f in features {
        if f.len() != dim {
            return Err(Error::LengthMismatch {
                what: "feature dimension",
                left: f.len(),
                right: dim,
            });
        }
        data.extend_from_slice(f);
    }
    Tensor::new(vec![features.len(), dim], data)
}

/// Held-out result of a trained probe head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub head: ProbeHead,
    pub accuracy: f64,
    /// Mean `log P(y | features)` on the test rows, in nats.
    pub mean_log_likelihood: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&y) => Err(Error::InvalidConfig(format!("label {y} outside {classes} classes"))),
        None => Ok(()),
    }
}

fn probe_rng(config: &ProbeConfig) -> ChaCha8Rng {
    stream_rng(config.seed, Stream::Probe.name())
}

/// Trains a head on fixed features and scores it on the test features.
pub fn train_head(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeFit> {
    config.validate()?;
    if train_x.len() != train_y.len() || train_x.is_empty() {
        return Err(Error::LengthMismatch {
            what: "train features vs labels",
            left: train_x.len(),
            right: train_y.len(),
        });
    }
    check_labels(train_y, classes)?;
    check_labels(test_y, classes)?;
    let n = config.train_count(train_x.len());
    let (train_x, train_y) = (&train_x[..n], &train_y[..n]);
    let dim = train_x[0].len();
    let mut rng = probe_rng(config);
    let mut head = ProbeHead::init(dim, config.hidden_dim, classes, &mut rng);
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: config.learning_rate,
            warmup_steps: 0,
        },
        head.params.len(),
    )?;
    let mut guard = DivergenceGuard::new();
    let bs = config.batch_size.min(n);
    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let xs: Vec<Vec<f32>> = idx.iter().map(|&i| train_x[i].clone()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(feature_tensor(&xs, dim)?);
        let z = head.logits_on_tape(&mut tape, &head.params, 0, x)?;
        let loss = tape.cross_entropy(z, ys)?;
        guard.observe(step, tape.value(loss).item() as f64)?;
        let grad = tape.gradient(loss, head.params.len())?;
        opt.step(&mut head.params, &grad)?;
    }
    let (accuracy, mean_log_likelihood) = head.score(test_x, test_y)?;
    Ok(ProbeFit {
        head,
        accuracy,
        mean_log_likelihood,
        n_train: n,
        n_test: test_y.len(),
    })
}

fn batches(rows: &[Vec<u32>], seq_len: usize) -> impl Iterator<Item = Result<MaskedBatch>> + '_ {
    rows.chunks(FEATURE_BATCH).map(move |c| MaskedBatch::unmasked(c, seq_len))
}

/// Mean-pooled final hidden state of every row.
pub fn pooled_features(model: &Model, params: &ParamVector, rows: &[Vec<u32>], seq_len: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(rows.len());
    for b in batches(rows, seq_len) {
        out.extend(model.pooled_output(params, &b?)?);
    }
    Ok(out)
}

/// Concatenated per-layer pooled representations of every row.
pub fn representations(model: &Model, params: &ParamVector, rows: &[Vec<u32>], seq_len: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(rows.len());
    for b in batches(rows, seq_len) {
        out.extend(model.hidden_representations(params, &b?)?);
    }
    Ok(out)
}

/// Encoder and head after downstream finetuning.
#[derive(Debug, Clone)]
pub struct FinetunedProbe {
    pub encoder: ParamVector,
    pub head: ProbeHead,
    pub rule: LabelRule,
    pub accuracy: f64,
    pub mean_log_likelihood: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains a downstream head on `task` over the encoder's pooled output and
/// reports test accuracy. The encoder stays frozen unless
/// `config.finetune_encoder` is set.
pub fn finetune_probe(model: &Model, params: &ParamVector, task: &ProbeTask, config: &ProbeConfig) -> Result<FinetunedProbe> {
    config.validate()?;
    params.check_compatible(&model.config)?;
    let fit = if config.finetune_encoder {
        return finetune_jointly(model, params, task, config);
    } else {
        let train_x = pooled_features(model, params, &task.train_rows, task.seq_len)?;
        let test_x = pooled_features(model, params, &task.test_rows, task.seq_len)?;
        train_head(&train_x, &task.train_labels, &test_x, &task.test_labels, 2, config)?
    };
    Ok(FinetunedProbe {
        encoder: params.clone(),
        head: fit.head,
        rule: task.rule,
        accuracy: fit.accuracy,
        mean_log_likelihood: fit.mean_log_likelihood,
        n_train: fit.n_train,
        n_test: fit.n_test,
    })
}

fn finetune_jointly(model: &Model, params: &ParamVector, task: &ProbeTask, config: &ProbeConfig) -> Result<FinetunedProbe> {
    let n = config.train_count(task.train_rows.len());
    let mut rng = probe_rng(config);
    let mut head = ProbeHead::init(model.config.d_model, config.hidden_dim, 2, &mut rng);
    let p = params.len();
    let mut joint: Vec<f32> = params.values.iter().chain(&head.params).copied().collect();
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: config.learning_rate,
            warmup_steps: 0,
        },
        joint.len(),
    )?;
    let mut guard = DivergenceGuard::new();
    let bs = config.batch_size.min(n);
    for step in 1..=config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
        let rows: Vec<Vec<u32>> = idx.iter().map(|&i| task.train_rows[i].clone()).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| task.train_labels[i]).collect();
        let batch = MaskedBatch::unmasked(&rows, task.seq_len)?;
        let mut tape = Tape::<f32>::new();
        let enc = model.encode(&mut tape, &joint[..p], 0, &batch)?;
        let last = *enc.hidden.last().expect("encoder output");
        let pooled = tape.mean_pool_valid(last, batch.attention_mask.clone(), batch.seq_len)?;
        let z = head.logits_on_tape(&mut tape, &joint[p..], p, pooled)?;
        let loss = tape.cross_entropy(z, ys)?;
        guard.observe(step, tape.value(loss).item() as f64)?;
        let grad = tape.gradient(loss, joint.len())?;
        opt.step(&mut joint, &grad)?;
    }
    head.params = joint[p..].to_vec();
    let encoder = ParamVector::new(&model.config, joint[..p].to_vec())?;
    let test_x = pooled_features(model, &encoder, &task.test_rows, task.seq_len)?;
    let (accuracy, mean_log_likelihood) = head.score(&test_x, &task.test_labels)?;
    Ok(FinetunedProbe {
        encoder,
        head,
        rule: task.rule,
        accuracy,
        mean_log_likelihood,
        n_train: n,
        n_test: task.test_rows.len(),
    })
}

/// Zero-shot accuracy of a finetuned probe on the test rows of another
/// variant of its task.
pub fn domain_shift_eval(model: &Model, probe: &FinetunedProbe, task: &ProbeTask) -> Result<f64> {
    if probe.rule != task.rule {
        return Err(Error::LabelRuleMismatch);
    }
    let x = pooled_features(model, &probe.encoder, &task.test_rows, task.seq_len)?;
    Ok(probe.head.score(&x, &task.test_labels)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiGap {
    /// `ll_a - ll_b`, in nats.
    pub gap: f64,
    pub ll_a: f64,
    pub ll_b: f64,
    pub n_test: usize,
}

/// Difference of held-out log-likelihoods of two probes trained with the
/// same seed on two feature sets for the same labels.
#[allow(clippy::too_many_arguments)]
pub fn mi_gap_from_features(
    train_a: &[Vec<f32>],
    test_a: &[Vec<f32>],
    train_b: &[Vec<f32>],
    test_b: &[Vec<f32>],
    train_y: &[usize],
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<MiGap> {
    let a = train_head(train_a, train_y, test_a, test_y, classes, config)?;
    let b = train_head(train_b, train_y, test_b, test_y, classes, config)?;
    Ok(MiGap {
        gap: a.mean_log_likelihood - b.mean_log_likelihood,
        ll_a: a.mean_log_likelihood,
        ll_b: b.mean_log_likelihood,
        n_test: test_y.len(),
    })
}

/// Estimated `I(Y; phi_A) - I(Y; phi_B)` over frozen representations.
pub fn mi_gap(model: &Model, params_a: &ParamVector, params_b: &ParamVector, task: &ProbeTask, config: &ProbeConfig) -> Result<MiGap> {
    params_a.check_compatible(&model.config)?;
    params_b.check_compatible(&model.config)?;
    let feats = |p| -> Result<[Vec<Vec<f32>>; 2]> {
        Ok([
            representations(model, p, &task.train_rows, task.seq_len)?,
            representations(model, p, &task.test_rows, task.seq_len)?,
        ])
    };
    let [train_a, test_a] = feats(params_a)?;
    let [train_b, test_b] = feats(params_b)?;
    mi_gap_from_features(
        &train_a,
        &test_a,
        &train_b,
        &test_b,
        &task.train_labels,
        &task.test_labels,
        2,
        config,
    )
}

/// Analytic mutual information (nats) between a uniform bit and its copy
/// through a binary symmetric channel with flip probability `p`.
pub fn bsc_mutual_information(p: f64) -> f64 {
    let h = if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    };
    std::f64::consts::LN_2 - h
}
