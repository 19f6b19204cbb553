//! Pretraining and domain-tuning loops with periodic validation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_batch, sample_rows, MaskedBatch, MaskingRule};
use crate::error::{Error, Result};
use crate::model::{init_params, Model, ParamVector};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::{derive_seed, stream_rng, RngStreams, Stream};
use crate::strategies::{strategy_step, RehearsalBuffer, SourceSampler, StepOutcome, StrategyConfig, StrategyKind};

/// Consecutive steps above the divergence threshold before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Loss multiple of the first-step loss that counts as divergent.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    DomainTune,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    pub eval_every: usize,
    /// Intermediate checkpoint period; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_eval_subsets")]
    pub eval_subsets: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub masking: MaskingRule,
    #[serde(default = "default_buffer_rows")]
    pub rehearsal_buffer_rows: usize,
}

fn default_eval_subsets() -> usize {
    5
}

fn default_eval_fraction() -> f64 {
    0.5
}

fn default_buffer_rows() -> usize {
    1024
}

impl TrainConfig {
    /// Desk-scale defaults: batch 8, sequence 64, Adam at 3e-4.
    pub fn desk(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 8,
            seq_len: 64,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-4,
            warmup_steps: 0,
            eval_every: (steps / 10).max(1),
            checkpoint_every: 0,
            eval_subsets: default_eval_subsets(),
            eval_fraction: default_eval_fraction(),
            masking: MaskingRule::default(),
            rehearsal_buffer_rows: default_buffer_rows(),
        }
    }

    /// Full-scale BERT domain-tuning settings: batch 8, 512-token rows,
    /// Adam at 5e-5.
    pub fn full_scale(steps: usize) -> Self {
        Self {
            seq_len: 512,
            learning_rate: 5e-5,
            ..Self::desk(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return fail("steps must be positive".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive".into());
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return fail(format!("eval_every must be in 1..={}, got {}", self.steps, self.eval_every));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.eval_subsets == 0 {
            return fail("eval_subsets must be positive".into());
        }
        check_fraction(self.eval_fraction)?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
        }
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction must be in (0, 1], got {fraction}")));
    }
    Ok(())
}

/// Packed rows of both domains and splits.
#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub source_train: Vec<Vec<u32>>,
    pub source_val: Vec<Vec<u32>>,
    pub target_train: Vec<Vec<u32>>,
    pub target_val: Vec<Vec<u32>>,
}

/// Summary of a downstream or MI probe, attached to `phase = "probe"`
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeRecord {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_domain_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_log_likelihood: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub hidden_dim: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub frozen_encoder: bool,
    pub train_fraction: f64,
}

/// One line of a metrics JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gem_flag: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_losses: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeRecord>,
    pub seed: u64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl MetricsRecord {
    pub fn new(step: usize, phase: Phase, strategy: Option<StrategyKind>, seed: u64) -> Self {
        Self {
            step,
            phase,
            strategy,
            target_loss: None,
            source_loss: None,
            penalty: None,
            gem_flag: None,
            eval_losses: None,
            probe: None,
            seed,
            wall_ms: 0,
            config_digest: None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics record serializes")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn is_eval(&self) -> bool {
        self.eval_losses.is_some()
    }
}

/// Destination for run output.
pub trait RunSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    fn checkpoint(&mut self, _step: usize, _params: &ParamVector) -> Result<()> {
        Ok(())
    }

    /// Full per-step outcome, for callers that audit gradients.
    fn outcome(&mut self, _step: usize, _outcome: &StepOutcome) {}
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(usize, ParamVector)>,
    pub outcomes: Vec<(usize, StepOutcome)>,
    pub keep_outcomes: bool,
}

impl RunSink for MemorySink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, params: &ParamVector) -> Result<()> {
        self.checkpoints.push((step, params.clone()));
        Ok(())
    }

    fn outcome(&mut self, step: usize, outcome: &StepOutcome) {
        if self.keep_outcomes {
            self.outcomes.push((step, outcome.clone()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub per_subset: Vec<f64>,
}

/// Mean masked-LM loss over `n_subsets` random subsets of `rows`, each
/// holding `ceil(fraction * len)` rows drawn without replacement.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng>(
    model: &Model,
    params: &ParamVector,
    rows: &[Vec<u32>],
    batch_size: usize,
    n_subsets: usize,
    fraction: f64,
    masking: MaskingRule,
    rng: &mut R,
) -> Result<EvalResult> {
    check_fraction(fraction)?;
    if rows.is_empty() {
        return Err(Error::Empty("validation rows"));
    }
    if n_subsets == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig("n_subsets and batch_size must be positive".into()));
    }
    let take = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len());
    let mut per_subset = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let picked: Vec<Vec<u32>> = if take == rows.len() {
            rows.to_vec()
        } else {
            index::sample(rng, rows.len(), take).into_iter().map(|i| rows[i].clone()).collect()
        };
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in picked.chunks(batch_size) {
            let batch = mask_batch(chunk, model.config.vocab_size, masking, rng, Stream::Eval.name())?;
            let loss = model.mlm_loss(params, &batch)? as f64;
            let n = batch.masked_count();
            total += loss * n as f64;
            count += n;
        }
        per_subset.push(total / count as f64);
    }
    let mean = per_subset.iter().sum::<f64>() / per_subset.len() as f64;
    Ok(EvalResult { mean, per_subset })
}

pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    above: usize,
}

impl DivergenceGuard {
    pub(crate) fn new() -> Self {
        Self { initial: None, above: 0 }
    }

    pub(crate) fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
        } else {
            self.above = 0;
        }
        if self.above >= DIVERGENCE_PATIENCE || !loss.is_finite() {
            return Err(Error::Diverged { step, loss, initial });
        }
        Ok(())
    }
}

/// Shared bookkeeping of one run.
struct RunContext<'a> {
    model: &'a Model,
    config: &'a TrainConfig,
    corpora: &'a Corpora,
    seed: u64,
    phase: Phase,
    strategy: Option<StrategyKind>,
    digest: Option<String>,
    started: Instant,
}

impl RunContext<'_> {
    fn base_record(&self, step: usize) -> MetricsRecord {
        MetricsRecord {
            wall_ms: self.started.elapsed().as_millis() as u64,
            config_digest: self.digest.clone(),
            ..MetricsRecord::new(step, self.phase, self.strategy, self.seed)
        }
    }

    /// Validation losses on every non-empty split. Each event replays the
    /// same subsets and masks.
    fn eval_record(&self, step: usize, params: &ParamVector) -> Result<MetricsRecord> {
        let eval_seed = derive_seed(self.seed, Stream::Eval.name());
        let mut losses = BTreeMap::new();
        for (name, rows) in [("source_val", &self.corpora.source_val), ("target_val", &self.corpora.target_val)] {
            if rows.is_empty() {
                continue;
            }
            let mut rng = stream_rng(eval_seed, name);
            let r = evaluate(
                self.model,
                params,
                rows,
                self.config.batch_size,
                self.config.eval_subsets,
                self.config.eval_fraction,
                self.config.masking,
                &mut rng,
            )?;
            losses.insert(name.to_string(), r.mean);
        }
        if losses.is_empty() {
            return Err(Error::Empty("validation rows"));
        }
        Ok(MetricsRecord {
            eval_losses: Some(losses),
            ..self.base_record(step)
        })
    }

    fn after_step(&self, step: usize, params: &ParamVector, sink: &mut dyn RunSink) -> Result<()> {
        if step.is_multiple_of(self.config.eval_every) || step == self.config.steps {
            sink.record(&self.eval_record(step, params)?)?;
        }
        if self.config.checkpoint_every > 0 && step.is_multiple_of(self.config.checkpoint_every) {
            sink.checkpoint(step, params)?;
        }
        Ok(())
    }
}

fn check_rows(rows: &[Vec<u32>], seq_len: usize, what: &'static str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty(what));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != seq_len) {
        return Err(Error::LengthMismatch {
            what: "row length vs seq_len",
            left: r.len(),
            right: seq_len,
        });
    }
    Ok(())
}

/// Trains freshly initialized parameters on the source domain.
pub fn pretrain(
    model: &Model,
    config: &TrainConfig,
    corpora: &Corpora,
    seed: u64,
    digest: Option<String>,
    sink: &mut dyn RunSink,
) -> Result<ParamVector> {
    config.validate()?;
    check_rows(&corpora.source_train, config.seq_len, "source training rows")?;
    let ctx = RunContext {
        model,
        config,
        corpora,
        seed,
        phase: Phase::Pretrain,
        strategy: None,
        digest,
        started: Instant::now(),
    };
    let mut params = init_params(&model.config)?;
    let mut streams = RngStreams::new(seed);
    let mut opt = Optimizer::new(config.optimizer_config(), params.len())?;
    let mut guard = DivergenceGuard::new();
    sink.record(&ctx.eval_record(0, &params)?)?;
    for step in 1..=config.steps {
        let rows = sample_rows(&corpora.source_train, config.batch_size, streams.get(Stream::DataOrderSource))?;
        let batch = mask_source(model, config, &rows, &mut streams)?;
        let (loss, grad) = model.mlm_loss_and_gradient(&params, &batch)?;
        guard.observe(step, loss as f64)?;
        opt.step(&mut params.values, &grad.0)?;
        sink.record(&MetricsRecord {
            source_loss: Some(loss as f64),
            ..ctx.base_record(step)
        })?;
        ctx.after_step(step, &params, sink)?;
    }
    Ok(params)
}

fn mask_source(model: &Model, config: &TrainConfig, rows: &[Vec<u32>], streams: &mut RngStreams) -> Result<MaskedBatch> {
    mask_batch(
        rows,
        model.config.vocab_size,
        config.masking,
        streams.get(Stream::MaskingSource),
        Stream::MaskingSource.name(),
    )
}

/// Continues training `init` on the target domain under `strategy`.
///
/// A rehearsal strategy without a buffer gets one sampled from the source
/// training rows.
#[allow(clippy::too_many_arguments)]
pub fn domain_tune(
    model: &Model,
    config: &TrainConfig,
    strategy: &mut StrategyConfig,
    init: &ParamVector,
    corpora: &Corpora,
    seed: u64,
    digest: Option<String>,
    sink: &mut dyn RunSink,
) -> Result<ParamVector> {
    config.validate()?;
    init.check_compatible(&model.config)?;
    check_rows(&corpora.target_train, config.seq_len, "target training rows")?;
    let mut streams = RngStreams::new(seed);
    if strategy.kind == StrategyKind::Rh && strategy.buffer.is_none() {
        strategy.buffer = Some(RehearsalBuffer::sample(
            &corpora.source_train,
            config.rehearsal_buffer_rows,
            &mut streams,
        )?);
    }
    if matches!(strategy.kind, StrategyKind::Rh | StrategyKind::Gem | StrategyKind::Dis) {
        check_rows(&corpora.source_train, config.seq_len, "source training rows")?;
    }
    strategy.validate()?;
    let ctx = RunContext {
        model,
        config,
        corpora,
        seed,
        phase: Phase::DomainTune,
        strategy: Some(strategy.kind),
        digest,
        started: Instant::now(),
    };
    let source = SourceSampler {
        rows: &corpora.source_train,
        batch_size: config.batch_size,
        vocab_size: model.config.vocab_size,
        masking: config.masking,
    };
    let mut params = init.clone();
    let mut opt = Optimizer::new(config.optimizer_config(), params.len())?;
    let mut guard = DivergenceGuard::new();
    sink.record(&ctx.eval_record(0, &params)?)?;
    for step in 1..=config.steps {
        let rows = sample_rows(&corpora.target_train, config.batch_size, streams.get(Stream::DataOrderTarget))?;
        let batch = mask_batch(
            &rows,
            model.config.vocab_size,
            config.masking,
            streams.get(Stream::MaskingTarget),
            Stream::MaskingTarget.name(),
        )?;
        let outcome = strategy_step(strategy, model, &params, &batch, &source, &mut streams)?;
        guard.observe(step, outcome.target_loss)?;
        opt.step(&mut params.values, &outcome.update_gradient.0)?;
        sink.record(&MetricsRecord {
            target_loss: Some(outcome.target_loss),
            source_loss: outcome.source_loss,
            penalty: outcome.penalty,
            gem_flag: (strategy.kind == StrategyKind::Gem).then_some(outcome.projection_applied),
            ..ctx.base_record(step)
        })?;
        sink.outcome(step, &outcome);
        ctx.after_step(step, &params, sink)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk(10).validate().is_ok());
        assert!(TrainConfig::desk(0).validate().is_err());
        let mut c = TrainConfig::desk(10);
        c.eval_every = 11;
        assert!(c.validate().is_err());
        c.eval_every = 5;
        c.eval_fraction = 0.0;
        assert!(c.validate().is_err());
        c.eval_fraction = 1.5;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::full_scale(10).learning_rate, 5e-5);
        assert_eq!(TrainConfig::full_scale(10).batch_size, 8);
    }

    #[test]
    fn divergence_guard_needs_patience() {
        let mut g = DivergenceGuard::new();
        g.observe(1, 1.0).unwrap();
        for s in 0..DIVERGENCE_PATIENCE - 1 {
            g.observe(s + 2, 11.0).unwrap();
        }
        g.observe(200, 1.0).unwrap();
        for s in 0..DIVERGENCE_PATIENCE - 1 {
            g.observe(s + 300, 11.0).unwrap();
        }
        assert!(matches!(g.observe(999, 11.0), Err(Error::Diverged { step: 999, .. })));
    }

    #[test]
    fn metrics_omit_absent_fields() {
        let r = MetricsRecord::new(3, Phase::DomainTune, Some(StrategyKind::Sdt), 7);
        let line = r.to_line();
        assert!(!line.contains("null"));
        assert!(!line.contains("source_loss"));
        assert!(line.contains("\"phase\":\"domain-tune\""));
        assert_eq!(MetricsRecord::parse_line(&line).unwrap(), r);
        assert!(MetricsRecord::parse_line(r#"{"step":1,"phase":"pretrain","seed":0,"wall_ms":0,"bogus":1}"#).is_err());
    }
}
