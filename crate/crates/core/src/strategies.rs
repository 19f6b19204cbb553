//! Continual-learning strategies over flat parameter vectors.
//!
//! Penalties, the rehearsal objective, distillation, empirical Fisher
//! estimation and the single-constraint GEM projection are pure functions;
//! [`strategy_step`] combines them into one update gradient per training
//! step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Gradient, Scalar, Tensor};
use crate::corpus::{mask_batch, sample_rows, MaskedBatch, MaskingRule};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::rng::{RngStreams, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Sdt,
    Rh,
    L2,
    Ewc,
    Gem,
    Dis,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Sdt,
        StrategyKind::Rh,
        StrategyKind::L2,
        StrategyKind::Ewc,
        StrategyKind::Gem,
        StrategyKind::Dis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Sdt => "sdt",
            StrategyKind::Rh => "rh",
            StrategyKind::L2 => "l2",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Gem => "gem",
            StrategyKind::Dis => "dis",
        }
    }

    /// Default multiplier; SDT and GEM take none.
    pub fn default_lambda(self) -> f64 {
        match self {
            StrategyKind::Sdt | StrategyKind::Gem => 0.0,
            StrategyKind::L2 => 1.0,
            StrategyKind::Ewc => 1e4,
            StrategyKind::Dis | StrategyKind::Rh => 0.1,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy '{s}'")))
    }
}

/// Diagonal empirical Fisher information.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    pub values: Vec<f32>,
    pub n_batches_used: usize,
    pub source_seed: u64,
}

impl FisherDiagonal {
    pub fn new(values: Vec<f32>, n_batches_used: usize, source_seed: u64) -> Result<Self> {
        check_fisher(&values)?;
        Ok(Self {
            values,
            n_batches_used,
            source_seed,
        })
    }
}

fn check_fisher(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        Some(index) => Err(Error::NegativeFisher {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn check_lengths(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { what, left: a, right: b });
    }
    Ok(())
}

/// `(lambda/2) * sum_i (theta_i - anchor_i)^2`
pub fn l2_penalty(theta: &[f32], anchor: &[f32], lambda: f64) -> Result<f64> {
    check_lengths("theta vs anchor", theta.len(), anchor.len())?;
    let s: f64 = theta
        .iter()
        .zip(anchor)
        .map(|(&t, &a)| {
            let d = t as f64 - a as f64;
            d * d
        })
        .sum();
    Ok(0.5 * lambda * s)
}

/// `(lambda/2) * sum_i F_i (theta_i - anchor_i)^2`
pub fn ewc_penalty(theta: &[f32], anchor: &[f32], fisher: &[f32], lambda: f64) -> Result<f64> {
    check_lengths("theta vs anchor", theta.len(), anchor.len())?;
    check_lengths("theta vs fisher", theta.len(), fisher.len())?;
    check_fisher(fisher)?;
    let s: f64 = theta
        .iter()
        .zip(anchor)
        .zip(fisher)
        .map(|((&t, &a), &f)| {
            let d = t as f64 - a as f64;
            f as f64 * d * d
        })
        .sum();
    Ok(0.5 * lambda * s)
}

/// Gradient of the quadratic penalty: `lambda * F * (theta - anchor)`, with
/// `F = 1` when `fisher` is absent.
pub fn penalty_gradient(theta: &[f32], anchor: &[f32], fisher: Option<&[f32]>, lambda: f64) -> Result<Vec<f64>> {
    check_lengths("theta vs anchor", theta.len(), anchor.len())?;
    if let Some(f) = fisher {
        check_lengths("theta vs fisher", theta.len(), f.len())?;
    }
    Ok(theta
        .iter()
        .zip(anchor)
        .enumerate()
        .map(|(i, (&t, &a))| {
            let w = fisher.map_or(1.0, |f| f[i] as f64);
            lambda * w * (t as f64 - a as f64)
        })
        .collect())
}

/// `loss_t + lambda * loss_s`
pub fn rehearsal_loss(loss_t: f64, loss_s: f64, lambda: f64) -> f64 {
    loss_t + lambda * loss_s
}

/// Mean over rows of `-sum_v softmax(teacher)_v * log_softmax(student)_v`.
pub fn distillation_loss(teacher_logits: &Tensor<f32>, student_logits: &Tensor<f32>) -> Result<f64> {
    if teacher_logits.shape() != student_logits.shape() || teacher_logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "distillation_loss",
            lhs: teacher_logits.shape().to_vec(),
            rhs: student_logits.shape().to_vec(),
        });
    }
    let v = teacher_logits.cols();
    let rows = teacher_logits.rows();
    let mut total = 0.0f64;
    for r in 0..rows {
        let t: Vec<f64> = teacher_logits.data()[r * v..(r + 1) * v].iter().map(|&x| x as f64).collect();
        let s: Vec<f64> = student_logits.data()[r * v..(r + 1) * v].iter().map(|&x| x as f64).collect();
        let p = softmax(&Tensor::new(vec![1, v], t)?);
        let smax = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = smax + s.iter().map(|x| (x - smax).exp()).sum::<f64>().ln();
        total -= p.data().iter().zip(&s).map(|(&pv, &sv)| pv * (sv - lse)).sum::<f64>();
    }
    Ok(total / rows as f64)
}

/// Mean of squared per-batch gradients.
pub fn fisher_from_gradients<I>(gradients: I, source_seed: u64) -> Result<FisherDiagonal>
where
    I: IntoIterator<Item = Result<Gradient>>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for g in gradients {
        let g = g?;
        if n == 0 {
            acc = vec![0.0; g.len()];
        }
        check_lengths("fisher gradients", g.len(), acc.len())?;
        for (a, &x) in acc.iter_mut().zip(g.as_slice()) {
            *a += x as f64 * x as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("fisher batches"));
    }
    let values = acc.into_iter().map(|a| (a / n as f64) as f32).collect();
    FisherDiagonal::new(values, n, source_seed)
}

/// Empirical Fisher diagonal of the masked-LM loss at fixed `params`.
pub fn estimate_fisher_diagonal(
    model: &Model,
    params: &ParamVector,
    source_batches: &[MaskedBatch],
    source_seed: u64,
) -> Result<FisherDiagonal> {
    if source_batches.is_empty() {
        return Err(Error::Empty("fisher batches"));
    }
    fisher_from_gradients(
        source_batches.iter().map(|b| model.mlm_loss_and_gradient(params, b).map(|(_, g)| g)),
        source_seed,
    )
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap_or(f64::NAN) * y.to_f64().unwrap_or(f64::NAN)).sum()
}

/// Projects `g_t` onto the half-space `<g, g_s> >= 0`.
///
/// Returns `g_t` unchanged (flag `false`) when the inner product is already
/// nonnegative or `g_s` is zero; otherwise removes the component of `g_t`
/// along `g_s`. Rounding to the storage precision is corrected so that the
/// stored result satisfies `<g, g_s> >= -1e-9 |g| |g_s|`.
pub fn gem_project<T: Scalar>(g_t: &[T], g_s: &[T]) -> Result<(Vec<T>, bool)> {
    check_lengths("g_t vs g_s", g_t.len(), g_s.len())?;
    let ts = dot(g_t, g_s);
    let ss = dot(g_s, g_s);
    if ts >= 0.0 || ss == 0.0 {
        return Ok((g_t.to_vec(), false));
    }
    let gs64: Vec<f64> = g_s.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let mut g64: Vec<f64> = g_t
        .iter()
        .zip(&gs64)
        .map(|(x, &s)| x.to_f64().unwrap_or(f64::NAN) - ts / ss * s)
        .collect();
    let mut g: Vec<T> = g64.iter().map(|&x| T::of(x)).collect();
    let norm_s = ss.sqrt();
    let mut boost = 1.0;
    for _ in 0..32 {
        let gs = dot(&g, g_s);
        let norm_g = dot(&g, &g).sqrt();
        if gs >= -1e-9 * norm_g * norm_s {
            break;
        }
        let c = -gs / ss * boost;
        for (x, &s) in g64.iter_mut().zip(&gs64) {
            *x += c * s;
        }
        g = g64.iter().map(|&x| T::of(x)).collect();
        boost *= 2.0;
    }
    Ok((g, true))
}

/// Fixed source rows sampled once and cycled in order.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalBuffer {
    rows: Vec<Vec<u32>>,
    cursor: usize,
}

impl RehearsalBuffer {
    pub fn sample(source_rows: &[Vec<u32>], size: usize, streams: &mut RngStreams) -> Result<Self> {
        if size == 0 {
            return Err(Error::Empty("rehearsal buffer"));
        }
        let rows = sample_rows(source_rows, size, streams.get(Stream::RehearsalSampling))?;
        Ok(Self { rows, cursor: 0 })
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn next_rows(&mut self, count: usize) -> Vec<Vec<u32>> {
        (0..count)
            .map(|_| {
                let row = self.rows[self.cursor].clone();
                self.cursor = (self.cursor + 1) % self.rows.len();
                row
            })
            .collect()
    }
}

/// Strategy identity, multiplier and the state it needs.
#[derive(Debug, Clone)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub lambda: f64,
    pub anchor: Option<ParamVector>,
    pub fisher: Option<FisherDiagonal>,
    pub buffer: Option<RehearsalBuffer>,
    pub teacher: Option<ParamVector>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            anchor: None,
            fisher: None,
            buffer: None,
            teacher: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        match self.kind {
            StrategyKind::L2 if self.anchor.is_none() => Err(Error::MissingStrategyState("l2 anchor")),
            StrategyKind::Ewc if self.anchor.is_none() => Err(Error::MissingStrategyState("ewc anchor")),
            StrategyKind::Ewc if self.fisher.is_none() => Err(Error::MissingStrategyState("ewc fisher")),
            StrategyKind::Rh if self.buffer.is_none() => Err(Error::MissingStrategyState("rehearsal buffer")),
            StrategyKind::Dis if self.teacher.is_none() => Err(Error::MissingStrategyState("distillation teacher")),
            _ => Ok(()),
        }
    }

    /// Value of the quadratic penalty at `theta` (L2 and EWC only).
    pub fn penalty(&self, theta: &[f32]) -> Result<Option<f64>> {
        let anchor = || self.anchor.as_ref().ok_or(Error::MissingStrategyState("anchor"));
        match self.kind {
            StrategyKind::L2 => Ok(Some(l2_penalty(theta, &anchor()?.values, self.lambda)?)),
            StrategyKind::Ewc => {
                let fisher = self.fisher.as_ref().ok_or(Error::MissingStrategyState("ewc fisher"))?;
                Ok(Some(ewc_penalty(theta, &anchor()?.values, &fisher.values, self.lambda)?))
            }
            _ => Ok(None),
        }
    }
}

/// Source-domain data available to strategies that consult it.
#[derive(Debug, Clone, Copy)]
pub struct SourceSampler<'a> {
    pub rows: &'a [Vec<u32>],
    pub batch_size: usize,
    pub vocab_size: usize,
    pub masking: MaskingRule,
}

impl SourceSampler<'_> {
    /// Fresh batch from the source training rows.
    pub fn fresh_batch(&self, streams: &mut RngStreams) -> Result<MaskedBatch> {
        let rows = sample_rows(self.rows, self.batch_size, streams.get(Stream::DataOrderSource))?;
        self.mask(&rows, streams)
    }

    pub fn mask(&self, rows: &[Vec<u32>], streams: &mut RngStreams) -> Result<MaskedBatch> {
        mask_batch(
            rows,
            self.vocab_size,
            self.masking,
            streams.get(Stream::MaskingSource),
            Stream::MaskingSource.name(),
        )
    }
}

/// Everything one strategy step measured.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub update_gradient: Gradient,
    pub target_loss: f64,
    pub source_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub projection_applied: bool,
    /// Raw target and source gradients, kept for GEM so the constraint can
    /// be re-checked.
    pub target_gradient: Option<Gradient>,
    pub source_gradient: Option<Gradient>,
}

fn add_scaled(base: &[f32], other: &[f32], lambda: f64) -> Vec<f32> {
    base.iter()
        .zip(other)
        .map(|(&b, &o)| (b as f64 + lambda * o as f64) as f32)
        .collect()
}

/// Computes the update gradient of one domain-tuning step.
///
/// Target-side randomness is consumed by the caller when building
/// `target_batch`; source-side draws here use only the source and
/// rehearsal streams.
pub fn strategy_step(
    config: &mut StrategyConfig,
    model: &Model,
    params: &ParamVector,
    target_batch: &MaskedBatch,
    source: &SourceSampler<'_>,
    streams: &mut RngStreams,
) -> Result<StepOutcome> {
    config.validate()?;
    let (lt, gt) = model.mlm_loss_and_gradient(params, target_batch)?;
    let mut out = StepOutcome {
        update_gradient: gt,
        target_loss: lt as f64,
        source_loss: None,
        penalty: None,
        projection_applied: false,
        target_gradient: None,
        source_gradient: None,
    };
    let lambda = config.lambda;
    match config.kind {
        StrategyKind::Sdt => {}
        StrategyKind::L2 | StrategyKind::Ewc => {
            let anchor = config.anchor.as_ref().expect("validated");
            let fisher = config.fisher.as_ref().map(|f| f.values.as_slice());
            let fisher = if config.kind == StrategyKind::Ewc { fisher } else { None };
            out.penalty = config.penalty(&params.values)?;
            if lambda != 0.0 {
                let pg = penalty_gradient(&params.values, &anchor.values, fisher, lambda)?;
                for (g, p) in out.update_gradient.0.iter_mut().zip(pg) {
                    *g = (*g as f64 + p) as f32;
                }
            }
        }
        StrategyKind::Rh => {
            let rows = config.buffer.as_mut().expect("validated").next_rows(source.batch_size);
            let sb = source.mask(&rows, streams)?;
            let (ls, gs) = model.mlm_loss_and_gradient(params, &sb)?;
            out.source_loss = Some(ls as f64);
            if lambda != 0.0 {
                out.update_gradient = Gradient(add_scaled(&out.update_gradient.0, &gs.0, lambda));
            }
        }
        StrategyKind::Gem => {
            let sb = source.fresh_batch(streams)?;
            let (ls, gs) = model.mlm_loss_and_gradient(params, &sb)?;
            let (g, applied) = gem_project(&out.update_gradient.0, &gs.0)?;
            out.source_loss = Some(ls as f64);
            out.projection_applied = applied;
            out.target_gradient = Some(std::mem::replace(&mut out.update_gradient, Gradient(g)));
            out.source_gradient = Some(gs);
        }
        StrategyKind::Dis => {
            let teacher = config.teacher.as_ref().expect("validated");
            let sb = source.fresh_batch(streams)?;
            let teacher_logits = model.masked_logits(teacher, &sb)?;
            let probs = softmax(&teacher_logits);
            let (ld, gd) = model.distillation_loss_and_gradient(params, &sb, &probs)?;
            out.penalty = Some(lambda * ld as f64);
            if lambda != 0.0 {
                out.update_gradient = Gradient(add_scaled(&out.update_gradient.0, &gd.0, lambda));
            }
        }
    }
    if !out.update_gradient.is_finite() {
        let index = out.update_gradient.0.iter().position(|g| !g.is_finite()).unwrap_or(0);
        return Err(Error::NonFiniteUpdate(index));
    }
    Ok(out)
}
