//! Synthetic domains, sequence packing and masked-LM corruption.
//!
//! A domain is an order-2 Markov source over a token alphabet. The target
//! domain is a blend of its own table with the source table, so the
//! distance between domains is a single dial.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MASK, N_SPECIAL, PAD};
use crate::rng::{derive_seed, stream_rng};

/// Fraction of non-pad positions selected for prediction.
pub const MASK_RATE_PERCENT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "s",
            Domain::Target => "t",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" | "source" => Ok(Domain::Source),
            "t" | "target" => Ok(Domain::Target),
            other => Err(Error::InvalidConfig(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Order-2 Markov source. `transitions[(a * A + b) * A + c]` is
/// `P(next = c | prev2 = a, prev1 = b)` over alphabet symbols `0..A`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub alphabet_size: usize,
    pub transitions: Vec<f64>,
    /// Weight of the source table mixed into this one (0 for a source
    /// domain).
    pub overlap: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(alphabet_size: usize, transitions: Vec<f64>, overlap: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            alphabet_size,
            transitions,
            overlap,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alphabet_size;
        if a == 0 {
            return Err(Error::InvalidTable("empty alphabet".into()));
        }
        if a as u64 + N_SPECIAL as u64 > u32::MAX as u64 {
            return Err(Error::InvalidTable("alphabet too large".into()));
        }
        if self.transitions.len() != a * a * a {
            return Err(Error::InvalidTable(format!(
                "expected {} probabilities, got {}",
                a * a * a,
                self.transitions.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidTable(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        for (ctx, row) in self.transitions.chunks(a).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidTable(format!("context {ctx} has an invalid probability")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTable(format!("context {ctx} sums to {total}")));
            }
        }
        Ok(())
    }

    /// Random sparse table: each context puts most of its mass on
    /// `successors` symbols, with a small uniform floor. The successor set
    /// depends on the previous symbol and its weights on both, so the
    /// bigram marginal already carries most of the structure.
    pub fn random(alphabet_size: usize, successors: usize, table_seed: u64, seed: u64) -> Result<Self> {
        if alphabet_size == 0 || successors == 0 || successors > alphabet_size {
            return Err(Error::InvalidTable(format!(
                "cannot pick {successors} successors from an alphabet of {alphabet_size}"
            )));
        }
        const FLOOR_MASS: f64 = 0.02;
        let a = alphabet_size;
        let mut rng = stream_rng(table_seed, "transition-table");
        let mut transitions = vec![FLOOR_MASS / a as f64; a * a * a];
        let successor_sets: Vec<Vec<usize>> = (0..a).map(|_| index::sample(&mut rng, a, successors).into_vec()).collect();
        for (ctx, row) in transitions.chunks_mut(a).enumerate() {
            let picks = &successor_sets[ctx % a];
            let weights: Vec<f64> = (0..successors).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (c, w) in picks.iter().zip(&weights) {
                row[*c] += (1.0 - FLOOR_MASS) * w / total;
            }
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Self::new(a, transitions, 0.0, seed)
    }

    /// `overlap * source + (1 - overlap) * own`, sampled with `seed`.
    pub fn blend(source: &DomainSpec, own: &DomainSpec, overlap: f64, seed: u64) -> Result<Self> {
        if source.alphabet_size != own.alphabet_size {
            return Err(Error::InvalidTable("blended domains need equal alphabets".into()));
        }
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::InvalidTable(format!("overlap {overlap} outside [0, 1]")));
        }
        let a = source.alphabet_size;
        let mut transitions: Vec<f64> = source
            .transitions
            .iter()
            .zip(&own.transitions)
            .map(|(&s, &t)| overlap * s + (1.0 - overlap) * t)
            .collect();
        if overlap != 1.0 && overlap != 0.0 {
            for row in transitions.chunks_mut(a) {
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
        Self::new(a, transitions, overlap, seed)
    }

    pub fn conditional(&self, prev2: usize, prev1: usize) -> &[f64] {
        let a = self.alphabet_size;
        &self.transitions[(prev2 * a + prev1) * a..][..a]
    }

    /// Vocabulary size needed to hold this alphabet plus the specials.
    pub fn vocab_size(&self) -> usize {
        self.alphabet_size + N_SPECIAL as usize
    }

    /// Seed actually used for sampling a split; validation streams use an
    /// offset seed so they never coincide with training streams.
    pub fn split_seed(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.seed,
            Split::Val => derive_seed(self.seed, "validation-split"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub domain: Domain,
    pub split: Split,
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last
    // symbol with nonzero mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples `n_tokens` symbols. The chain starts from the context
/// `(0, 0)`; every emitted token is drawn from the table.
pub fn generate_domain(spec: &DomainSpec, n_tokens: usize, domain: Domain, split: Split) -> Result<TokenStream> {
    if n_tokens == 0 {
        return Err(Error::Empty("n_tokens"));
    }
    spec.validate()?;
    let mut rng = stream_rng(spec.split_seed(split), "domain-sampler");
    let (mut p2, mut p1) = (0usize, 0usize);
    let mut ids = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let next = sample_categorical(&mut rng, spec.conditional(p2, p1));
        ids.push(next as u32 + N_SPECIAL);
        p2 = p1;
        p1 = next;
    }
    Ok(TokenStream { ids, domain, split })
}

/// Contiguous non-overlapping windows of `seq_len`; the last partial window
/// is right-padded with [`PAD`].
pub fn pack_sequences(stream: &TokenStream, seq_len: usize) -> Vec<Vec<u32>> {
    assert!(seq_len > 0, "seq_len must be positive");
    stream
        .ids
        .chunks(seq_len)
        .map(|chunk| {
            let mut row = chunk.to_vec();
            row.resize(seq_len, PAD);
            row
        })
        .collect()
}

/// Token rows with masked-LM corruption applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Corrupted ids, `batch_size * seq_len`, row-major.
    pub input_ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub attention_mask: Vec<bool>,
    /// Sorted positions selected for prediction, per row.
    pub mask_positions: Vec<Vec<usize>>,
    /// Original token at each selected position, per row.
    pub labels: Vec<Vec<u32>>,
    /// Name of the random stream that produced the corruption.
    pub rng_stream: String,
}

impl MaskedBatch {
    /// Batch without any selected positions (for representation probes).
    pub fn unmasked(rows: &[Vec<u32>], seq_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("rows"));
        }
        let mut input_ids = Vec::with_capacity(rows.len() * seq_len);
        let mut attention_mask = Vec::with_capacity(rows.len() * seq_len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() > seq_len {
                return Err(Error::LengthMismatch {
                    what: "row longer than seq_len",
                    left: row.len(),
                    right: seq_len,
                });
            }
            if row.iter().all(|&t| t == PAD) {
                return Err(Error::AllPadRow(i));
            }
            for j in 0..seq_len {
                let t = row.get(j).copied().unwrap_or(PAD);
                input_ids.push(t);
                attention_mask.push(t != PAD);
            }
        }
        Ok(Self {
            batch_size: rows.len(),
            seq_len,
            input_ids,
            attention_mask,
            mask_positions: vec![Vec::new(); rows.len()],
            labels: vec![Vec::new(); rows.len()],
            rng_stream: String::new(),
        })
    }

    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }

    /// Selected positions as flat indices into `batch_size * seq_len`.
    pub fn flat_mask_positions(&self) -> Vec<usize> {
        self.mask_positions
            .iter()
            .enumerate()
            .flat_map(|(r, ps)| ps.iter().map(move |&p| r * self.seq_len + p))
            .collect()
    }

    pub fn flat_labels(&self) -> Vec<u32> {
        self.labels.iter().flatten().copied().collect()
    }

    /// Copy with `extra` padding positions appended to every row.
    pub fn with_padding(&self, extra: usize) -> Self {
        let new_len = self.seq_len + extra;
        let mut input_ids = Vec::with_capacity(self.batch_size * new_len);
        let mut attention_mask = Vec::with_capacity(self.batch_size * new_len);
        for r in 0..self.batch_size {
            input_ids.extend_from_slice(&self.input_ids[r * self.seq_len..][..self.seq_len]);
            input_ids.extend(std::iter::repeat_n(PAD, extra));
            attention_mask.extend_from_slice(&self.attention_mask[r * self.seq_len..][..self.seq_len]);
            attention_mask.extend(std::iter::repeat_n(false, extra));
        }
        Self {
            seq_len: new_len,
            input_ids,
            attention_mask,
            ..self.clone()
        }
    }
}

/// Draws `count` rows uniformly with replacement.
pub fn sample_rows<R: Rng>(rows: &[Vec<u32>], count: usize, rng: &mut R) -> Result<Vec<Vec<u32>>> {
    if rows.is_empty() {
        return Err(Error::Empty("rows"));
    }
    Ok((0..count).map(|_| rows[rng.gen_range(0..rows.len())].clone()).collect())
}

/// Number of positions selected in a row with `non_pad` real tokens.
pub fn masked_per_row(non_pad: usize) -> usize {
    (non_pad * MASK_RATE_PERCENT).div_ceil(100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingRule {
    /// Apply the 80/10/10 mask/random/keep corruption; otherwise every
    /// selected position becomes [`MASK`].
    pub corrupt: bool,
}

impl Default for MaskingRule {
    fn default() -> Self {
        Self { corrupt: true }
    }
}

/// Selects `ceil(15%)` of each row's real tokens without replacement and
/// corrupts them: 80% become [`MASK`], 10% a uniformly random regular
/// token, 10% stay unchanged.
pub fn mask_batch<R: Rng>(
    rows: &[Vec<u32>],
    vocab_size: usize,
    rule: MaskingRule,
    rng: &mut R,
    stream_name: &str,
) -> Result<MaskedBatch> {
    if rows.is_empty() {
        return Err(Error::Empty("rows"));
    }
    if vocab_size <= N_SPECIAL as usize {
        return Err(Error::InvalidConfig(format!("vocab_size {vocab_size} too small")));
    }
    let seq_len = rows[0].len();
    let mut batch = MaskedBatch::unmasked(rows, seq_len)?;
    for (r, row) in rows.iter().enumerate() {
        if row.len() != seq_len {
            return Err(Error::LengthMismatch {
                what: "ragged batch rows",
                left: row.len(),
                right: seq_len,
            });
        }
        let real: Vec<usize> = (0..seq_len).filter(|&j| row[j] != PAD).collect();
        let count = masked_per_row(real.len());
        let mut chosen: Vec<usize> = index::sample(rng, real.len(), count)
            .into_iter()
            .map(|k| real[k])
            .collect();
        chosen.sort_unstable();
        let mut labels = Vec::with_capacity(count);
        for &pos in &chosen {
            labels.push(row[pos]);
            let slot = &mut batch.input_ids[r * seq_len + pos];
            if rule.corrupt {
                let u: f64 = rng.gen();
                if u < 0.8 {
                    *slot = MASK;
                } else if u < 0.9 {
                    *slot = rng.gen_range(N_SPECIAL..vocab_size as u32);
                }
            } else {
                *slot = MASK;
            }
        }
        batch.mask_positions[r] = chosen;
        batch.labels[r] = labels;
    }
    batch.rng_stream = stream_name.to_string();
    Ok(batch)
}

/// Header of a corpus cache file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusHeader {
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
    pub digest: Option<String>,
}

impl fmt::Display for CorpusHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#cltune-corpus v1 domain={} split={} seed={}",
            self.domain.tag(),
            self.split.name(),
            self.seed
        )?;
        if let Some(d) = &self.digest {
            write!(f, " digest={d}")?;
        }
        Ok(())
    }
}

impl FromStr for CorpusHeader {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |reason: &str| Error::format("corpus header", reason.to_string());
        let mut parts = line.split(' ');
        if parts.next() != Some("#cltune-corpus") || parts.next() != Some("v1") {
            return Err(bad("missing '#cltune-corpus v1' prefix"));
        }
        let (mut domain, mut split, mut seed, mut digest) = (None, None, None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            match k {
                "domain" if v == "s" || v == "t" => domain = Some(v.parse()?),
                "split" if v == "train" || v == "val" => split = Some(v.parse()?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed is not an integer"))?),
                "digest" if !v.is_empty() => digest = Some(v.to_string()),
                _ => return Err(bad("unknown or invalid field")),
            }
        }
        Ok(Self {
            domain: domain.ok_or_else(|| bad("missing domain"))?,
            split: split.ok_or_else(|| bad("missing split"))?,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
            digest,
        })
    }
}

/// Serializes a stream as a header line followed by one decimal id per line.
pub fn write_corpus_cache(header: &CorpusHeader, stream: &TokenStream) -> String {
    let mut out = String::with_capacity(stream.ids.len() * 4 + 64);
    out.push_str(&header.to_string());
    out.push('\n');
    for id in &stream.ids {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    out
}

/// Parses a corpus cache file; ids must lie in `[N_SPECIAL, vocab_size)`.
pub fn parse_corpus_cache(text: &str, vocab_size: usize) -> Result<(CorpusHeader, TokenStream)> {
    let mut lines = text.lines();
    let header: CorpusHeader = lines
        .next()
        .ok_or_else(|| Error::format("corpus cache", "empty file"))?
        .parse()?;
    let mut ids = Vec::new();
    for (n, line) in lines.enumerate() {
        let id: u32 = line
            .parse()
            .map_err(|_| Error::format("corpus cache", format!("line {} is not a token id", n + 2)))?;
        if id < N_SPECIAL || id as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::format("corpus cache", "no tokens"));
    }
    let stream = TokenStream {
        ids,
        domain: header.domain,
        split: header.split,
    };
    Ok((header, stream))
}
