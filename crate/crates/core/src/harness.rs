//! Config-driven experiment pipeline and on-disk artifact layout.
//!
//! Every stage reads its prerequisites from `output_dir` and writes its own
//! artifacts there:
//!
//! ```text
//! corpus/{source,target}-{train,val}.txt
//! pretrain/{checkpoint.bin,metrics.jsonl}
//! fisher/fisher.bin
//! <strategy>/{checkpoint.bin,metrics.jsonl,run.json}
//! report/{curves.csv,summary.csv}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Artifact;
use crate::corpus::{
    generate_domain, mask_batch, pack_sequences, parse_corpus_cache, sample_rows, write_corpus_cache, CorpusHeader,
    Domain, DomainSpec, Split,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamVector, N_SPECIAL};
use crate::probes::{domain_shift_eval, finetune_probe, make_probe_task, mi_gap, ProbeConfig, ProbeTask};
use crate::rng::{derive_seed, stream_rng};
use crate::strategies::{estimate_fisher_diagonal, FisherDiagonal, StepOutcome, StrategyConfig, StrategyKind};
use crate::trainer::{domain_tune, pretrain, Corpora, MetricsRecord, Phase, ProbeRecord, RunSink, TrainConfig};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CLTUNE_OUTPUT_DIR";

/// One synthetic domain. The target domain blends the source table with
/// its own by `overlap`; the source domain must leave `overlap` at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub alphabet_size: usize,
    #[serde(default = "default_successors")]
    pub successors: usize,
    pub table_seed: u64,
    #[serde(default)]
    pub overlap: f64,
    pub train_tokens: usize,
    pub val_tokens: usize,
}

fn default_successors() -> usize {
    3
}

/// Per-strategy settings; an absent `lambda` falls back to the strategy
/// default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTuneConfig {
    pub train: TrainConfig,
    #[serde(default = "default_fisher_batches")]
    pub fisher_batches: usize,
    #[serde(default)]
    pub strategies: BTreeMap<StrategyKind, StrategySettings>,
}

fn default_fisher_batches() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesConfig {
    #[serde(default = "default_probe_rows")]
    pub n_train: usize,
    #[serde(default = "default_probe_rows")]
    pub n_test: usize,
    #[serde(default)]
    pub head: ProbeConfig,
}

fn default_probe_rows() -> usize {
    1000
}

impl Default for ProbesConfig {
    fn default() -> Self {
        Self {
            n_train: default_probe_rows(),
            n_test: default_probe_rows(),
            head: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus_source: CorpusConfig,
    pub corpus_target: CorpusConfig,
    pub pretrain: TrainConfig,
    pub domain_tune: DomainTuneConfig,
    #[serde(default)]
    pub probes: ProbesConfig,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        let (s, t) = (&self.corpus_source, &self.corpus_target);
        if s.alphabet_size != t.alphabet_size {
            return fail(format!(
                "source and target alphabets differ ({} vs {})",
                s.alphabet_size, t.alphabet_size
            ));
        }
        if self.model.vocab_size != s.alphabet_size + N_SPECIAL as usize {
            return fail(format!(
                "model.vocab_size must be alphabet_size + {N_SPECIAL} = {}, got {}",
                s.alphabet_size + N_SPECIAL as usize,
                self.model.vocab_size
            ));
        }
        if s.overlap != 0.0 {
            return fail("corpus_source.overlap must be 0".into());
        }
        if !(0.0..=1.0).contains(&t.overlap) {
            return fail(format!("corpus_target.overlap must be in [0, 1], got {}", t.overlap));
        }
        for (name, c) in [("corpus_source", s), ("corpus_target", t)] {
            if c.successors == 0 || c.successors > c.alphabet_size {
                return fail(format!("{name}.successors must be in 1..={}", c.alphabet_size));
            }
            if c.train_tokens == 0 || c.val_tokens == 0 {
                return fail(format!("{name} token counts must be positive"));
            }
        }
        for (name, train) in [("pretrain", &self.pretrain), ("domain_tune.train", &self.domain_tune.train)] {
            train.validate()?;
            if train.seq_len > self.model.max_seq_len {
                return fail(format!(
                    "{name}.seq_len {} exceeds model.max_seq_len {}",
                    train.seq_len, self.model.max_seq_len
                ));
            }
        }
        if self.domain_tune.fisher_batches == 0 {
            return fail("domain_tune.fisher_batches must be positive".into());
        }
        for (kind, settings) in &self.domain_tune.strategies {
            if let Some(l) = settings.lambda {
                if !(l >= 0.0 && l.is_finite()) {
                    return fail(format!("lambda for {kind} must be nonnegative, got {l}"));
                }
            }
        }
        if self.probes.n_train == 0 || self.probes.n_test == 0 || self.probes.n_train + self.probes.n_test < 100 {
            return fail("probes need n_train, n_test > 0 and at least 100 examples in total".into());
        }
        self.probes.head.validate()
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Where a domain-tuning λ came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSource {
    CommandLine,
    Config,
    Default,
}

/// Sidecar describing a domain-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub strategy: StrategyKind,
    pub lambda: f64,
    pub lambda_source: LambdaSource,
    pub steps: usize,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Forward transfer: finetune on the target-domain task.
    Target,
    /// Backward transfer: finetune on the source-domain task.
    Source,
    /// Finetune on the target task, evaluate zero-shot on the source task.
    Shift,
    /// Representation MI gap against the SDT checkpoint.
    Mi,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [ProbeKind::Target, ProbeKind::Source, ProbeKind::Shift, ProbeKind::Mi];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Target => "target",
            ProbeKind::Source => "source",
            ProbeKind::Shift => "shift",
            ProbeKind::Mi => "mi",
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown probe task {s:?}")))
    }
}

/// Result of `gen-corpus`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusOutcome {
    pub path: PathBuf,
    pub written: bool,
    pub n_tokens: usize,
}

/// Result of `report`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutcome {
    pub curves_path: PathBuf,
    pub summary_path: PathBuf,
    pub n_curve_rows: usize,
    pub n_runs: usize,
}

/// Maps an error to the process exit code: 1 for usage or config
/// problems, 2 for missing prerequisites, 3 for numerical aborts.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) | Error::MissingStrategyState(_) | Error::NoRuns(_) => 2,
        Error::Diverged { .. } | Error::NonFinite { .. } | Error::NonFiniteUpdate(_) | Error::NegativeFisher { .. } => 3,
        _ => 1,
    }
}

/// Writes metrics as JSON lines and intermediate checkpoints beside them.
pub struct JsonlSink {
    writer: BufWriter<File>,
    dir: PathBuf,
    model_config: ModelConfig,
    digest: String,
}

impl JsonlSink {
    pub fn create(dir: &Path, model_config: &ModelConfig, digest: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            dir: dir.to_path_buf(),
            model_config: model_config.clone(),
            digest: digest.to_string(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        self.writer.flush().map_err(|e| Error::io(path, e))
    }
}

impl RunSink for JsonlSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.writer, "{}", record.to_line()).map_err(|e| Error::io(self.dir.join("metrics.jsonl"), e))
    }

    fn checkpoint(&mut self, step: usize, params: &ParamVector) -> Result<()> {
        Artifact::checkpoint(params, &self.model_config, Some(self.digest.clone()), serde_json::Value::Null)?
            .save(&self.dir.join(format!("checkpoint-{step}.bin")))
    }

    fn outcome(&mut self, _step: usize, _outcome: &StepOutcome) {}
}

/// Reads every line of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.is_empty()).map(MetricsRecord::parse_line).collect()
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A validated config bound to its digest and output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub digest: String,
    pub output_dir: PathBuf,
    pub model: Model,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            digest: config.digest(),
            output_dir: config.output_dir.clone(),
            model: Model::new(config.model.clone())?,
            config,
        })
    }

    /// Reads a config file and applies the `CLTUNE_OUTPUT_DIR` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut experiment = Self::new(ExperimentConfig::parse(&text)?)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            experiment.output_dir = PathBuf::from(dir);
        }
        Ok(experiment)
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = dir.into();
        self
    }

    fn master(&self) -> u64 {
        self.config.seeds.master
    }

    pub fn source_spec(&self) -> Result<DomainSpec> {
        let c = &self.config.corpus_source;
        DomainSpec::random(
            c.alphabet_size,
            c.successors,
            c.table_seed,
            derive_seed(self.master(), "corpus-source"),
        )
    }

    pub fn target_spec(&self) -> Result<DomainSpec> {
        let c = &self.config.corpus_target;
        let own = DomainSpec::random(c.alphabet_size, c.successors, c.table_seed, 0)?;
        DomainSpec::blend(&self.source_spec()?, &own, c.overlap, derive_seed(self.master(), "corpus-target"))
    }

    fn spec(&self, domain: Domain) -> Result<DomainSpec> {
        match domain {
            Domain::Source => self.source_spec(),
            Domain::Target => self.target_spec(),
        }
    }

    pub fn corpus_path(&self, domain: Domain, split: Split) -> PathBuf {
        self.output_dir
            .join("corpus")
            .join(format!("{}-{}.txt", domain.name(), split.name()))
    }

    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.output_dir.join(run)
    }

    pub fn checkpoint_path(&self, run: &str) -> PathBuf {
        self.run_dir(run).join("checkpoint.bin")
    }

    pub fn fisher_path(&self) -> PathBuf {
        self.output_dir.join("fisher").join("fisher.bin")
    }

    fn expected_header(&self, domain: Domain, split: Split) -> Result<CorpusHeader> {
        Ok(CorpusHeader {
            domain,
            split,
            seed: self.spec(domain)?.split_seed(split),
            digest: Some(self.digest.clone()),
        })
    }

    fn corpus_tokens(&self, domain: Domain, split: Split) -> usize {
        let c = match domain {
            Domain::Source => &self.config.corpus_source,
            Domain::Target => &self.config.corpus_target,
        };
        match split {
            Split::Train => c.train_tokens,
            Split::Val => c.val_tokens,
        }
    }

    /// Writes one corpus cache. An existing file with the expected header is
    /// left untouched; a mismatched one is refused unless `force`.
    pub fn gen_corpus(&self, domain: Domain, split: Split, force: bool) -> Result<CorpusOutcome> {
        let path = self.corpus_path(domain, split);
        let expected = self.expected_header(domain, split)?;
        let n_tokens = self.corpus_tokens(domain, split);
        if path.exists() && !force {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let first = text.lines().next().unwrap_or_default();
            match first.parse::<CorpusHeader>() {
                Ok(found) if found == expected => {
                    return Ok(CorpusOutcome {
                        path,
                        written: false,
                        n_tokens,
                    })
                }
                Ok(found) => {
                    return Err(Error::CorpusHeaderMismatch {
                        path,
                        found_seed: found.seed,
                        expected_seed: expected.seed,
                        detail: format!("found header '{found}', expected '{expected}'"),
                    })
                }
                Err(e) => {
                    return Err(Error::CorpusHeaderMismatch {
                        path,
                        found_seed: 0,
                        expected_seed: expected.seed,
                        detail: format!("existing header unreadable: {e}"),
                    })
                }
            }
        }
        let stream = generate_domain(&self.spec(domain)?, n_tokens, domain, split)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, write_corpus_cache(&expected, &stream)).map_err(|e| Error::io(&path, e))?;
        Ok(CorpusOutcome {
            path,
            written: true,
            n_tokens,
        })
    }

    /// Generates all four corpus caches.
    pub fn gen_all_corpora(&self, force: bool) -> Result<Vec<CorpusOutcome>> {
        let mut out = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for split in [Split::Train, Split::Val] {
                out.push(self.gen_corpus(domain, split, force)?);
            }
        }
        Ok(out)
    }

    /// Packed rows of one cached corpus.
    pub fn load_rows(&self, domain: Domain, split: Split, seq_len: usize) -> Result<Vec<Vec<u32>>> {
        let path = self.corpus_path(domain, split);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let (header, stream) = parse_corpus_cache(&text, self.config.model.vocab_size)?;
        let expected = self.expected_header(domain, split)?;
        if header != expected {
            return Err(Error::DigestMismatch(format!(
                "corpus cache {} does not match the config: found '{header}', expected '{expected}'",
                path.display()
            )));
        }
        Ok(pack_sequences(&stream, seq_len))
    }

    fn load_corpora(&self, seq_len: usize, needs_source_train: bool, needs_target_train: bool) -> Result<Corpora> {
        let load = |d, s, needed: bool| if needed { self.load_rows(d, s, seq_len) } else { Ok(Vec::new()) };
        Ok(Corpora {
            source_train: load(Domain::Source, Split::Train, needs_source_train)?,
            source_val: load(Domain::Source, Split::Val, true)?,
            target_train: load(Domain::Target, Split::Train, needs_target_train)?,
            target_val: load(Domain::Target, Split::Val, true)?,
        })
    }

    fn load_artifact(&self, path: &Path) -> Result<Artifact> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let artifact = Artifact::load(path)?;
        if artifact.header.config_digest.as_deref() != Some(self.digest.as_str()) {
            return Err(Error::DigestMismatch(format!(
                "{} was produced by config digest {}, current config is {}",
                path.display(),
                artifact.header.config_digest.as_deref().unwrap_or("<none>"),
                self.digest
            )));
        }
        if artifact.header.model_config != self.config.model {
            return Err(Error::IncompatibleCheckpoint {
                expected: format!("{:?}", self.config.model),
                found: format!("{:?}", artifact.header.model_config),
            });
        }
        Ok(artifact)
    }

    pub fn load_params(&self, run: &str) -> Result<ParamVector> {
        self.load_artifact(&self.checkpoint_path(run))?.params()
    }

    pub fn load_fisher(&self) -> Result<FisherDiagonal> {
        self.load_artifact(&self.fisher_path())?.to_fisher()
    }

    fn save_params(&self, run: &str, params: &ParamVector) -> Result<PathBuf> {
        let path = self.checkpoint_path(run);
        Artifact::checkpoint(params, &self.config.model, Some(self.digest.clone()), serde_json::Value::Null)?
            .save(&path)?;
        Ok(path)
    }

    /// Pretrains on the source domain; writes `pretrain/`.
    pub fn pretrain(&self) -> Result<ParamVector> {
        let cfg = &self.config.pretrain;
        let corpora = self.load_corpora(cfg.seq_len, true, false)?;
        let dir = self.run_dir("pretrain");
        let mut sink = JsonlSink::create(&dir, &self.config.model, &self.digest)?;
        let params = pretrain(&self.model, cfg, &corpora, self.master(), Some(self.digest.clone()), &mut sink)?;
        sink.finish()?;
        self.save_params("pretrain", &params)?;
        Ok(params)
    }

    /// Estimates the Fisher diagonal at the pretrained checkpoint.
    pub fn fisher(&self) -> Result<FisherDiagonal> {
        let params = self.load_params("pretrain")?;
        let cfg = &self.config.domain_tune.train;
        let rows = self.load_rows(Domain::Source, Split::Train, cfg.seq_len)?;
        let mut rng = stream_rng(self.master(), "fisher-sampling");
        let batches = (0..self.config.domain_tune.fisher_batches)
            .map(|_| {
                let picked = sample_rows(&rows, cfg.batch_size, &mut rng)?;
                mask_batch(&picked, self.config.model.vocab_size, cfg.masking, &mut rng, "fisher-sampling")
            })
            .collect::<Result<Vec<_>>>()?;
        let fisher = estimate_fisher_diagonal(&self.model, &params, &batches, self.master())?;
        Artifact::fisher(&fisher, &self.config.model, Some(self.digest.clone()))?.save(&self.fisher_path())?;
        Ok(fisher)
    }

    /// λ for `kind`: the explicit value, else the config entry, else the
    /// strategy default.
    pub fn resolve_lambda(&self, kind: StrategyKind, explicit: Option<f64>) -> (f64, LambdaSource) {
        if let Some(l) = explicit {
            return (l, LambdaSource::CommandLine);
        }
        match self.config.domain_tune.strategies.get(&kind).and_then(|s| s.lambda) {
            Some(l) => (l, LambdaSource::Config),
            None => (kind.default_lambda(), LambdaSource::Default),
        }
    }

    /// Domain-tunes the pretrained checkpoint under `kind`; writes
    /// `<strategy>/`.
    pub fn domain_tune(&self, kind: StrategyKind, lambda: Option<f64>) -> Result<(ParamVector, RunInfo)> {
        let (lambda, lambda_source) = self.resolve_lambda(kind, lambda);
        let init = self.load_params("pretrain")?;
        let mut strategy = StrategyConfig::new(kind, lambda);
        match kind {
            StrategyKind::L2 => strategy.anchor = Some(init.clone()),
            StrategyKind::Ewc => {
                strategy.fisher = Some(self.load_fisher()?);
                strategy.anchor = Some(init.clone());
            }
            StrategyKind::Dis => strategy.teacher = Some(init.clone()),
            _ => {}
        }
        let cfg = &self.config.domain_tune.train;
        let needs_source = matches!(kind, StrategyKind::Rh | StrategyKind::Gem | StrategyKind::Dis);
        let corpora = self.load_corpora(cfg.seq_len, needs_source, true)?;
        let dir = self.run_dir(kind.name());
        let mut sink = JsonlSink::create(&dir, &self.config.model, &self.digest)?;
        let params = domain_tune(
            &self.model,
            cfg,
            &mut strategy,
            &init,
            &corpora,
            self.master(),
            Some(self.digest.clone()),
            &mut sink,
        )?;
        sink.finish()?;
        self.save_params(kind.name(), &params)?;
        let info = RunInfo {
            strategy: kind,
            lambda,
            lambda_source,
            steps: cfg.steps,
            seed: self.master(),
            config_digest: self.digest.clone(),
        };
        let info_path = dir.join("run.json");
        let text = serde_json::to_string_pretty(&info)?;
        fs::write(&info_path, text + "\n").map_err(|e| Error::io(&info_path, e))?;
        Ok((params, info))
    }

    /// The target-domain probe task and its source-domain counterpart.
    pub fn probe_tasks(&self) -> Result<(ProbeTask, ProbeTask)> {
        let p = &self.config.probes;
        let seq_len = self.config.pretrain.seq_len;
        let seed = derive_seed(self.master(), "probe-task");
        let target = make_probe_task(&self.target_spec()?, Domain::Target, p.n_train, p.n_test, seq_len, seed, None)?;
        let source = make_probe_task(
            &self.source_spec()?,
            Domain::Source,
            p.n_train,
            p.n_test,
            seq_len,
            seed,
            Some(target.rule),
        )?;
        Ok((target, source))
    }

    /// Runs one probe on the checkpoint of `kind` and stores its record in
    /// that run's metrics, replacing an earlier record of the same task.
    pub fn probe(&self, kind: StrategyKind, task: ProbeKind) -> Result<ProbeRecord> {
        let params = self.load_params(kind.name())?;
        let metrics_path = self.run_dir(kind.name()).join("metrics.jsonl");
        if !metrics_path.exists() {
            return Err(Error::MissingArtifact(metrics_path));
        }
        let record = self.probe_params(&params, task)?;
        let mut records: Vec<MetricsRecord> = read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| !(r.phase == Phase::Probe && r.probe.as_ref().is_some_and(|p| p.task == task.name())))
            .collect();
        records.push(MetricsRecord {
            probe: Some(record.clone()),
            config_digest: Some(self.digest.clone()),
            ..MetricsRecord::new(0, Phase::Probe, Some(kind), self.master())
        });
        write_metrics(&metrics_path, &records)?;
        Ok(record)
    }

    /// Runs one probe on arbitrary parameters without touching disk, except
    /// to load the SDT baseline for the MI probe.
    pub fn probe_params(&self, params: &ParamVector, task: ProbeKind) -> Result<ProbeRecord> {
        let head = &self.config.probes.head;
        let (target, source) = self.probe_tasks()?;
        let mut record = ProbeRecord {
            task: task.name().to_string(),
            accuracy: None,
            in_domain_accuracy: None,
            mean_log_likelihood: None,
            mi_gap: None,
            baseline: None,
            n_train: 0,
            n_test: 0,
            hidden_dim: head.hidden_dim,
            train_steps: head.steps,
            learning_rate: head.learning_rate,
            frozen_encoder: !head.finetune_encoder,
            train_fraction: head.train_fraction,
        };
        match task {
            ProbeKind::Target | ProbeKind::Source => {
                let t = if task == ProbeKind::Target { &target } else { &source };
                let fit = finetune_probe(&self.model, params, t, head)?;
                record.accuracy = Some(fit.accuracy);
                record.mean_log_likelihood = Some(fit.mean_log_likelihood);
                record.n_train = fit.n_train;
                record.n_test = fit.n_test;
            }
            ProbeKind::Shift => {
                let fit = finetune_probe(&self.model, params, &target, head)?;
                record.accuracy = Some(domain_shift_eval(&self.model, &fit, &source)?);
                record.in_domain_accuracy = Some(fit.accuracy);
                record.n_train = fit.n_train;
                record.n_test = source.test_rows.len();
            }
            ProbeKind::Mi => {
                let baseline = self.load_params(StrategyKind::Sdt.name())?;
                let mi_head = ProbeConfig {
                    finetune_encoder: false,
                    ..head.clone()
                };
                let gap = mi_gap(&self.model, params, &baseline, &target, &mi_head)?;
                record.mi_gap = Some(gap.gap);
                record.mean_log_likelihood = Some(gap.ll_a);
                record.baseline = Some(StrategyKind::Sdt.name().to_string());
                record.frozen_encoder = true;
                record.n_train = (target.train_rows.len() as f64 * head.train_fraction).ceil() as usize;
                record.n_test = gap.n_test;
            }
        }
        Ok(record)
    }

    /// Metrics of every run present under the output directory: pretrain
    /// first, then strategies in canonical order.
    pub fn collect_runs(&self) -> Result<Vec<(String, Vec<MetricsRecord>)>> {
        let names = std::iter::once("pretrain").chain(StrategyKind::ALL.iter().map(|k| k.name()));
        let mut runs = Vec::new();
        for name in names {
            let path = self.run_dir(name).join("metrics.jsonl");
            if path.exists() {
                runs.push((name.to_string(), read_metrics(&path)?));
            }
        }
        Ok(runs)
    }

    /// Writes `report/curves.csv` and `report/summary.csv` from the metrics
    /// files alone.
    pub fn report(&self) -> Result<ReportOutcome> {
        let runs = self.collect_runs()?;
        if runs.is_empty() {
            return Err(Error::NoRuns(self.output_dir.clone()));
        }
        let report = build_report(&runs, Some(&self.digest))?;
        let dir = self.output_dir.join("report");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let curves_path = dir.join("curves.csv");
        let summary_path = dir.join("summary.csv");
        fs::write(&curves_path, &report.curves).map_err(|e| Error::io(&curves_path, e))?;
        fs::write(&summary_path, &report.summary).map_err(|e| Error::io(&summary_path, e))?;
        Ok(ReportOutcome {
            curves_path,
            summary_path,
            n_curve_rows: report.n_curve_rows,
            n_runs: runs.len(),
        })
    }
}

/// Rendered report tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub curves: String,
    pub summary: String,
    pub n_curve_rows: usize,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Builds the report tables from named runs. All records must carry the
/// same config digest, equal to `expected` when given.
pub fn build_report(runs: &[(String, Vec<MetricsRecord>)], expected: Option<&str>) -> Result<Report> {
    let mut digest: Option<&str> = expected;
    for (name, records) in runs {
        for r in records {
            let found = r.config_digest.as_deref().unwrap_or("<none>");
            match digest {
                None => digest = Some(found),
                Some(d) if d != found => {
                    return Err(Error::DigestMismatch(format!(
                        "run {name} has config digest {found}, expected {d}; refusing to mix runs"
                    )))
                }
                _ => {}
            }
        }
    }
    let mut curves = String::from("step,strategy,source_val_loss,target_val_loss\n");
    let mut summary = String::from(
        "strategy,source_val_initial,source_val_final,source_val_delta,target_val_initial,target_val_final,\
         target_accuracy,source_accuracy,shift_accuracy,shift_in_domain_accuracy,mi_gap\n",
    );
    let mut n_curve_rows = 0;
    for (name, records) in runs {
        let evals: Vec<&BTreeMap<String, f64>> = records.iter().filter_map(|r| r.eval_losses.as_ref()).collect();
        for r in records {
            if let Some(e) = &r.eval_losses {
                let _ = writeln!(
                    curves,
                    "{},{},{},{}",
                    r.step,
                    name,
                    cell(e.get("source_val").copied()),
                    cell(e.get("target_val").copied())
                );
                n_curve_rows += 1;
            }
        }
        let loss = |e: Option<&&BTreeMap<String, f64>>, key: &str| e.and_then(|m| m.get(key).copied());
        let (first, last) = (evals.first(), evals.last());
        let src0 = loss(first, "source_val");
        let src1 = loss(last, "source_val");
        let probe = |task: &str| {
            records
                .iter()
                .rev()
                .filter_map(|r| r.probe.as_ref())
                .find(|p| p.task == task)
        };
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{},{}",
            name,
            cell(src0),
            cell(src1),
            cell(src0.zip(src1).map(|(a, b)| b - a)),
            cell(loss(first, "target_val")),
            cell(loss(last, "target_val")),
            cell(probe("target").and_then(|p| p.accuracy)),
            cell(probe("source").and_then(|p| p.accuracy)),
            cell(probe("shift").and_then(|p| p.accuracy)),
            cell(probe("shift").and_then(|p| p.in_domain_accuracy)),
            cell(probe("mi").and_then(|p| p.mi_gap)),
        );
    }
    Ok(Report {
        curves,
        summary,
        n_curve_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, digest: &str, eval: Option<(f64, f64)>) -> MetricsRecord {
        MetricsRecord {
            eval_losses: eval.map(|(s, t)| {
                BTreeMap::from([("source_val".to_string(), s), ("target_val".to_string(), t)])
            }),
            config_digest: Some(digest.into()),
            ..MetricsRecord::new(step, Phase::DomainTune, Some(StrategyKind::Sdt), 0)
        }
    }

    #[test]
    fn report_counts_eval_events() {
        let runs = vec![(
            "sdt".to_string(),
            vec![record(0, "d", Some((1.0, 2.0))), record(1, "d", None), record(2, "d", Some((1.5, 1.0)))],
        )];
        let r = build_report(&runs, None).unwrap();
        assert_eq!(r.n_curve_rows, 2);
        assert_eq!(r.curves.lines().count(), 3);
        assert!(r.summary.lines().nth(1).unwrap().starts_with("sdt,1,1.5,0.5,2,1,"));
        assert_eq!(build_report(&runs, None).unwrap(), r);
    }

    #[test]
    fn report_refuses_mixed_digests() {
        let runs = vec![
            ("sdt".to_string(), vec![record(0, "a", Some((1.0, 1.0)))]),
            ("l2".to_string(), vec![record(0, "b", Some((1.0, 1.0)))]),
        ];
        assert!(matches!(build_report(&runs, None), Err(Error::DigestMismatch(_))));
        assert!(matches!(build_report(&runs[..1], Some("b")), Err(Error::DigestMismatch(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingArtifact("fisher/fisher.bin".into())), 2);
        assert_eq!(exit_code(&Error::NonFiniteUpdate(3)), 3);
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 1);
        assert_eq!(exit_code(&Error::NoRuns("out".into())), 2);
    }

    #[test]
    fn probe_kind_names_roundtrip() {
        for k in ProbeKind::ALL {
            assert_eq!(k.name().parse::<ProbeKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ProbeKind>().is_err());
    }
}
