//! `cltune`: command-line driver for the domain-tuning pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cltune_core::corpus::{Domain, Split};
use cltune_core::harness::{exit_code, Experiment, ProbeKind};
use cltune_core::strategies::StrategyKind;
use cltune_core::Result;

#[derive(Debug, Parser)]
#[command(name = "cltune", version, about = "Continual-learning domain-tuning experiments on a tiny masked LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Sdt,
    Rh,
    L2,
    Ewc,
    Gem,
    Dis,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Sdt => StrategyKind::Sdt,
            StrategyArg::Rh => StrategyKind::Rh,
            StrategyArg::L2 => StrategyKind::L2,
            StrategyArg::Ewc => StrategyKind::Ewc,
            StrategyArg::Gem => StrategyKind::Gem,
            StrategyArg::Dis => StrategyKind::Dis,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Target,
    Source,
    Shift,
    Mi,
}

impl From<TaskArg> for ProbeKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Target => ProbeKind::Target,
            TaskArg::Source => ProbeKind::Source,
            TaskArg::Shift => ProbeKind::Shift,
            TaskArg::Mi => ProbeKind::Mi,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus cache file.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Overwrite an existing file whose header does not match.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain on the source domain.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate the Fisher diagonal at the pretrained checkpoint.
    Fisher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue training on the target domain under one strategy.
    DomainTune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run a downstream, domain-shift or MI probe on a tuned checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Summarize all runs into CSV tables.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            config,
            domain,
            split,
            force,
        } => {
            let exp = Experiment::load(&config)?;
            let domain = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let out = exp.gen_corpus(domain, split, force)?;
            let verb = if out.written { "wrote" } else { "up to date" };
            eprintln!("{verb}: {} ({} tokens)", out.path.display(), out.n_tokens);
        }
        Command::Pretrain { config } => {
            let exp = Experiment::load(&config)?;
            exp.pretrain()?;
            eprintln!("wrote {}", exp.checkpoint_path("pretrain").display());
        }
        Command::Fisher { config } => {
            let exp = Experiment::load(&config)?;
            let f = exp.fisher()?;
            eprintln!("wrote {} ({} batches)", exp.fisher_path().display(), f.n_batches_used);
        }
        Command::DomainTune {
            config,
            strategy,
            lambda,
        } => {
            let exp = Experiment::load(&config)?;
            let kind = StrategyKind::from(strategy);
            let (lam, source) = exp.resolve_lambda(kind, lambda);
            eprintln!("strategy {kind}: lambda {lam} ({source:?})");
            exp.domain_tune(kind, lambda)?;
            eprintln!("wrote {}", exp.checkpoint_path(kind.name()).display());
        }
        Command::Probe { config, strategy, task } => {
            let exp = Experiment::load(&config)?;
            let record = exp.probe(strategy.into(), task.into())?;
            println!("{}", serde_json::to_string(&record).expect("probe record serializes"));
        }
        Command::Report { config } => {
            let exp = Experiment::load(&config)?;
            let out = exp.report()?;
            eprintln!(
                "{} runs, {} curve rows: {}, {}",
                out.n_runs,
                out.n_curve_rows,
                out.curves_path.display(),
                out.summary_path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
